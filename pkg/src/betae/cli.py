"""``betae`` command line: ingest → generate → train → eval / correlate / classify-empty, plus answer.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical abort. Settings resolve as built-in desk defaults <
``--config`` file (``key=value`` lines) < explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np
from threadpoolctl import threadpool_limits

from . import special
from .evaluate import (empty_answer_auc, evaluate_split, uncertainty_correlation,
                       write_rank_dump)
from .kg import FormatError, load_graph_dir, missing_files, write_manifest
from .model import BetaModel, ModelConfig
from .query import STRUCTURES, QuerySyntaxError, StructureError, parse_query, to_dm
from .sampler import (default_counts, generate_dataset, read_dataset, sample_empty_queries,
                      sample_nonempty_queries, summary_table, write_dataset)
from .train import (FULL_SCALE_MODEL, FULL_SCALE_TRAIN, NumericalError, TrainConfig, Trainer,
                    coerce_fields, read_config_file)

logger = logging.getLogger("betae")

DEFAULT_SEED = 0

# Desk-scale profile: small enough to train on one CPU core in minutes.
DESK_TRAIN = dict(gamma=8.0, neg_k=32, batch_size=128, lr=1e-2, steps=2000)
DESK_MODEL = dict(dim=16, hidden_dim=128, num_layers=3)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument parsing

def _common(p, *, graph=False, dataset=False, checkpoint=False, seed=False, threads=True):
    p.add_argument("--config", help="key=value file; explicit flags take precedence")
    if graph:
        p.add_argument("--graph-dir")
        p.add_argument("--add-inverse", action="store_true", default=None,
                       help="add a reversed copy of every relation")
    if dataset:
        p.add_argument("--dataset-dir")
    if checkpoint:
        p.add_argument("--checkpoint")
    if seed:
        p.add_argument("--seed", type=int)
    if threads:
        p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="betae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="load a graph directory, print counts, write a checksum manifest")
    _common(p, graph=True, threads=False)

    p = sub.add_parser("generate", help="sample query datasets for train/valid/test")
    _common(p, graph=True, dataset=True, seed=True)
    p.add_argument("--max-answers", type=int)
    p.add_argument("--exhaustive-1p", action="store_true", default=None)
    p.add_argument("--train-queries", type=int, help="training queries per conjunctive structure")
    p.add_argument("--eval-queries", type=int, help="valid/test queries per structure")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _common(p, dataset=True, checkpoint=True, seed=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--neg-k", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--per-relation-mlp", action="store_true", default=None)
    p.add_argument("--attention", choices=("global", "per-dim"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.add_argument("--full-scale", action="store_true",
                   help="start from full-scale hyperparameters instead of the desk profile")
    p.add_argument("--log", help="metrics log path (default: <checkpoint>.log)")

    p = sub.add_parser("eval", help="filtered ranking metrics on hard answers")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.add_argument("--union", choices=("dnf", "dm", "both"))
    p.add_argument("--rank-dump", help="write query_id<TAB>answer_id<TAB>rank rows (prefix when --union both)")
    p.add_argument("--records", help="write line-delimited JSON records")

    p = sub.add_parser("correlate", help="entropy vs answer-set size (Spearman/Pearson)")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.add_argument("--records")

    p = sub.add_parser("classify-empty", help="ROC-AUC of entropy for empty vs answerable queries")
    _common(p, graph=True, checkpoint=True, seed=True)
    p.add_argument("--count", type=int, help="queries per pool per structure")
    p.add_argument("--structures", help="comma-separated structure names")
    p.add_argument("--min-answers", type=int,
                   help="answerable pool keeps queries with more than this many answers")
    p.add_argument("--records")

    p = sub.add_parser("answer", help="rank all entities for a query")
    _common(p, checkpoint=True, threads=False)
    p.add_argument("query", help="query in s-expression form, e.g. '(p 0 (e 3))'")
    p.add_argument("-k", "--top", type=int, default=10)
    p.add_argument("--union", choices=("dnf", "dm"))
    return parser


# ---------------------------------------------------------------------------
# settings resolution

_DEFAULTS = {
    "seed": DEFAULT_SEED, "threads": 1, "add_inverse": False, "max_answers": 100,
    "exhaustive_1p": False, "train_queries": 1000, "eval_queries": 100, "split": "test",
    "union": "both", "count": 200, "min_answers": 5, "checkpoint_every": 0,
}

_FLAG_TO_TRAIN = {"gamma": "gamma", "neg_k": "neg_k", "batch": "batch_size", "lr": "lr",
                  "steps": "steps", "checkpoint_every": "checkpoint_every", "seed": "seed"}
_FLAG_TO_MODEL = {"dim": "dim", "hidden_dim": "hidden_dim", "per_relation_mlp": "per_relation_mlp",
                  "attention": "attention"}


def resolve(args) -> dict:
    """Merge defaults, the optional config file and explicit flags into one dict."""
    settings = dict(_DEFAULTS)
    if getattr(args, "config", None):
        try:
            settings.update(read_config_file(args.config))
        except (OSError, ValueError) as exc:
            raise UsageError(f"config: {exc}") from exc
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            settings[k] = v
    return settings


def _need(settings, key):
    value = settings.get(key)
    if value in (None, ""):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return value


def _int(settings, key):
    try:
        return int(settings[key])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key}: expected an integer, got {settings[key]!r}") from exc


def _bool(settings, key):
    v = settings.get(key)
    return v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")


def _configs(settings):
    full = _bool(settings, "full_scale")
    train_vals = dict(FULL_SCALE_TRAIN if full else DESK_TRAIN)
    model_vals = dict(FULL_SCALE_MODEL if full else DESK_MODEL)
    for flag, field_name in _FLAG_TO_TRAIN.items():
        if flag in settings:
            train_vals[field_name] = settings[flag]
    for name in ("batch_size",):  # config files may use the dataclass spelling
        if name in settings:
            train_vals[name] = settings[name]
    for flag, field_name in _FLAG_TO_MODEL.items():
        if flag in settings:
            model_vals[field_name] = settings[flag]
    try:
        train = TrainConfig(**{**asdict(TrainConfig()), **coerce_fields(TrainConfig, {
            k: str(v) for k, v in train_vals.items()})})
        model = ModelConfig(**coerce_fields(ModelConfig, {k: str(v) for k, v in model_vals.items()}))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return train, model


# ---------------------------------------------------------------------------
# helpers

def _load_graph(settings):
    graph_dir = _need(settings, "graph_dir")
    if not os.path.isdir(graph_dir):
        raise DataError(f"{graph_dir}: not a directory")
    missing = missing_files(graph_dir)
    if missing:
        raise DataError(f"{graph_dir}: missing files: {', '.join(missing)}")
    return load_graph_dir(graph_dir, _bool(settings, "add_inverse"))


def _load_dataset(settings):
    path = _need(settings, "dataset_dir")
    if not os.path.isdir(path):
        raise DataError(f"{path}: dataset directory not found")
    return read_dataset(path)


def _load_model(settings):
    path = _need(settings, "checkpoint")
    if not os.path.isfile(path):
        raise DataError(f"{path}: checkpoint not found")
    model, header, _ = BetaModel.load(path)
    return model, header


def _provenance(header, ds=None) -> dict:
    """Seeds recorded in report headers: the training seed and, if known, the dataset seed."""
    meta = header.get("meta", {})
    out = {"seed": meta.get("seed")}
    if ds is not None:
        out["dataset_seed"] = ds.seed
    return out


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(settings, out):
    data = _load_graph(settings)
    sizes = "/".join(str(len(data.triples[s])) for s in ("train", "valid", "test"))
    out.write(f"{data.num_entities} entities, {data.num_relations} relations, {sizes} edges\n")
    for name, g in zip(("g_train", "g_valid", "g_test"), data.splits):
        out.write(f"{name}: {g.num_edges} edges, checksum {g.checksum()}\n")
    path = write_manifest(settings["graph_dir"])
    out.write(f"manifest: {path}\n")
    return 0


def cmd_generate(settings, out):
    data = _load_graph(settings)
    dataset_dir = _need(settings, "dataset_dir")
    counts = default_counts(_int(settings, "train_queries"), _int(settings, "eval_queries"),
                            _int(settings, "eval_queries"))
    ds = generate_dataset(data.splits, counts, seed=_int(settings, "seed"),
                          max_answers=_int(settings, "max_answers"),
                          exhaustive_1p=_bool(settings, "exhaustive_1p"),
                          threads=_int(settings, "threads"))
    write_dataset(ds, dataset_dir)
    table = summary_table(ds)
    with open(os.path.join(dataset_dir, "summary.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# seed={ds.seed}\n{table}\n")
    out.write(table + "\n")
    return 0


def cmd_train(settings, out):
    ds = _load_dataset(settings)
    checkpoint = _need(settings, "checkpoint")
    train_cfg, model_cfg = _configs(settings)
    train_queries = ds.split("train")
    if not any(train_queries.values()):
        raise DataError("dataset has no training queries")
    if _bool(settings, "resume"):
        if not os.path.isfile(checkpoint):
            raise DataError(f"{checkpoint}: checkpoint not found")
        trainer = Trainer.resume(checkpoint, train_queries)
        steps = train_cfg.steps if "steps" in settings else trainer.config.steps
    else:
        if ds.num_entities < 1 or ds.num_relations < 1:
            raise DataError("dataset header lacks entity/relation counts; regenerate it")
        model = BetaModel(ds.num_entities, ds.num_relations, model_cfg, seed=train_cfg.seed)
        trainer = Trainer(model, train_queries, train_cfg)
        steps = train_cfg.steps
    log_path = settings.get("log") or checkpoint + ".log"
    resume = _bool(settings, "resume")
    with open(log_path, "a" if resume else "w", encoding="utf-8", newline="\n") as log:
        if not resume:
            log.write(f"# seed={train_cfg.seed}\tdataset_seed={ds.seed}\n")
        records = trainer.run(steps, log=log, checkpoint_path=checkpoint)
    trainer.save(checkpoint, meta={"seed": trainer.config.seed, "dataset": ds.checksums,
                                   "dataset_seed": ds.seed})
    if records:
        head = np.mean([r.loss for r in records[:10]])
        tail = np.mean([r.loss for r in records[-10:]])
        out.write(f"trained {len(records)} steps (total {trainer.step_count}); "
                  f"loss {head:.4f} -> {tail:.4f}\n")
    out.write(f"checkpoint: {checkpoint}\n")
    return 0


def cmd_eval(settings, out):
    ds = _load_dataset(settings)
    model, header = _load_model(settings)
    prov = _provenance(header, ds)
    split = settings["split"]
    queries = ds.split(split)
    modes = ("dnf", "dm") if settings["union"] == "both" else (settings["union"],)
    records = []
    for mode in modes:
        metrics = evaluate_split(queries, model, union_mode=mode,
                                 targets="all" if split == "train" else "hard")
        out.write(f"== {split} ({mode} unions) ==\n{metrics.table()}\n")
        records.extend(json.dumps({"union": mode, "split": split, **prov, **json.loads(r)},
                                  sort_keys=True) for r in metrics.records())
        if settings.get("rank_dump"):
            path = settings["rank_dump"] if len(modes) == 1 else f"{settings['rank_dump']}.{mode}"
            write_rank_dump(metrics, path, header="\t".join(
                [f"{k}={v}" for k, v in prov.items()] + [f"split={split}", f"union={mode}"]))
    if settings.get("records"):
        _write_lines(settings["records"], records)
    return 0


def cmd_correlate(settings, out):
    ds = _load_dataset(settings)
    model, header = _load_model(settings)
    prov = _provenance(header, ds)
    report = uncertainty_correlation(ds.split(settings["split"]), model)
    out.write(report.table() + "\n")
    if settings.get("records"):
        _write_lines(settings["records"], [json.dumps({**prov, **json.loads(r)}, sort_keys=True)
                                           for r in report.records()])
    return 0


def cmd_classify_empty(settings, out):
    data = _load_graph(settings)
    model, header = _load_model(settings)
    g = data.splits.g_test
    names = settings.get("structures")
    structures = names.split(",") if names else list(STRUCTURES)
    unknown = [s for s in structures if s not in STRUCTURES]
    if unknown:
        raise UsageError(f"unknown structures: {', '.join(unknown)}")
    count = _int(settings, "count")
    seed = _int(settings, "seed")
    pos, neg = {}, {}
    for i, s in enumerate(structures):
        rng = np.random.default_rng([seed, i])
        pos[s] = sample_nonempty_queries(s, g, count, rng, min_answers=_int(settings, "min_answers"))
        neg[s] = sample_empty_queries(s, g, count, rng)
        if not pos[s] or not neg[s]:
            logger.warning("%s: could not sample both pools; skipped", s)
            pos.pop(s)
            neg.pop(s)
    if not pos:
        raise DataError("no structure yielded both empty and answerable queries")
    auc = empty_answer_auc(pos, neg, model)
    for k, v in auc.items():
        n = f"{len(pos[k])}/{len(neg[k])}" if k in pos else ""
        out.write(f"{k:<8}{v:8.3f}  {n}\n")
    if settings.get("records"):
        prov = {**_provenance(header), "sample_seed": seed}
        _write_lines(settings["records"], [json.dumps({"structure": k, "auc": v, **prov}, sort_keys=True)
                                           for k, v in auc.items()])
    return 0


def cmd_answer(settings, out):
    model, _ = _load_model(settings)
    q = parse_query(settings["query"], model.num_entities, model.num_relations)
    mode = settings.get("union") or model.config.union_mode
    embs = model.embed_queries([q], mode)[0]
    dist = model.all_distances(embs).min(axis=0)
    k = max(1, min(_int(settings, "top"), model.num_entities))
    order = np.argsort(dist, kind="stable")[:k]
    n = model.dim
    single = model.embed_queries([to_dm(q)], "dm")[0][0]
    ent = special.entropy(single[:n], single[n:])
    out.write(f"query: {settings['query']}\n")
    out.write("entropy per dimension: " + " ".join(f"{h:.4f}" for h in ent) + "\n")
    out.write(f"entropy total: {float(np.sum(ent)):.6f}\n")
    out.write("rank\tentity\tdistance\n")
    for rank, v in enumerate(order, 1):
        out.write(f"{rank}\t{int(v)}\t{dist[v]:.6f}\n")
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
    "correlate": cmd_correlate, "classify-empty": cmd_classify_empty, "answer": cmd_answer,
}


def _setup_logging():
    level = os.environ.get("BETAE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve(args)
        with threadpool_limits(limits=max(1, _int(settings, "threads"))):
            return COMMANDS[args.command](settings, out)
    except UsageError as exc:
        print(f"betae: error: {exc}", file=sys.stderr)
        return 1
    except QuerySyntaxError as exc:
        print(f"betae: syntax error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, StructureError, FileNotFoundError) as exc:
        print(f"betae: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"betae: numerical abort: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"betae: data error: {exc}", file=sys.stderr)
        return 2


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
