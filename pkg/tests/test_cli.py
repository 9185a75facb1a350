import io
import json
import os

import numpy as np
import pytest

import betae.train as train_mod
from betae import autodiff as ad
from betae.cli import DESK_MODEL, DESK_TRAIN, _configs, main
from betae.evaluate import evaluate_split, metrics_from_ranks, read_rank_dump
from betae.kg import clustered_triples, holdout_split, load_graph_dir, random_triples, write_graph_dir
from betae.model import BetaModel
from betae.sampler import read_dataset

FAST = ["--dim", "4", "--hidden-dim", "8", "--batch", "16", "--neg-k", "8", "--gamma", "4", "--lr", "5e-3"]


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    triples = clustered_triples(40, 3, num_clusters=5, out_degree=2, seed=0)
    train, valid, test = holdout_split(triples, 0.2, seed=0)
    write_graph_dir(root / "graph", 40, 3, train, valid, test)
    assert run("generate", "--graph-dir", root / "graph", "--dataset-dir", root / "data",
               "--train-queries", 20, "--eval-queries", 8, "--seed", 3)[0] == 0
    ck = root / "model.npz"
    assert run("train", "--dataset-dir", root / "data", "--checkpoint", ck, "--steps", 30, *FAST)[0] == 0
    return root


class TestIngest:
    def test_counts(self, tmp_path):
        triples = random_triples(12, 2, 1, seed=0)
        write_graph_dir(tmp_path, 12, 2, triples[:20], triples[20:22], triples[22:])
        code, out = run("ingest", "--graph-dir", tmp_path)
        assert code == 0
        assert out.splitlines()[0] == "12 entities, 2 relations, 20/2/2 edges"
        assert os.path.exists(tmp_path / "manifest.sha256")
        g = load_graph_dir(tmp_path).splits.g_test
        assert f"checksum {g.checksum()}" in out

    def test_inverse(self, tmp_path):
        write_graph_dir(tmp_path, 3, 1, random_triples(3, 1, 1, seed=0))
        assert run("ingest", "--graph-dir", tmp_path, "--add-inverse")[1].startswith("3 entities, 2 relations")

    def test_empty_dir(self, tmp_path, capsys):
        code, _ = run("ingest", "--graph-dir", tmp_path)
        assert code == 2
        err = capsys.readouterr().err
        assert "missing files" in err and "entities.dict" in err and "test.txt" in err

    def test_format_error_has_line(self, tmp_path, capsys):
        write_graph_dir(tmp_path, 3, 1, [])
        (tmp_path / "train.txt").write_text("0\t0\t1\n0\t0\n")
        assert run("ingest", "--graph-dir", tmp_path)[0] == 2
        assert "train.txt:2:" in capsys.readouterr().err

    def test_usage_errors(self):
        assert run("ingest")[0] == 1
        assert run("bogus")[0] == 1
        assert run()[0] == 1


class TestGenerate:
    def test_outputs(self, workspace):
        data = workspace / "data"
        assert sorted(os.listdir(data)) == ["summary.txt", "test.tsv", "train.tsv", "valid.tsv"]
        assert open(data / "summary.txt").readline() == "# seed=3\n"
        assert open(data / "train.tsv").readline().startswith("# seed=3\tnum_entities=40\tnum_relations=3\t")

    def test_reproducible_by_seed(self, workspace, tmp_path):
        args = ["generate", "--graph-dir", workspace / "graph", "--train-queries", 20, "--eval-queries", 8]
        assert run(*args, "--dataset-dir", tmp_path / "a", "--seed", 3)[0] == 0
        assert run(*args, "--dataset-dir", tmp_path / "b", "--seed", 4)[0] == 0
        for name in ("train.tsv", "valid.tsv", "test.tsv", "summary.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (workspace / "data" / name).read_bytes()
        assert (tmp_path / "b" / "train.tsv").read_bytes() != (tmp_path / "a" / "train.tsv").read_bytes()

    def test_complete_graph_has_no_test_queries(self, tmp_path):
        write_graph_dir(tmp_path / "g", 20, 2, random_triples(20, 2, 2, seed=1))
        code, out = run("generate", "--graph-dir", tmp_path / "g", "--dataset-dir", tmp_path / "d",
                        "--train-queries", 5, "--eval-queries", 5)
        assert code == 0
        lines = (tmp_path / "d" / "test.tsv").read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("#")
        assert [ln for ln in out.splitlines() if ln.startswith("test")][0].split()[1:] == ["-"] * 14


class TestTrain:
    def test_checkpoint_and_log(self, workspace):
        log = (workspace / "model.npz.log").read_text().splitlines()
        assert log[0] == "# seed=0\tdataset_seed=3"
        assert len(log) == 31
        step, structure, loss, elapsed = log[-1].split("\t")
        assert step == "30" and float(loss) >= 0
        model, header, _ = BetaModel.load(workspace / "model.npz")
        assert model.dim == 4 and header["meta"]["seed"] == 0

    def test_resume_matches_uninterrupted(self, workspace, tmp_path):
        data = workspace / "data"
        run("train", "--dataset-dir", data, "--checkpoint", tmp_path / "a.npz", "--steps", 12, *FAST)
        run("train", "--dataset-dir", data, "--checkpoint", tmp_path / "b.npz", "--steps", 8, *FAST)
        run("train", "--dataset-dir", data, "--checkpoint", tmp_path / "b.npz", "--steps", 4, "--resume")
        a, b = np.load(tmp_path / "a.npz"), np.load(tmp_path / "b.npz")
        assert a.files == b.files
        for key in a.files:
            if key != "header":
                np.testing.assert_array_equal(a[key], b[key])
        ha, hb = (json.loads(str(x["header"])) for x in (a, b))
        # the per-invocation step budget is the only header field allowed to differ
        assert (ha["meta"]["trainer"]["train_config"].pop("steps"),
                hb["meta"]["trainer"]["train_config"].pop("steps")) == (12, 8)
        assert ha == hb
        a_log = [ln.split("\t")[:3] for ln in (tmp_path / "a.npz.log").read_text().splitlines()]
        b_log = [ln.split("\t")[:3] for ln in (tmp_path / "b.npz.log").read_text().splitlines()]
        assert a_log == b_log

    def test_config_file_below_flags(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps=5\ndim=4\nhidden_dim=8\nbatch=16\nneg_k=8\n")
        data = workspace / "data"
        assert run("train", "--config", cfg, "--dataset-dir", data, "--checkpoint", tmp_path / "c.npz")[0] == 0
        assert len((tmp_path / "c.npz.log").read_text().splitlines()) == 1 + 5
        assert run("train", "--config", cfg, "--dataset-dir", data, "--checkpoint", tmp_path / "d.npz",
                   "--steps", 7)[0] == 0
        assert len((tmp_path / "d.npz.log").read_text().splitlines()) == 1 + 7

    def test_bad_config(self, workspace, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("steps\n")
        assert run("train", "--config", cfg, "--dataset-dir", workspace / "data",
                   "--checkpoint", tmp_path / "x.npz")[0] == 1
        cfg.write_text("lr=-1\n")
        assert run("train", "--config", cfg, "--dataset-dir", workspace / "data",
                   "--checkpoint", tmp_path / "x.npz")[0] == 1
        assert run("train", "--config", tmp_path / "absent.cfg", "--dataset-dir", workspace / "data",
                   "--checkpoint", tmp_path / "x.npz")[0] == 1

    def test_missing_inputs(self, tmp_path):
        assert run("train", "--checkpoint", tmp_path / "x.npz")[0] == 1
        assert run("train", "--dataset-dir", tmp_path / "none", "--checkpoint", tmp_path / "x.npz")[0] == 2
        assert run("train", "--dataset-dir", tmp_path, "--checkpoint", tmp_path / "x.npz", "--resume")[0] == 2

    def test_numerical_abort(self, workspace, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(train_mod, "batch_loss_t", lambda *a: ad.Tensor(np.array(np.nan)))
        code, _ = run("train", "--dataset-dir", workspace / "data", "--checkpoint", tmp_path / "n.npz",
                      "--steps", 3, *FAST)
        assert code == 3
        assert "max |param| per tensor" in capsys.readouterr().err

    def test_profiles(self):
        train, model = _configs({})
        assert (train.gamma, train.neg_k, train.batch_size, train.lr, train.steps) == tuple(
            DESK_TRAIN[k] for k in ("gamma", "neg_k", "batch_size", "lr", "steps"))
        assert model.dim == DESK_MODEL["dim"] == 16
        train, model = _configs({"full_scale": True})
        assert (model.dim, train.lr, train.batch_size, train.neg_k, train.gamma) == (400, 5e-4, 512, 128, 60.0)
        train, model = _configs({"full_scale": True, "lr": "1e-3"})
        assert train.lr == 1e-3


class TestEval:
    def test_report_and_dump(self, workspace, tmp_path):
        code, out = run("eval", "--dataset-dir", workspace / "data", "--checkpoint", workspace / "model.npz",
                        "--rank-dump", tmp_path / "ranks", "--records", tmp_path / "rec.jsonl")
        assert code == 0
        assert "== test (dnf unions) ==" in out and "== test (dm unions) ==" in out
        recs = [json.loads(x) for x in (tmp_path / "rec.jsonl").read_text().splitlines()]
        assert {r["union"] for r in recs} == {"dnf", "dm"}
        assert all(r["seed"] == 0 and r["dataset_seed"] == 3 for r in recs)
        for mode in ("dnf", "dm"):
            path = tmp_path / f"ranks.{mode}"
            assert path.read_text().startswith("# seed=0\tdataset_seed=3\tsplit=test\tunion=" + mode)
            rows = read_rank_dump(path)
            metrics = metrics_from_ranks(rows, {q: q.split(":")[0] for q, _, _ in rows})
            for r in recs:
                if r["union"] == mode:
                    assert metrics[r["structure"]]["mrr"] == r["mrr"]
                    assert metrics[r["structure"]]["hits@10"] == r["hits@10"]

    def test_union_modes_agree_off_unions(self, workspace):
        _, dnf = run("eval", "--dataset-dir", workspace / "data", "--checkpoint", workspace / "model.npz",
                     "--union", "dnf")
        _, dm = run("eval", "--dataset-dir", workspace / "data", "--checkpoint", workspace / "model.npz",
                    "--union", "dm")
        row = lambda text: text.splitlines()[2].split()[1:4]  # noqa: E731  mrr of 1p, 2p, 3p
        assert row(dnf) == row(dm)

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert run("eval", "--dataset-dir", workspace / "data", "--checkpoint", tmp_path / "no.npz")[0] == 2

    def test_correlate(self, workspace, tmp_path):
        code, out = run("correlate", "--dataset-dir", workspace / "data", "--checkpoint",
                        workspace / "model.npz", "--records", tmp_path / "c.jsonl")
        assert code == 0 and out.splitlines()[1].startswith("srcc")
        assert json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])["seed"] == 0

    def test_classify_empty(self, workspace, tmp_path):
        code, out = run("classify-empty", "--graph-dir", workspace / "graph", "--checkpoint",
                        workspace / "model.npz", "--structures", "1p,2i", "--count", 10,
                        "--min-answers", 1, "--records", tmp_path / "auc.jsonl")
        assert code == 0
        names = [ln.split()[0] for ln in out.splitlines()]
        assert names[-1] == "overall"
        for rec in map(json.loads, (tmp_path / "auc.jsonl").read_text().splitlines()):
            assert 0.0 <= rec["auc"] <= 1.0
        assert run("classify-empty", "--graph-dir", workspace / "graph", "--checkpoint",
                   workspace / "model.npz", "--structures", "9z")[0] == 1


class TestAnswer:
    def test_anchor_ranks_itself_first(self, workspace):
        code, out = run("answer", "(e 7)", "--checkpoint", workspace / "model.npz", "-k", 3)
        assert code == 0
        lines = out.splitlines()
        assert lines[1].startswith("entropy per dimension:") and len(lines[1].split()) == 3 + 4
        table = lines[lines.index("rank\tentity\tdistance") + 1:]
        assert len(table) == 3
        rank, entity, dist = table[0].split("\t")
        assert (rank, entity) == ("1", "7") and float(dist) == 0.0
        assert [float(x.split("\t")[2]) for x in table] == sorted(float(x.split("\t")[2]) for x in table)

    def test_deterministic(self, workspace):
        a = run("answer", "(or (p 0 (e 1)) (p 1 (e 2)))", "--checkpoint", workspace / "model.npz")
        b = run("answer", "(or (p 0 (e 1)) (p 1 (e 2)))", "--checkpoint", workspace / "model.npz")
        assert a == b and a[0] == 0

    @pytest.mark.parametrize("query", ["(p", "(e 40)", "(p 3 (e 1))", "(q 1)"])
    def test_bad_queries(self, workspace, query, capsys):
        assert run("answer", query, "--checkpoint", workspace / "model.npz")[0] == 2
        err = capsys.readouterr().err
        assert "syntax error" in err
        if query == "(p":
            assert "position 2" in err


class TestDeterminism:
    def test_single_thread_reruns_are_byte_identical(self, workspace, tmp_path):
        outs = []
        for tag in ("a", "b"):
            d, ck = tmp_path / f"d{tag}", tmp_path / f"{tag}.npz"
            assert run("generate", "--graph-dir", workspace / "graph", "--dataset-dir", d, "--seed", 5,
                       "--train-queries", 15, "--eval-queries", 5, "--threads", 1)[0] == 0
            assert run("train", "--dataset-dir", d, "--checkpoint", ck, "--steps", 100, "--threads", 1,
                       *FAST)[0] == 0
            code, report = run("eval", "--dataset-dir", d, "--checkpoint", ck, "--threads", 1,
                               "--rank-dump", tmp_path / f"{tag}.ranks", "--records", tmp_path / f"{tag}.jsonl")
            assert code == 0
            files = [d / n for n in sorted(os.listdir(d))] + [ck] + sorted(tmp_path.glob(f"{tag}.ranks.*")) + \
                [tmp_path / f"{tag}.jsonl"]
            outs.append(([f.read_bytes() for f in files], report))
        assert outs[0] == outs[1]


@pytest.mark.slow
def test_desk_profile_trains_toy_graph(tmp_path):
    """Default desk settings for 2,000 steps more than halve the loss, and the
    trained model ranks one-hop training answers well above chance."""
    triples = random_triples(100, 4, 2, seed=0)
    write_graph_dir(tmp_path / "g", 100, 4, triples)
    assert run("generate", "--graph-dir", tmp_path / "g", "--dataset-dir", tmp_path / "d")[0] == 0
    code, out = run("train", "--dataset-dir", tmp_path / "d", "--checkpoint", tmp_path / "m.npz")
    assert code == 0
    losses = [float(ln.split("\t")[2]) for ln in (tmp_path / "m.npz.log").read_text().splitlines()[1:]]
    assert len(losses) == 2000
    assert np.mean(losses[-10:]) <= 0.5 * np.mean(losses[:10])
    # 1p gets about a tenth of the mixed-structure steps, so expect better-than-chance, not memorisation
    model, _, _ = BetaModel.load(tmp_path / "m.npz")
    one_hop = read_dataset(tmp_path / "d").split("train")["1p"]
    mrr = evaluate_split({"1p": one_hop}, model, targets="all").per_structure["1p"]["mrr"]
    chance = np.mean([np.mean(1 / np.arange(1, 100 - len(i.answers) + 2)) for i in one_hop])
    assert mrr >= 2 * chance
