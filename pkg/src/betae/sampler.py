"""Query dataset generation over cumulative train/valid/test graphs."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np

from .kg import GraphSplits, KnowledgeGraph
from .query import (NEGATION_STRUCTURES, STRUCTURES, TEMPLATES, TRAIN_STRUCTURES, Anchor,
                    Negation, Projection, Query, evaluate, fill, parse_query, print_query, walk)

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
DEFAULT_MAX_ANSWERS = 100
DEFAULT_RETRIES = 100


@dataclass(frozen=True)
class QueryInstance:
    query: Query
    structure: str
    easy: FrozenSet[int]
    hard: FrozenSet[int]

    @property
    def answers(self) -> FrozenSet[int]:
        return self.easy | self.hard


@dataclass
class QueryDataset:
    seed: int
    checksums: Dict[str, str]
    num_entities: int = 0
    num_relations: int = 0
    queries: Dict[str, Dict[str, List[QueryInstance]]] = field(default_factory=dict)

    def split(self, name: str) -> Dict[str, List[QueryInstance]]:
        return self.queries.get(name, {})

    def counts(self) -> Dict[str, Dict[str, int]]:
        return {s: {k: len(v) for k, v in by.items()} for s, by in self.queries.items()}


def default_counts(train_conjunctive: int, valid: int, test: int,
                   negation_ratio: float = 0.1) -> Dict[str, Dict[str, int]]:
    """Per-split, per-structure counts with negation structures scaled down for training."""
    n_neg = int(round(train_conjunctive * negation_ratio))
    train = {s: (n_neg if s in NEGATION_STRUCTURES else train_conjunctive) for s in TRAIN_STRUCTURES}
    return {
        "train": train,
        "valid": {s: valid for s in STRUCTURES},
        "test": {s: test for s in STRUCTURES},
    }


# ---------------------------------------------------------------------------
# instantiation

def instantiate(template: Query, g: KnowledgeGraph, rng: np.random.Generator,
                target: Optional[int] = None) -> Optional[Query]:
    """Fill a template top-down from a seed answer; ``None`` signals a dead end.

    Every projection picks a uniformly random incoming edge ``(r, u)`` of its
    current target and recurses with ``u`` as the new target. Branches of an
    intersection (or union) share the target. A negated branch is filled as
    if positive, so the seed itself is excluded; queries with negation are
    accepted only if they still have an answer on ``g``.
    """
    if g.num_entities == 0:
        return None
    if target is None:
        target = int(rng.integers(g.num_entities))

    def go(node, t):
        if isinstance(node, Anchor):
            return Anchor(t)
        if isinstance(node, Projection):
            preds = g.predecessors(t)
            if not preds:
                return None
            r, u = preds[int(rng.integers(len(preds)))]
            child = go(node.child, u)
            return None if child is None else Projection(r, child)
        if isinstance(node, Negation):
            child = go(node.child, t)
            return None if child is None else Negation(child)
        kids = []
        for c in node.children:
            k = go(c, t)
            if k is None:
                return None
            kids.append(k)
        if len(set(kids)) != len(kids):
            return None
        return type(node)(tuple(kids))

    q = go(template, target)
    if q is None:
        return None
    if any(isinstance(n, Negation) for n in walk(q)) and not evaluate(q, g):
        return None
    return q


def random_fill(template: Query, num_entities: int, num_relations: int,
                rng: np.random.Generator) -> Query:
    """Uniformly random anchors and relations (no graph guidance)."""
    values = []
    for n in walk(template):
        if isinstance(n, Anchor):
            values.append(int(rng.integers(num_entities)))
        elif isinstance(n, Projection):
            values.append(int(rng.integers(num_relations)))
    return fill(template, values)


def split_answers(q: Query, g_small: KnowledgeGraph, g_big: KnowledgeGraph):
    """(easy, hard): answers on the smaller graph, and those only on the larger one."""
    easy = evaluate(q, g_small)
    return easy, evaluate(q, g_big) - easy


# ---------------------------------------------------------------------------
# dataset generation

def _graphs_for(split: str, splits: GraphSplits) -> Tuple[KnowledgeGraph, KnowledgeGraph]:
    if split == "train":
        return splits.g_train, splits.g_train
    if split == "valid":
        return splits.g_train, splits.g_valid
    return splits.g_valid, splits.g_test


def _generate_one(split, structure, count, splits, seed, max_answers, retries, exclude):
    g_small, g_big = _graphs_for(split, splits)
    rng = np.random.default_rng([seed, SPLITS.index(split), STRUCTURES.index(structure)])
    template = TEMPLATES[structure]
    out: List[QueryInstance] = []
    if split != "train" and g_small.num_edges == g_big.num_edges:
        # no held-out edges: no query can have a non-trivial answer
        return out, count
    seen = set(exclude)
    failures = 0
    for _ in range(count):
        for _attempt in range(retries):
            q = instantiate(template, g_big, rng)
            if q is None:
                continue
            key = print_query(q)
            if key in seen:
                continue
            if split == "train":
                easy, hard = evaluate(q, g_small), frozenset()
                if not easy:
                    continue
            else:
                easy, hard = split_answers(q, g_small, g_big)
                if not hard or len(easy) + len(hard) > max_answers:
                    continue
            seen.add(key)
            out.append(QueryInstance(q, structure, easy, hard))
            break
        else:
            failures += 1
    return out, failures


def _exhaustive_1p(split, splits, max_answers) -> List[QueryInstance]:
    g_small, g_big = _graphs_for(split, splits)
    out = []
    for (h, r), tails in sorted(g_big.forward.items()):
        easy = frozenset(g_small.neighbors(h, r))
        hard = frozenset(tails) - easy
        if hard and len(tails) <= max_answers:
            out.append(QueryInstance(Projection(r, Anchor(h)), "1p", easy, hard))
    return out


def generate_dataset(splits: GraphSplits, counts: Dict[str, Dict[str, int]], seed: int = 0,
                     max_answers: int = DEFAULT_MAX_ANSWERS, retries: int = DEFAULT_RETRIES,
                     exhaustive_1p: bool = False, threads: int = 1) -> QueryDataset:
    """Generate queries for every (split, structure) in ``counts``.

    Each job draws from its own generator seeded by (seed, split, structure),
    so the output does not depend on ``threads``. Training queries keep all
    their answers on the training graph; validation/test queries must have a
    non-trivial answer and at most ``max_answers`` answers in total.
    """
    ds = QueryDataset(seed=seed, checksums={
        "g_train": splits.g_train.checksum(),
        "g_valid": splits.g_valid.checksum(),
        "g_test": splits.g_test.checksum(),
    }, num_entities=splits.g_train.num_entities, num_relations=splits.g_train.num_relations)
    jobs = []
    for split in SPLITS:
        for structure in STRUCTURES:
            n = counts.get(split, {}).get(structure, 0)
            if n > 0 or (exhaustive_1p and structure == "1p" and split != "train"
                         and split in counts):
                jobs.append((split, structure, n))

    def run(job):
        split, structure, n = job
        if exhaustive_1p and structure == "1p" and split != "train":
            return _exhaustive_1p(split, splits, max_answers), 0
        return _generate_one(split, structure, n, splits, seed, max_answers, retries, ())

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for (split, structure, n), (instances, failures) in zip(jobs, results):
        ds.queries.setdefault(split, {})[structure] = instances
        if failures:
            logger.warning("%s/%s: generated %d of %d queries (retry budget exhausted)",
                           split, structure, len(instances), n)
    return ds


def sample_empty_queries(structure: str, g: KnowledgeGraph, count: int,
                         rng: np.random.Generator, retries: int = DEFAULT_RETRIES) -> List[Query]:
    """Random instantiations with no answer on ``g`` (rejection sampling)."""
    out, seen = [], set()
    for _ in range(count * retries):
        if len(out) >= count:
            break
        q = random_fill(TEMPLATES[structure], g.num_entities, g.num_relations, rng)
        key = print_query(q)
        if key in seen or evaluate(q, g):
            continue
        seen.add(key)
        out.append(q)
    return out


def sample_nonempty_queries(structure: str, g: KnowledgeGraph, count: int,
                            rng: np.random.Generator, min_answers: int = 5,
                            retries: int = DEFAULT_RETRIES) -> List[Query]:
    """Graph-guided instantiations with more than ``min_answers`` answers."""
    out, seen = [], set()
    for _ in range(count * retries):
        if len(out) >= count:
            break
        q = instantiate(TEMPLATES[structure], g, rng)
        if q is None:
            continue
        key = print_query(q)
        if key in seen or len(evaluate(q, g)) <= min_answers:
            continue
        seen.add(key)
        out.append(q)
    return out


# ---------------------------------------------------------------------------
# file format

def _fmt_ids(s: Iterable[int]) -> str:
    return ",".join(str(v) for v in sorted(s))


def _parse_ids(text: str) -> FrozenSet[int]:
    return frozenset(int(v) for v in text.split(",")) if text else frozenset()


def write_dataset(ds: QueryDataset, out_dir) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    header = (f"# seed={ds.seed}\tnum_entities={ds.num_entities}\tnum_relations={ds.num_relations}\t"
              + "\t".join(f"{k}={v}" for k, v in sorted(ds.checksums.items())))
    paths = []
    for split in SPLITS:
        if split not in ds.queries:
            continue
        path = os.path.join(out_dir, f"{split}.tsv")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(header + "\n")
            for structure in STRUCTURES:
                for inst in ds.queries[split].get(structure, []):
                    f.write(f"{structure}\t{print_query(inst.query)}\t"
                            f"{_fmt_ids(inst.easy)}\t{_fmt_ids(inst.hard)}\n")
        paths.append(path)
    return paths


def read_dataset(in_dir) -> QueryDataset:
    ds = QueryDataset(seed=0, checksums={})
    for split in SPLITS:
        path = os.path.join(in_dir, f"{split}.tsv")
        if not os.path.exists(path):
            continue
        by: Dict[str, List[QueryInstance]] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if line.startswith("#"):
                    for kv in line[1:].strip().split("\t"):
                        k, _, v = kv.partition("=")
                        if k in ("seed", "num_entities", "num_relations"):
                            setattr(ds, k, int(v))
                        elif k:
                            ds.checksums[k] = v
                    continue
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
                structure, dsl, easy, hard = parts
                by.setdefault(structure, []).append(
                    QueryInstance(parse_query(dsl), structure, _parse_ids(easy), _parse_ids(hard)))
        ds.queries[split] = by
    return ds


def summary_table(ds: QueryDataset) -> str:
    """Counts and average answers per structure, one row per split."""
    cols = [s for s in STRUCTURES if any(s in ds.split(sp) for sp in SPLITS)]
    lines = ["split  " + " ".join(f"{c:>10}" for c in cols)]
    for split in SPLITS:
        by = ds.split(split)
        if not by:
            continue
        cells = []
        for c in cols:
            insts = by.get(c, [])
            if not insts:
                cells.append(f"{'-':>10}")
                continue
            avg = np.mean([len(i.answers) for i in insts])
            cells.append(f"{len(insts):>5}/{avg:4.1f}")
        lines.append(f"{split:<6} " + " ".join(cells))
    lines.append("(cells: count/avg answers)")
    return "\n".join(lines)


__all__ = [
    "QueryInstance", "QueryDataset", "default_counts", "instantiate", "random_fill",
    "split_answers", "generate_dataset", "sample_empty_queries", "sample_nonempty_queries",
    "write_dataset", "read_dataset", "summary_table", "SPLITS",
]
