"""Filtered ranking metrics, uncertainty correlations and empty-answer ROC-AUC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .model import BetaModel
from .query import EPFO_STRUCTURES, NEGATION_STRUCTURES, STRUCTURES, Query, contains_union
from .sampler import QueryInstance

DEFAULT_KS = (1, 3, 10)


def rank_answer(v: int, distances: np.ndarray, filter_set) -> float:
    """Filtered rank of answer ``v`` given distances to every entity.

    Only entities outside ``filter_set`` compete; ties with them count half
    (mean of the optimistic and pessimistic rank).
    """
    if v not in filter_set:
        raise ValueError(f"entity {v} is not in the filter set")
    distances = np.asarray(distances)
    mask = np.ones(distances.shape[0], dtype=bool)
    mask[list(filter_set)] = False
    others = distances[mask]
    d = distances[v]
    better = int(np.count_nonzero(others < d))
    ties = int(np.count_nonzero(others == d))
    return 1.0 + better + 0.5 * ties


def filtered_ranks(distances: np.ndarray, targets: Sequence[int], filter_set) -> np.ndarray:
    """Vectorised :func:`rank_answer` for several targets of one query."""
    mask = np.ones(distances.shape[0], dtype=bool)
    mask[list(filter_set)] = False
    others = np.sort(distances[mask])
    d = distances[np.asarray(targets, dtype=np.int64)]
    lo = np.searchsorted(others, d, side="left")
    hi = np.searchsorted(others, d, side="right")
    return 1.0 + lo + 0.5 * (hi - lo)


@dataclass
class RankingMetrics:
    per_structure: Dict[str, Dict[str, float]]
    ks: Tuple[int, ...]
    dump: List[Tuple[str, int, float]] = field(default_factory=list, repr=False)

    def average(self, structures: Iterable[str]) -> Optional[Dict[str, float]]:
        present = [s for s in structures if s in self.per_structure]
        if not present:
            return None
        keys = ["mrr"] + [f"hits@{k}" for k in self.ks]
        return {k: float(np.mean([self.per_structure[s][k] for s in present])) for k in keys}

    def table(self) -> str:
        cols = [s for s in STRUCTURES if s in self.per_structure]
        keys = ["mrr"] + [f"hits@{k}" for k in self.ks]
        lines = [f"{'metric':<8}" + "".join(f"{c:>8}" for c in cols) + f"{'avg_epfo':>10}{'avg_neg':>9}"]
        avg_e = self.average(EPFO_STRUCTURES)
        avg_n = self.average(NEGATION_STRUCTURES)
        for k in keys:
            row = f"{k:<8}" + "".join(f"{100 * self.per_structure[c][k]:>8.1f}" for c in cols)
            row += f"{100 * avg_e[k]:>10.1f}" if avg_e else f"{'-':>10}"
            row += f"{100 * avg_n[k]:>9.1f}" if avg_n else f"{'-':>9}"
            lines.append(row)
        lines.append(f"{'queries':<8}" + "".join(f"{int(self.per_structure[c]['queries']):>8}" for c in cols))
        return "\n".join(lines)

    def records(self) -> List[str]:
        out = []
        for s in STRUCTURES:
            if s in self.per_structure:
                out.append(json.dumps({"structure": s, **self.per_structure[s]}, sort_keys=True))
        return out


def metrics_from_ranks(dump: Sequence[Tuple[str, int, float]], structure_of_query: Dict[str, str],
                       ks: Sequence[int] = DEFAULT_KS) -> Dict[str, Dict[str, float]]:
    """Per-structure metrics from ``(query_id, answer_id, rank)`` rows.

    Reciprocal ranks and hits are averaged over a query's answers first and
    then over the queries of a structure.
    """
    per_query: Dict[str, List[float]] = {}
    for qid, _, r in dump:
        per_query.setdefault(qid, []).append(r)
    grouped: Dict[str, List[Tuple[float, ...]]] = {}
    pairs: Dict[str, int] = {}
    for qid, ranks in per_query.items():
        r = np.asarray(ranks)
        row = (float(np.mean(1.0 / r)),) + tuple(float(np.mean(r <= k)) for k in ks)
        s = structure_of_query[qid]
        grouped.setdefault(s, []).append(row)
        pairs[s] = pairs.get(s, 0) + len(ranks)
    out = {}
    for s, rows in grouped.items():
        arr = np.asarray(rows)
        m = arr.mean(axis=0)
        entry = {"mrr": float(m[0])}
        entry.update({f"hits@{k}": float(m[i + 1]) for i, k in enumerate(ks)})
        entry["queries"] = len(rows)
        entry["pairs"] = pairs[s]
        out[s] = entry
    return out


def query_distances(model: BetaModel, queries: Sequence[Query], union_mode: Optional[str] = None,
                    chunk: int = 256) -> np.ndarray:
    """(len(queries), |V|) distances; union queries in DNF mode take the min over disjuncts."""
    out = np.empty((len(queries), model.num_entities))
    for start in range(0, len(queries), chunk):
        part = queries[start:start + chunk]
        embs = model.embed_queries(part, union_mode)
        flat = np.concatenate(embs, axis=0)
        d = model.all_distances(flat)
        row = 0
        for i, e in enumerate(embs):
            out[start + i] = d[row:row + len(e)].min(axis=0)
            row += len(e)
    return out


def evaluate_split(queries_by_structure: Dict[str, List[QueryInstance]], model: BetaModel,
                   ks: Sequence[int] = DEFAULT_KS, union_mode: Optional[str] = None,
                   targets: str = "hard") -> RankingMetrics:
    """Rank every target answer against non-answers, per structure.

    ``targets="hard"`` ranks only non-trivial answers (the evaluation
    protocol); ``targets="all"`` ranks every stored answer (used to check
    memorisation on training queries).
    """
    dump: List[Tuple[str, int, float]] = []
    owner: Dict[str, str] = {}
    for s in STRUCTURES:
        insts = queries_by_structure.get(s, [])
        if not insts:
            continue
        dist = query_distances(model, [i.query for i in insts], union_mode)
        for qi, (inst, d) in enumerate(zip(insts, dist)):
            goal = sorted(inst.hard if targets == "hard" else inst.answers)
            if not goal:
                continue
            qid = f"{s}:{qi}"
            owner[qid] = s
            for v, r in zip(goal, filtered_ranks(d, goal, inst.answers)):
                dump.append((qid, int(v), float(r)))
    return RankingMetrics(metrics_from_ranks(dump, owner, ks), tuple(ks), dump)


def write_rank_dump(metrics: RankingMetrics, path, header: Optional[str] = None):
    """``query_id<TAB>answer_id<TAB>rank`` rows, after an optional ``# header`` line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            f.write(f"# {header}\n")
        for qid, v, r in metrics.dump:
            f.write(f"{qid}\t{v}\t{r!r}\n")


def read_rank_dump(path) -> List[Tuple[str, int, float]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#"):
                continue
            qid, v, r = line.rstrip("\n").split("\t")
            rows.append((qid, int(v), float(r)))
    return rows


# ---------------------------------------------------------------------------
# uncertainty

def query_entropies(model: BetaModel, queries: Sequence[Query]) -> np.ndarray:
    """Differential entropy of each query embedding, summed over dimensions.

    Union queries are embedded with the De Morgan rewrite so that every query
    has a single embedding.
    """
    from . import special

    out = np.empty(len(queries))
    mode_dm = [contains_union(q) for q in queries]
    n = model.dim
    for want_dm in (False, True):
        idx = [i for i, m in enumerate(mode_dm) if m == want_dm]
        if not idx:
            continue
        embs = model.embed_queries([queries[i] for i in idx], "dm" if want_dm else "dnf")
        for i, e in zip(idx, embs):
            out[i] = float(np.sum(special.entropy(e[0, :n], e[0, n:])))
    return out


@dataclass
class UncertaintyReport:
    per_structure: Dict[str, Dict[str, Optional[float]]]

    def table(self) -> str:
        cols = [s for s in STRUCTURES if s in self.per_structure]
        lines = [f"{'metric':<6}" + "".join(f"{c:>8}" for c in cols)]
        for key in ("srcc", "pcc"):
            cells = []
            for c in cols:
                v = self.per_structure[c][key]
                cells.append(f"{'-':>8}" if v is None else f"{v:>8.3f}")
            lines.append(f"{key:<6}" + "".join(cells))
        return "\n".join(lines)

    def records(self) -> List[str]:
        return [json.dumps({"structure": s, **v}, sort_keys=True)
                for s, v in self.per_structure.items()]


def _correlation(fn, x, y) -> Optional[float]:
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    value = float(fn(x, y)[0])
    return None if math.isnan(value) else value


def uncertainty_correlation(queries_by_structure: Dict[str, List[QueryInstance]],
                            model: BetaModel) -> UncertaintyReport:
    """Spearman and Pearson correlation between query entropy and answer-set size."""
    out = {}
    for s in STRUCTURES:
        insts = queries_by_structure.get(s, [])
        if not insts:
            continue
        h = query_entropies(model, [i.query for i in insts])
        size = np.array([len(i.answers) for i in insts], dtype=np.float64)
        out[s] = {
            "srcc": _correlation(stats.spearmanr, h, size),
            "pcc": _correlation(stats.pearsonr, h, size),
            "queries": len(insts),
        }
    return UncertaintyReport(out)


# ---------------------------------------------------------------------------
# empty-answer classification

def auc_rank_statistic(pos_scores, neg_scores) -> float:
    """ROC-AUC as the Mann-Whitney statistic P(pos > neg) + 0.5 P(pos == neg)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both pools must be non-empty")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc_trapezoid(pos_scores, neg_scores) -> float:
    """ROC-AUC by trapezoidal integration of the empirical ROC curve."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both pools must be non-empty")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0] + [float(np.mean(pos >= t)) for t in thresholds]
    fpr = [0.0] + [float(np.mean(neg >= t)) for t in thresholds]
    return float(np.trapezoid(tpr, fpr))


def empty_answer_auc(nonempty_queries: Dict[str, List[Query]], empty_queries: Dict[str, List[Query]],
                     model: BetaModel) -> Dict[str, float]:
    """Per-structure and overall AUC of entropy for telling answerable queries from empty ones.

    Queries with answers are the positive class; higher entropy predicts an
    answer exists.
    """
    out = {}
    all_pos, all_neg = [], []
    for s in STRUCTURES:
        pos_q = nonempty_queries.get(s, [])
        neg_q = empty_queries.get(s, [])
        if not pos_q and not neg_q:
            continue
        if not pos_q or not neg_q:
            raise ValueError(f"structure {s}: both pools must be non-empty")
        hp = query_entropies(model, pos_q)
        hn = query_entropies(model, neg_q)
        out[s] = auc_rank_statistic(hp, hn)
        all_pos.append(hp)
        all_neg.append(hn)
    if not all_pos:
        raise ValueError("empty query pools")
    out["overall"] = auc_rank_statistic(np.concatenate(all_pos), np.concatenate(all_neg))
    return out
