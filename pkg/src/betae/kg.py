"""Knowledge-graph storage: vocabularies, triple files and relation-indexed adjacency."""

from __future__ import annotations

import bisect
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

ENTITY_FILE = "entities.dict"
RELATION_FILE = "relations.dict"
SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")


class FormatError(ValueError):
    """Malformed or inconsistent input file."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def load_vocab(entity_file, relation_file) -> Tuple[Dict[int, str], Dict[int, str]]:
    """Read the two ``id<TAB>name`` vocabulary files.

    Returns ``(entities, relations)`` as id -> name maps. Ids must be dense
    from zero and both ids and names must be unique.
    """
    return _read_dict(entity_file), _read_dict(relation_file)


def _read_dict(path) -> Dict[int, str]:
    id_to_name: Dict[int, str] = {}
    seen_names = set()
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(path, lineno, "expected 'id<TAB>name'")
            try:
                idx = int(parts[0])
            except ValueError:
                raise FormatError(path, lineno, f"non-integer id {parts[0]!r}") from None
            name = parts[1]
            if idx in id_to_name:
                raise FormatError(path, lineno, f"duplicate id {idx}")
            if name in seen_names:
                raise FormatError(path, lineno, f"duplicate name {name!r}")
            id_to_name[idx] = name
            seen_names.add(name)
    if sorted(id_to_name) != list(range(len(id_to_name))):
        raise FormatError(path, 0, "ids are not contiguous from 0")
    return id_to_name


def load_triples(path, num_entities: int, num_relations: int) -> List[Triple]:
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(path, lineno, "expected 'head<TAB>relation<TAB>tail'")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError:
                raise FormatError(path, lineno, "non-integer id") from None
            if not (0 <= h < num_entities and 0 <= t < num_entities):
                raise FormatError(path, lineno, f"entity id out of range [0, {num_entities})")
            if not 0 <= r < num_relations:
                raise FormatError(path, lineno, f"relation id out of range [0, {num_relations})")
            triples.append(Triple(h, r, t))
    return triples


def add_inverse(triples: Iterable[Triple], num_relations: int) -> List[Triple]:
    """Append ``(t, r + |R|, h)`` for every triple; callers double ``num_relations``."""
    triples = list(triples)
    return triples + [Triple(t, r + num_relations, h) for h, r, t in triples]


@dataclass(frozen=True)
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    # (v, r) -> sorted tuple of tails
    forward: Dict[Tuple[int, int], Tuple[int, ...]] = field(repr=False)
    # v -> sorted tuple of (r, head) pairs with r(head, v)
    backward: Dict[int, Tuple[Tuple[int, int], ...]] = field(repr=False)
    num_edges: int = 0

    def neighbors(self, v: int, r: int) -> Tuple[int, ...]:
        return self.forward.get((v, r), ())

    def predecessors(self, v: int) -> Tuple[Tuple[int, int], ...]:
        return self.backward.get(v, ())

    def has_edge(self, h: int, r: int, t: int) -> bool:
        tails = self.forward.get((h, r), ())
        i = bisect.bisect_left(tails, t)
        return i < len(tails) and tails[i] == t

    def edges(self) -> List[Triple]:
        return [Triple(h, r, t) for (h, r), tails in sorted(self.forward.items()) for t in tails]

    def edge_set(self) -> set:
        return set(self.edges())

    def checksum(self) -> str:
        """sha256 over the sorted edge list plus vocabulary sizes."""
        digest = hashlib.sha256(f"{self.num_entities},{self.num_relations};".encode())
        arr = np.asarray(self.edges(), dtype=np.int64).reshape(-1, 3)
        digest.update(arr.tobytes())
        return digest.hexdigest()[:16]


def build_graph(triples: Iterable[Triple], num_entities: int, num_relations: int) -> KnowledgeGraph:
    fwd: Dict[Tuple[int, int], set] = {}
    bwd: Dict[int, set] = {}
    for h, r, t in triples:
        fwd.setdefault((h, r), set()).add(t)
        bwd.setdefault(t, set()).add((r, h))
    num_edges = sum(len(s) for s in fwd.values())
    return KnowledgeGraph(
        num_entities=num_entities,
        num_relations=num_relations,
        forward={k: tuple(sorted(v)) for k, v in fwd.items()},
        backward={k: tuple(sorted(v)) for k, v in bwd.items()},
        num_edges=num_edges,
    )


@dataclass(frozen=True)
class GraphSplits:
    g_train: KnowledgeGraph
    g_valid: KnowledgeGraph
    g_test: KnowledgeGraph

    def __iter__(self):
        return iter((self.g_train, self.g_valid, self.g_test))


def build_splits(train, valid, test, num_entities: int, num_relations: int) -> GraphSplits:
    """Cumulative graphs: train, train+valid, train+valid+test."""
    train, valid, test = list(train), list(valid), list(test)
    seen = set(train)
    overlap = sum(1 for t in valid if t in seen)
    seen.update(valid)
    overlap += sum(1 for t in test if t in seen)
    if overlap:
        logger.warning("%d triples appear in more than one split; deduplicated", overlap)
    return GraphSplits(
        build_graph(train, num_entities, num_relations),
        build_graph(train + valid, num_entities, num_relations),
        build_graph(train + valid + test, num_entities, num_relations),
    )


@dataclass
class GraphData:
    entities: Dict[int, str]
    relations: Dict[int, str]
    triples: Dict[str, List[Triple]]
    splits: GraphSplits

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)


def missing_files(graph_dir) -> List[str]:
    names = (ENTITY_FILE, RELATION_FILE) + SPLIT_FILES
    return [n for n in names if not os.path.isfile(os.path.join(graph_dir, n))]


def load_graph_dir(graph_dir, add_inverse_relations: bool = False) -> GraphData:
    missing = missing_files(graph_dir)
    if missing:
        raise FileNotFoundError(f"{graph_dir}: missing {', '.join(missing)}")
    entities, relations = load_vocab(os.path.join(graph_dir, ENTITY_FILE),
                                     os.path.join(graph_dir, RELATION_FILE))
    num_e, num_r = len(entities), len(relations)
    triples = {}
    for fname in SPLIT_FILES:
        split = fname.split(".")[0]
        triples[split] = load_triples(os.path.join(graph_dir, fname), num_e, num_r)
    if add_inverse_relations:
        relations = dict(relations)
        for r in range(num_r):
            relations[r + num_r] = relations[r] + "_inv"
        triples = {k: add_inverse(v, num_r) for k, v in triples.items()}
        num_r *= 2
    splits = build_splits(triples["train"], triples["valid"], triples["test"], num_e, num_r)
    return GraphData(entities, relations, triples, splits)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(graph_dir, out_path=None) -> str:
    out_path = out_path or os.path.join(graph_dir, "manifest.sha256")
    names = (ENTITY_FILE, RELATION_FILE) + SPLIT_FILES
    with open(out_path, "w", encoding="utf-8") as f:
        for n in names:
            f.write(f"{file_sha256(os.path.join(graph_dir, n))}  {n}\n")
    return out_path


def write_graph_dir(graph_dir, num_entities: int, num_relations: int, train, valid=(), test=()):
    """Write a graph directory in the on-disk format (used by fixtures and tools)."""
    os.makedirs(graph_dir, exist_ok=True)
    with open(os.path.join(graph_dir, ENTITY_FILE), "w") as f:
        for i in range(num_entities):
            f.write(f"{i}\te{i}\n")
    with open(os.path.join(graph_dir, RELATION_FILE), "w") as f:
        for i in range(num_relations):
            f.write(f"{i}\tr{i}\n")
    for fname, rows in zip(SPLIT_FILES, (train, valid, test)):
        with open(os.path.join(graph_dir, fname), "w") as f:
            for h, r, t in rows:
                f.write(f"{h}\t{r}\t{t}\n")


def random_triples(num_entities: int, num_relations: int, out_degree: int = 2,
                   seed: int = 0) -> List[Triple]:
    """Synthetic graph: each (head, relation) gets ``out_degree`` distinct random tails."""
    rng = np.random.default_rng(seed)
    triples = []
    for h in range(num_entities):
        for r in range(num_relations):
            tails = rng.choice(num_entities, size=min(out_degree, num_entities), replace=False)
            triples.extend(Triple(h, r, int(t)) for t in sorted(tails))
    return triples


def clustered_triples(num_entities: int, num_relations: int, num_clusters: int = 10,
                      out_degree: int = 3, seed: int = 0) -> List[Triple]:
    """Synthetic graph with learnable regularities.

    Entity ``v`` belongs to cluster ``v % num_clusters``; relation ``r`` sends
    cluster ``c`` to cluster ``(c * (r + 1) + r + 1) % num_clusters``, with
    ``out_degree`` random tails drawn from the target cluster. Held-out edges
    of such a graph are predictable from the rest, unlike in
    :func:`random_triples`.
    """
    rng = np.random.default_rng(seed)
    members = [np.arange(c, num_entities, num_clusters) for c in range(num_clusters)]
    triples = []
    for h in range(num_entities):
        for r in range(num_relations):
            target = members[(h % num_clusters * (r + 1) + r + 1) % num_clusters]
            tails = rng.choice(target, size=min(out_degree, len(target)), replace=False)
            triples.extend(Triple(h, r, int(t)) for t in sorted(tails))
    return triples


def holdout_split(triples: Sequence[Triple], fraction: float = 0.1, seed: int = 0):
    """Shuffle and split triples into (train, valid, test), each held-out part ``fraction / 2``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(triples))
    n_out = int(round(len(triples) * fraction / 2))
    parts = (order[2 * n_out:], order[:n_out], order[n_out:2 * n_out])
    return tuple(sorted(triples[i] for i in idx) for idx in parts)
