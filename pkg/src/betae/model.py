"""Beta embeddings and the probabilistic logical operators.

Entities and queries are vectors of ``n`` independent Beta distributions.
Internally an embedding is a float64 array of shape ``(..., 2n)`` holding all
alphas followed by all betas. Operators:

* projection: a three-layer perceptron applied to the input parameters
  (concatenated with a learned relation vector, or one network per relation);
* intersection: attention-weighted interpolation of the input parameters;
* negation: elementwise reciprocal.

Query distances are sums of per-dimension KL(entity || query).
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import autodiff as ad
from . import special
from .query import (Anchor, Intersection, Negation, Projection, Query, ids, shape_key, simplify,
                    to_dm, to_dnf)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int = 16
    hidden_dim: int = 128
    num_layers: int = 3
    attention: str = "global"  # or "per-dim"
    per_relation_mlp: bool = False
    union_mode: str = "dnf"  # or "dm"
    min_param: float = special.ALPHA_MIN
    max_param: float = special.ALPHA_MAX
    init_std: float = 0.1

    def __post_init__(self):
        if self.dim < 1 or self.hidden_dim < 1 or self.num_layers < 1:
            raise ValueError("dim, hidden_dim and num_layers must be >= 1")
        if self.attention not in ("global", "per-dim"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.union_mode not in ("dnf", "dm"):
            raise ValueError(f"unknown union mode {self.union_mode!r}")


@dataclass
class BetaVector:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def from_array(cls, arr) -> "BetaVector":
        arr = np.asarray(arr, dtype=np.float64)
        n = arr.shape[-1] // 2
        return cls(arr[..., :n].copy(), arr[..., n:].copy())

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta], axis=-1)

    def __len__(self):
        return self.alpha.shape[-1]

    def entropy(self) -> float:
        return float(np.sum(special.entropy(self.alpha, self.beta)))


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def inverse_softplus(y):
    return np.log(np.expm1(y))


class BetaModel:
    """Parameters plus batched forward operators (all returning autodiff tensors)."""

    def __init__(self, num_entities: int, num_relations: int, config: ModelConfig | None = None,
                 seed: int = 0):
        self.config = config or ModelConfig()
        self.num_entities = num_entities
        self.num_relations = num_relations
        rng = np.random.default_rng(seed)
        c = self.config
        n2 = 2 * c.dim
        params: Dict[str, np.ndarray] = {}
        # softplus(u) + min_param == 1 at the mean: Beta(1, 1) per dimension
        base = inverse_softplus(1.0 - c.min_param)
        params["entity"] = base + c.init_std * rng.standard_normal((num_entities, n2))
        if c.per_relation_mlp:
            widths = [n2] + [c.hidden_dim] * (c.num_layers - 1) + [n2]
            for i in range(c.num_layers):
                fi, fo = widths[i], widths[i + 1]
                params[f"proj.W{i}"] = _xavier(rng, fi, fo, (num_relations, fi, fo))
                params[f"proj.b{i}"] = np.zeros((num_relations, fo))
        else:
            params["relation"] = rng.standard_normal((num_relations, n2))
            widths = [2 * n2] + [c.hidden_dim] * (c.num_layers - 1) + [n2]
            for i in range(c.num_layers):
                params[f"proj.W{i}"] = _xavier(rng, widths[i], widths[i + 1])
                params[f"proj.b{i}"] = np.zeros(widths[i + 1])
        att_out = 1 if c.attention == "global" else c.dim
        widths = [n2] + [c.hidden_dim] * (c.num_layers - 1) + [att_out]
        for i in range(c.num_layers):
            params[f"att.W{i}"] = _xavier(rng, widths[i], widths[i + 1])
            params[f"att.b{i}"] = np.zeros(widths[i + 1])
        self.params = {k: ad.parameter(v) for k, v in params.items()}

    # -- parameter plumbing -------------------------------------------------

    @property
    def dim(self) -> int:
        return self.config.dim

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    # -- positivity ---------------------------------------------------------

    def positive(self, raw: ad.Tensor) -> ad.Tensor:
        out = ad.softplus(raw) + self.config.min_param
        return ad.clip_max(out, self.config.max_param)

    # -- batched operators --------------------------------------------------

    def entity_t(self, entity_ids) -> ad.Tensor:
        entity_ids = np.asarray(entity_ids)
        if entity_ids.size and (entity_ids.min() < 0 or entity_ids.max() >= self.num_entities):
            raise IndexError("entity id out of range")
        return self.positive(ad.take(self.params["entity"], entity_ids))

    def project_t(self, emb: ad.Tensor, relation_ids) -> ad.Tensor:
        relation_ids = np.asarray(relation_ids, dtype=np.int64)
        if relation_ids.size and (relation_ids.min() < 0 or relation_ids.max() >= self.num_relations):
            raise IndexError("relation id out of range")
        L = self.config.num_layers
        if self.config.per_relation_mlp:
            x = emb
            for i in range(L):
                x = ad.grouped_linear(x, self.params[f"proj.W{i}"], self.params[f"proj.b{i}"],
                                      relation_ids)
                if i < L - 1:
                    x = ad.relu(x)
        else:
            x = ad.concat([emb, ad.take(self.params["relation"], relation_ids)], axis=-1)
            for i in range(L):
                x = x @ self.params[f"proj.W{i}"] + self.params[f"proj.b{i}"]
                if i < L - 1:
                    x = ad.relu(x)
        return self.positive(x)

    def attention_logits_t(self, emb: ad.Tensor) -> ad.Tensor:
        L = self.config.num_layers
        x = emb
        for i in range(L):
            x = x @ self.params[f"att.W{i}"] + self.params[f"att.b{i}"]
            if i < L - 1:
                x = ad.relu(x)
        return x

    def attention_weights_t(self, inputs: Sequence[ad.Tensor]) -> ad.Tensor:
        """Softmax over inputs: shape (m, B, 1) or (m, B, n)."""
        logits = ad.stack([self.attention_logits_t(e) for e in inputs], axis=0)
        return ad.softmax(logits, axis=0)

    def intersect_t(self, inputs: Sequence[ad.Tensor], weights: ad.Tensor | None = None) -> ad.Tensor:
        if len(inputs) < 2:
            raise ValueError("intersection needs at least 2 inputs")
        if len({e.shape for e in inputs}) != 1:
            raise ValueError("intersection inputs must have equal shape")
        w = self.attention_weights_t(inputs) if weights is None else weights
        stacked = ad.stack(list(inputs), axis=0)  # (m, B, 2n)
        if w.shape[-1] == 1:
            weighted = stacked * w
        else:
            weighted = stacked * ad.concat([w, w], axis=-1)
        return _sorted_sum(weighted)

    @staticmethod
    def negate_t(emb: ad.Tensor) -> ad.Tensor:
        return ad.reciprocal(emb)

    def embed_batch_t(self, skeleton: Query, id_matrix) -> ad.Tensor:
        """Embed a batch of same-shaped union-free queries.

        ``id_matrix[b]`` holds the pre-order ids (see :func:`query.ids`) of the
        b-th query; ``skeleton`` provides the shared tree shape.
        """
        id_matrix = np.asarray(id_matrix, dtype=np.int64)
        if id_matrix.ndim == 1:
            id_matrix = id_matrix[None, :]
        cursor = iter(range(id_matrix.shape[1]))

        def go(node):
            if isinstance(node, Anchor):
                return self.entity_t(id_matrix[:, next(cursor)])
            if isinstance(node, Projection):
                col = next(cursor)
                return self.project_t(go(node.child), id_matrix[:, col])
            if isinstance(node, Negation):
                return self.negate_t(go(node.child))
            if isinstance(node, Intersection):
                return self.intersect_t([go(c) for c in node.children])
            raise ValueError("union must be rewritten (to_dm / to_dnf) before embedding")

        return go(skeleton)

    # -- distance -----------------------------------------------------------

    def entity_stats_t(self, emb: ad.Tensor):
        """Per-entity terms of the KL decomposition.

        KL summed over dims equals ``sum(lnB(q)) + c + aq.da + bq.db`` where
        ``c``, ``da``, ``db`` depend only on the entity side.
        """
        n = self.dim
        a, b = emb[..., :n], emb[..., n:]
        s = a + b
        dig_s = ad.digamma(s)
        dig_a = ad.digamma(a)
        dig_b = ad.digamma(b)
        log_b = ad.lgamma(a) + ad.lgamma(b) - ad.lgamma(s)
        c = ad.sum(a * dig_a + b * dig_b - s * dig_s - log_b, axis=-1)
        return c, dig_s - dig_a, dig_s - dig_b

    def query_log_beta_t(self, q: ad.Tensor) -> ad.Tensor:
        n = self.dim
        a, b = q[..., :n], q[..., n:]
        return ad.sum(ad.lgamma(a) + ad.lgamma(b) - ad.lgamma(a + b), axis=-1)

    def distance_t(self, entity_ids, q: ad.Tensor) -> ad.Tensor:
        """Dist(v; q) for ``entity_ids`` of shape (B, K) against queries (B, 2n)."""
        entity_ids = np.asarray(entity_ids, dtype=np.int64)
        uniq, inverse = np.unique(entity_ids, return_inverse=True)
        inverse = inverse.reshape(entity_ids.shape)
        c, da, db = self.entity_stats_t(self.entity_t(uniq))
        n = self.dim
        qa = ad.getitem(q, (slice(None), None, slice(0, n)))
        qb = ad.getitem(q, (slice(None), None, slice(n, 2 * n)))
        cross = ad.sum(ad.take(da, inverse) * qa + ad.take(db, inverse) * qb, axis=-1)
        qlb = ad.getitem(self.query_log_beta_t(q), (slice(None), None))
        return cross + ad.take(c, inverse) + qlb

    def all_distances(self, q: np.ndarray) -> np.ndarray:
        """Distances from queries (B, 2n) to every entity: (B, |V|)."""
        q = np.atleast_2d(q)
        n = self.dim
        c, da, db = self.entity_stats_t(self.entity_t(np.arange(self.num_entities)))
        qt = ad.Tensor(q)
        qlb = self.query_log_beta_t(qt).value
        return q[:, :n] @ da.value.T + q[:, n:] @ db.value.T + c.value[None, :] + qlb[:, None]

    # -- single-item convenience API ---------------------------------------

    def embed_entity(self, v: int) -> BetaVector:
        return BetaVector.from_array(self.entity_t(np.array([v])).value[0])

    def project(self, emb: BetaVector, r: int) -> BetaVector:
        out = self.project_t(ad.Tensor(emb.to_array()[None, :]), np.array([r]))
        return BetaVector.from_array(out.value[0])

    def intersect(self, embs: Sequence[BetaVector]) -> BetaVector:
        out = self.intersect_t([ad.Tensor(e.to_array()[None, :]) for e in embs])
        return BetaVector.from_array(out.value[0])

    def attention_weights(self, embs: Sequence[BetaVector]) -> np.ndarray:
        w = self.attention_weights_t([ad.Tensor(e.to_array()[None, :]) for e in embs])
        return w.value[:, 0, :]

    @staticmethod
    def negate(emb: BetaVector) -> BetaVector:
        return BetaVector(1.0 / emb.alpha, 1.0 / emb.beta)

    def embed_query(self, q: Query, union_mode: str | None = None):
        """DM mode: one BetaVector. DNF mode: list of BetaVectors, one per disjunct."""
        mode = union_mode or self.config.union_mode
        if mode == "dm":
            q = simplify(to_dm(q))
            return BetaVector.from_array(self.embed_batch_t(q, [ids(q)]).value[0])
        return [BetaVector.from_array(self.embed_batch_t(d, [ids(d)]).value[0])
                for d in _disjuncts(q)]

    def distance(self, v: int, emb: BetaVector) -> float:
        q = ad.Tensor(emb.to_array()[None, :])
        return float(self.distance_t(np.array([[v]]), q).value[0, 0])

    def score_union_dnf(self, v: int, disjuncts: Sequence[BetaVector]) -> float:
        if not disjuncts:
            raise ValueError("need at least one disjunct")
        return min(self.distance(v, d) for d in disjuncts)

    # -- bulk query embedding ----------------------------------------------

    def embed_queries(self, queries: Sequence[Query], union_mode: str | None = None):
        """Embed many queries, batching equal shapes.

        Returns a list whose i-th item is an array (D_i, 2n) of disjunct
        embeddings (D_i == 1 in DM mode or for union-free queries). Queries
        are first reduced with :func:`query.simplify`, so repeated branches
        and double negations reuse the embedding of what they denote.
        """
        mode = union_mode or self.config.union_mode
        items = []  # (query index, rewritten union-free query)
        for qi, q in enumerate(queries):
            if mode == "dm":
                items.append((qi, simplify(to_dm(q))))
            else:
                items.extend((qi, d) for d in _disjuncts(q))
        groups: Dict[str, List[int]] = {}
        for k, (_, q) in enumerate(items):
            groups.setdefault(shape_key(q), []).append(k)
        embedded = [None] * len(items)
        for members in groups.values():
            skeleton = items[members[0]][1]
            mat = np.array([ids(items[k][1]) for k in members], dtype=np.int64)
            vals = self.embed_batch_t(skeleton, mat).value
            for row, k in enumerate(members):
                embedded[k] = vals[row]
        out: List[list] = [[] for _ in queries]
        for (qi, _), e in zip(items, embedded):
            out[qi].append(e)
        return [np.stack(e) for e in out]

    # -- checkpoints --------------------------------------------------------

    def save(self, path, extra: Dict[str, np.ndarray] | None = None, meta: dict | None = None):
        header = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
            "meta": meta or {},
        }
        arrays = {f"param/{k}": v for k, v in self.state_arrays().items()}
        for k, v in (extra or {}).items():
            arrays[f"extra/{k}"] = v
        arrays["header"] = np.array(json.dumps(header, sort_keys=True))
        _write_npz(path, arrays)

    @classmethod
    def load(cls, path, num_entities: int | None = None, dim: int | None = None):
        """Load a checkpoint; returns (model, header, extra arrays)."""
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')}")
            config = ModelConfig(**header["config"])
            if num_entities is not None and num_entities != header["num_entities"]:
                raise ValueError(f"checkpoint has {header['num_entities']} entities, graph has {num_entities}")
            if dim is not None and dim != config.dim:
                raise ValueError(f"checkpoint has dim {config.dim}, expected {dim}")
            model = cls.__new__(cls)
            model.config = config
            model.num_entities = header["num_entities"]
            model.num_relations = header["num_relations"]
            model.params = {}
            extra = {}
            for key in z.files:
                if key.startswith("param/"):
                    model.params[key[6:]] = ad.parameter(z[key])
                elif key.startswith("extra/"):
                    extra[key[6:]] = z[key]
        return model, header, extra


def _disjuncts(q: Query) -> List[Query]:
    """Distinct simplified DNF disjuncts, in first-occurrence order."""
    return list(dict.fromkeys(simplify(d) for d in to_dnf(simplify(q))))


def _write_npz(path, arrays: Dict[str, np.ndarray]):
    # fixed timestamps and sorted members keep identical states byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def _sorted_sum(t: ad.Tensor) -> ad.Tensor:
    """Sum over axis 0 in sorted order, so the result is bitwise permutation invariant."""
    v = np.sort(t.value, axis=0).sum(axis=0)

    def fn(g):
        ad._accumulate(t, np.broadcast_to(g, t.shape))

    return ad._make(v, (t,), fn)
