"""Margin-based negative-sampling training of :class:`BetaModel`."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .model import BetaModel
from .query import TEMPLATES, TRAIN_STRUCTURES, ids
from .sampler import QueryInstance

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss twice in a row."""


@dataclass
class TrainConfig:
    gamma: float = 60.0
    neg_k: int = 128
    batch_size: int = 512
    lr: float = 5e-4
    steps: int = 2000
    seed: int = 0
    mix: Optional[Dict[str, float]] = None
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.gamma <= 0 or self.neg_k < 1 or self.batch_size < 1 or self.lr < 0 or self.steps < 0:
            raise ValueError("gamma, neg_k, batch_size must be positive; lr, steps non-negative")


# full-scale values; the desk defaults above differ only in what the CLI overrides
FULL_SCALE_TRAIN = dict(gamma=60.0, neg_k=128, batch_size=512, lr=5e-4, steps=300_000)
FULL_SCALE_MODEL = dict(dim=400, hidden_dim=512, num_layers=3)


def read_config_file(path) -> Dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def coerce_fields(cls, values: Dict[str, str]) -> dict:
    """Convert string values to the types of ``cls``'s dataclass fields it knows."""
    out = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        default = f.default
        if isinstance(default, bool):
            out[f.name] = str(raw).lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            out[f.name] = int(raw)
        elif isinstance(default, float):
            out[f.name] = float(raw)
        elif f.name == "mix":
            out[f.name] = {k: float(v) for k, v in (p.split(":") for p in str(raw).split(","))}
        else:
            out[f.name] = raw
    return out


# ---------------------------------------------------------------------------
# objective

def margin_loss(pos_dist, neg_dist, gamma: float) -> float:
    """Loss for one query: positive distance (scalar) and k negative distances."""
    pos_dist = float(pos_dist)
    neg_dist = np.asarray(neg_dist, dtype=np.float64)
    pos_term = np.logaddexp(0.0, -(gamma - pos_dist))
    neg_term = np.logaddexp(0.0, -(neg_dist - gamma)).mean()
    return float(pos_term + neg_term)


def loss_t(pos_dist: ad.Tensor, neg_dist: ad.Tensor, gamma: float) -> ad.Tensor:
    """Batch mean of the margin loss; ``pos_dist`` (B,), ``neg_dist`` (B, k)."""
    k = neg_dist.shape[-1]
    pos = ad.log_sigmoid(gamma - pos_dist)
    neg = ad.sum(ad.log_sigmoid(neg_dist - gamma), axis=-1) * (1.0 / k)
    return -ad.mean(pos + neg)


def sample_negatives(answers, num_entities: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` entity ids outside ``answers``; distinct when enough non-answers exist."""
    answers = answers if isinstance(answers, (set, frozenset)) else set(answers)
    free = num_entities - len(answers)
    if free <= 0:
        raise ValueError("every entity is an answer; no negatives exist")
    if free < k or free < 2 * len(answers):
        pool = np.array([v for v in range(num_entities) if v not in answers], dtype=np.int64)
        return rng.choice(pool, size=k, replace=free < k)
    out: List[int] = []
    taken = set()
    while len(out) < k:
        for v in rng.integers(num_entities, size=2 * k):
            v = int(v)
            if v in answers or v in taken:
                continue
            taken.add(v)
            out.append(v)
            if len(out) == k:
                break
    return np.array(out, dtype=np.int64)


@dataclass
class TrainBatch:
    structure: str
    id_matrix: np.ndarray  # (B, slots)
    positives: np.ndarray  # (B,)
    negatives: np.ndarray  # (B, k)


def make_batch(instances: Sequence[QueryInstance], num_entities: int, k: int,
               rng: np.random.Generator) -> TrainBatch:
    structure = instances[0].structure
    id_matrix = np.array([ids(inst.query) for inst in instances], dtype=np.int64)
    positives = np.empty(len(instances), dtype=np.int64)
    negatives = np.empty((len(instances), k), dtype=np.int64)
    for i, inst in enumerate(instances):
        answers = sorted(inst.answers)
        positives[i] = answers[int(rng.integers(len(answers)))]
        negatives[i] = sample_negatives(inst.answers, num_entities, k, rng)
    return TrainBatch(structure, id_matrix, positives, negatives)


def batch_loss_t(model: BetaModel, batch: TrainBatch, gamma: float) -> ad.Tensor:
    q = model.embed_batch_t(TEMPLATES[batch.structure], batch.id_matrix)
    ids_all = np.concatenate([batch.positives[:, None], batch.negatives], axis=1)
    dist = model.distance_t(ids_all, q)
    return loss_t(dist[:, 0], dist[:, 1:], gamma)


# ---------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, params: Dict[str, ad.Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for k in self.m:
            self.m[k] = np.array(arrays[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"v/{k}"], dtype=np.float64)


# ---------------------------------------------------------------------------
# schedule

class StructureSchedule:
    """Smooth weighted round-robin over structures (deterministic)."""

    def __init__(self, weights: Dict[str, float]):
        self.weights = {k: float(w) for k, w in weights.items() if w > 0}
        if not self.weights:
            raise ValueError("no structure has positive weight")
        self.current = {k: 0.0 for k in self.weights}

    def next(self) -> str:
        total = sum(self.weights.values())
        for k, w in self.weights.items():
            self.current[k] += w
        best = max(self.current, key=lambda k: (self.current[k], -list(self.weights).index(k)))
        self.current[best] -= total
        return best


# ---------------------------------------------------------------------------
# trainer

@dataclass
class StepRecord:
    step: int
    structure: str
    loss: float
    elapsed: float


@dataclass
class Trainer:
    model: BetaModel
    train_queries: Dict[str, List[QueryInstance]]
    config: TrainConfig
    step_count: int = 0
    history: List[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        self.pools = {s: v for s, v in self.train_queries.items() if s in TRAIN_STRUCTURES and v}
        missing = [s for s in TRAIN_STRUCTURES if s not in self.pools]
        if missing:
            logger.warning("training data lacks structures %s; training on the rest", ",".join(missing))
        if not self.pools:
            raise ValueError("no trainable queries")
        weights = self.config.mix or {s: len(v) for s, v in self.pools.items()}
        self.schedule = StructureSchedule({s: w for s, w in weights.items() if s in self.pools})
        self.optimizer = Adam(self.model.params, self.config.lr)
        self.rng = np.random.default_rng(self.config.seed)
        self.lr_halved = False
        self._prev = None  # (state before the last update, its batch)

    def next_batch(self) -> TrainBatch:
        structure = self.schedule.next()
        pool = self.pools[structure]
        picks = self.rng.integers(len(pool), size=self.config.batch_size)
        return make_batch([pool[i] for i in picks], self.model.num_entities, self.config.neg_k, self.rng)

    def _snapshot(self):
        return ({k: p.value.copy() for k, p in self.model.params.items()},
                {k: v.copy() for k, v in self.optimizer.m.items()},
                {k: v.copy() for k, v in self.optimizer.v.items()},
                self.optimizer.t)

    def _restore(self, snap):
        values, m, v, t = snap
        for k, p in self.model.params.items():
            p.value[...] = values[k]
        self.optimizer.m = {k: a.copy() for k, a in m.items()}
        self.optimizer.v = {k: a.copy() for k, a in v.items()}
        self.optimizer.t = t

    def _apply(self, batch: TrainBatch) -> float:
        """Forward, backward and one optimiser update; NaN if anything is non-finite."""
        self.model.zero_grad()
        loss = batch_loss_t(self.model, batch, self.config.gamma)
        value = float(loss.value)
        if not math.isfinite(value):
            return math.nan
        ad.backward(loss)
        if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in self.model.params.values()):
            return math.nan
        self.optimizer.step()
        if not all(np.all(np.isfinite(p.value)) for p in self.model.params.values()):
            return math.nan
        return value

    def step(self, batch: Optional[TrainBatch] = None) -> float:
        """One update. On a non-finite loss the previous update is undone, the
        learning rate halved and the step retried; a second failure aborts."""
        batch = batch or self.next_batch()
        before = self._snapshot()
        value = self._apply(batch)
        if not math.isfinite(value) and not self.lr_halved:
            logger.warning("non-finite loss at step %d; halving learning rate and retrying",
                           self.step_count + 1)
            self.lr_halved = True
            self.optimizer.lr *= 0.5
            if self._prev is not None:
                prev_snap, prev_batch = self._prev
                self._restore(prev_snap)
                redo = self._apply(prev_batch)
                if not math.isfinite(redo):
                    self._abort(prev_batch)
                before = self._snapshot()
            else:
                self._restore(before)
            value = self._apply(batch)
        if not math.isfinite(value):
            self._abort(batch)
        self._prev = (before, batch)
        self.step_count += 1
        return value

    def _abort(self, batch: TrainBatch):
        worst = {k: float(np.nanmax(np.abs(np.where(np.isfinite(p.value), p.value, np.inf))))
                 for k, p in self.model.params.items()}
        raise NumericalError(f"non-finite loss at step {self.step_count + 1} (structure "
                             f"{batch.structure}, lr {self.optimizer.lr:g}); "
                             f"max |param| per tensor: {json.dumps(worst)}")

    def run(self, steps: int, log=None, checkpoint_path=None, on_step=None) -> List[StepRecord]:
        """Train ``steps`` more steps, appending ``step\\tstructure\\tloss\\telapsed_s`` lines to ``log``."""
        start = time.perf_counter()
        records = []
        for _ in range(steps):
            batch = self.next_batch()
            loss = self.step(batch)
            rec = StepRecord(self.step_count, batch.structure, loss, time.perf_counter() - start)
            records.append(rec)
            if log is not None and self.step_count % max(1, self.config.log_every) == 0:
                log.write(f"{rec.step}\t{rec.structure}\t{rec.loss:.6f}\t{rec.elapsed:.3f}\n")
            if checkpoint_path and self.config.checkpoint_every and \
                    self.step_count % self.config.checkpoint_every == 0:
                self.save(checkpoint_path)
            if on_step is not None:
                on_step(rec)
        self.history.extend(records)
        return records

    # -- persistence --------------------------------------------------------

    def save(self, path, meta: Optional[dict] = None):
        state = {
            "step": self.step_count,
            "lr": self.optimizer.lr,
            "adam_t": self.optimizer.t,
            "lr_halved": self.lr_halved,
            "rng": self.rng.bit_generator.state,
            "schedule": self.schedule.current,
            "train_config": asdict(self.config),
        }
        self.model.save(path, extra=self.optimizer.state_arrays(),
                        meta={"trainer": state, **(meta or {})})

    @classmethod
    def resume(cls, path, train_queries, config: Optional[TrainConfig] = None) -> "Trainer":
        model, header, extra = BetaModel.load(path)
        state = header["meta"]["trainer"]
        config = config or TrainConfig(**state["train_config"])
        tr = cls(model, train_queries, config)
        tr.step_count = state["step"]
        tr.optimizer.lr = state["lr"]
        tr.optimizer.t = state["adam_t"]
        tr.optimizer.load_arrays(extra)
        tr.lr_halved = state["lr_halved"]
        tr.rng.bit_generator.state = state["rng"]
        tr.schedule.current = {k: float(v) for k, v in state["schedule"].items()}
        return tr
