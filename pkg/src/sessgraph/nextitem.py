"""Neural next-item model with a swappable embedding-table initialization.

The model is deliberately minimal: a session prefix is mean-pooled over its
item embedding rows, items are scored against the same (tied) table, and
training minimizes full-catalog softmax cross-entropy with Adam. The point
under test is the initialization contract: the table starts either from a
scaled-uniform draw or as an exact copy of graph-pretrained embeddings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import NumericError, ShapeError
from .sessiondata import PrefixSample

SCALED_UNIFORM = "scaled-uniform"
PRETRAINED = "pretrained"


def init_table(mode: str, m: int, d: int, rng: np.random.Generator | None = None,
               source: np.ndarray | None = None) -> dc.Tensor:
    """Build the m x d embedding table.

    scaled-uniform draws i.i.d. from +-sqrt(6 / (m + d)); pretrained copies
    the source matrix exactly (and requires matching shape).
    """
    if mode == SCALED_UNIFORM:
        if rng is None:
            raise ValueError("scaled-uniform init needs a generator")
        bound = np.sqrt(6.0 / (m + d))
        return dc.Tensor(rng.uniform(-bound, bound, size=(m, d)), requires_grad=True)
    if mode == PRETRAINED:
        if source is None:
            raise ValueError("pretrained init needs a source matrix")
        source = np.asarray(source, dtype=np.float64)
        if source.shape != (m, d):
            raise ShapeError("init_table", source.shape, (m, d))
        return dc.Tensor(source.copy(), requires_grad=True)
    raise ValueError(f"unknown init mode {mode!r}")


class NextItemModel:
    """Mean-pooled session representation with tied input/output embeddings."""

    def __init__(self, table: dc.Tensor):
        self.table = table
        self.m, self.d = table.shape

    def batch_loss(self, prefixes: list[PrefixSample]) -> dc.Tensor:
        idx = np.concatenate([np.asarray(p.prefix, dtype=np.int64) for p in prefixes])
        seg = np.repeat(np.arange(len(prefixes)), [len(p.prefix) for p in prefixes])
        inv_len = np.concatenate([
            np.full(len(p.prefix), 1.0 / len(p.prefix)) for p in prefixes
        ])
        targets = np.array([p.target for p in prefixes], dtype=np.int64)
        rows = dc.gather_rows(self.table, idx)
        pooled = dc.segment_weighted_sum(rows, dc.Tensor(inv_len), seg, len(prefixes))
        logits = dc.matmul(pooled, dc.transpose(self.table))
        return dc.cross_entropy_with_logits(logits, targets)

    def scores(self, prefix) -> np.ndarray:
        """Inference-time scores over the whole catalog."""
        rows = self.table.data[np.asarray(prefix, dtype=np.int64)]
        return rows.mean(axis=0) @ self.table.data.T

    def target_rank(self, prefix, target: int) -> int:
        """1-based rank under descending score, ties by ascending index."""
        s = self.scores(prefix)
        ts = s[target]
        return 1 + int(np.sum(s > ts) + np.sum((s == ts) & (np.arange(self.m) < target)))


def evaluate_ranks(model: NextItemModel, prefixes: list[PrefixSample], k: int = 10):
    """(HR@k, MRR@k) over a prefix set."""
    if not prefixes:
        return 0.0, 0.0
    hits = 0
    mrr = 0.0
    for p in prefixes:
        rank = model.target_rank(p.prefix, p.target)
        if rank <= k:
            hits += 1
            mrr += 1.0 / rank
    return hits / len(prefixes), mrr / len(prefixes)


@dataclass
class NextTrainConfig:
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 128
    seed: int = 0
    eval_k: int = 10


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_hr: float
    val_mrr: float
    wall_seconds: float

    def as_line(self) -> str:
        return (f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_hr:.6f}"
                f"\t{self.val_mrr:.6f}\t{self.wall_seconds:.3f}")


@dataclass
class NextTrainResult:
    model: NextItemModel
    records: list[EpochRecord]

    @property
    def hr_curve(self) -> list[float]:
        return [r.val_hr for r in self.records]


def train_next(model: NextItemModel, train_prefixes: list[PrefixSample],
               val_prefixes: list[PrefixSample],
               config: NextTrainConfig) -> NextTrainResult:
    """Minibatch Adam on cross-entropy; records validation HR/MRR per epoch."""
    rng = np.random.default_rng(config.seed)
    opt = dc.OptimizerState([model.table], lr=config.lr)
    records = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_prefixes))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_prefixes[i] for i in order[lo:lo + config.batch_size]]
            try:
                with dc.Tape() as tape:
                    loss = model.batch_loss(batch)
                model.table.zero_grad()
                dc.backward(tape, loss)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {lo // config.batch_size}: {exc}"
                ) from exc
            dc.adam_step(opt, [model.table])
            losses.append(float(loss.data))
        hr, mrr = evaluate_ranks(model, val_prefixes, config.eval_k)
        records.append(EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0,
                                   hr, mrr, time.perf_counter() - t0))
    return NextTrainResult(model, records)


def epochs_to_threshold(curve, threshold: float) -> int | None:
    """First 1-based epoch whose metric reaches the threshold, else None."""
    for i, v in enumerate(curve, start=1):
        if v >= threshold:
            return i
    return None
