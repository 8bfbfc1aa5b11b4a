"""Mini-batch Adam training, early stopping and hyper-parameter grids."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .evaluate import MetricsReport, evaluate_scorer
from .graph import collate
from .model import TABLES, ModelConfig, ModelParams, forward_batch, init_params, prepare_graph

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    lr_decay_step_epochs: int = 3
    lr_decay_factor: float = 0.1
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_decay_step_epochs < 1:
            raise ValueError("batch_size, max_epochs and lr_decay_step_epochs must be positive")


# Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    last_step: dict[str, np.ndarray]  # per-row step of the last touch, tables only
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, sparse: Sequence[str] = TABLES) -> "AdamState":
        m = {k: np.zeros_like(p.value) for k, p in params.items()}
        v = {k: np.zeros_like(p.value) for k, p in params.items()}
        last = {k: np.zeros(params[k].shape[0], np.int64) for k in sparse if k in params}
        return cls(m, v, last)


def adam_step(
    params: ModelParams,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam, in place.

    Embedding tables only update rows whose gradient is nonzero.  Their
    moments catch up on skipped steps (decay by ``beta**gap``) when a row is
    next touched, so moments match dense Adam while untouched rows stay put.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient in {name}")
        m, v = state.m[name], state.v[name]
        if name in state.last_step:
            rows = np.flatnonzero(np.any(g != 0.0, axis=1))
            if rows.size == 0:
                continue
            gap = (t - state.last_step[name][rows] - 1)[:, None]
            gr = g[rows]
            m[rows] = beta1 ** (gap + 1) * m[rows] + (1 - beta1) * gr
            v[rows] = beta2 ** (gap + 1) * v[rows] + (1 - beta2) * gr * gr
            state.last_step[name][rows] = t
            p.value[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + eps)
        else:
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# training ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val: MetricsReport

    def line(self) -> str:
        v = self.val
        return "\t".join(
            [
                str(self.epoch),
                f"{self.lr:.6g}",
                f"{self.train_loss:.6f}",
                f"{v.precision[10]:.6f}",
                f"{v.precision[20]:.6f}",
                f"{v.mrr[10]:.6f}",
                f"{v.mrr[20]:.6f}",
            ]
        )


HISTORY_HEADER = "epoch\tlr\ttrain_loss\tval_P@10\tval_P@20\tval_mrr@10\tval_mrr@20"


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    first_batch_loss: float
    seconds: float = 0.0

    @property
    def best_val(self) -> MetricsReport:
        return self.history[self.best_epoch - 1].val

    def history_text(self) -> str:
        return "\n".join([HISTORY_HEADER] + [r.line() for r in self.history]) + "\n"


class GraphCache:
    """Per-example graphs built once for a fixed model configuration."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._graphs: dict[int, object] = {}

    def get(self, examples: Sequence) -> list:
        out = []
        for ex in examples:
            g = self._graphs.get(id(ex))
            if g is None:
                g = self._graphs[id(ex)] = (ex, prepare_graph(ex, self.config))
            out.append(g[1])
        return out


def cached_scorer(params: ModelParams, config: ModelConfig, item_category: np.ndarray, cache: GraphCache):
    def score(chunk):
        with ad.no_grad():
            return forward_batch(collate(cache.get(chunk)), params, config, item_category).scores

    return score


def batch_loss(examples: Sequence, graphs: Sequence, params: ModelParams, config: ModelConfig, item_category) -> ad.Tensor:
    batch = collate(graphs, labels=[ex.label_item for ex in examples])
    return forward_batch(batch, params, config, item_category).loss


def train(
    train_set: Sequence,
    val_set: Sequence,
    params: ModelParams,
    config: TrainConfig,
    item_category: np.ndarray,
    val_metric: tuple[str, int] = ("mrr", 20),
    callback=None,
) -> TrainResult:
    """Train with early stopping on validation ``mrr@20``; returns the best parameters.

    ``callback(record)`` runs after every epoch; returning True stops training.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    item_category = np.asarray(item_category)
    mcfg = config.model
    cache = GraphCache(mcfg)
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_params(params)
    history: list[EpochRecord] = []
    best_score, best_epoch, best_params = -math.inf, 0, params.copy()
    first_batch_loss = math.nan
    started = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        lr = config.learning_rate * config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_step_epochs)
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            exs = [train_set[i] for i in order[lo:lo + config.batch_size]]
            params.zero_grad()
            loss = batch_loss(exs, cache.get(exs), params, mcfg, item_category)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise NumericFailure(f"non-finite loss at epoch {epoch}")
            if epoch == 1 and lo == 0:
                first_batch_loss = lv
            ad.backward(loss)
            adam_step(params, state, lr)
            total += lv * len(exs)
            count += len(exs)
        params.zero_grad()
        val = evaluate_scorer(cached_scorer(params, mcfg, item_category, cache), val_set, item_category)
        rec = EpochRecord(epoch, lr, total / count, val)
        history.append(rec)
        log.info("%s", rec.line())
        score = getattr(val, val_metric[0])[val_metric[1]]
        if score > best_score:
            best_score, best_epoch, best_params = score, epoch, params.copy()
        elif epoch - best_epoch >= config.patience:
            break
        if callback is not None and callback(rec):
            break
    return TrainResult(best_params, history, best_epoch, first_batch_loss, time.perf_counter() - started)


def train_from_scratch(train_set, val_set, n_items, n_categories, item_category, config: TrainConfig, **kw) -> TrainResult:
    params = init_params(config.seed, n_items, n_categories, config.model)
    return train(train_set, val_set, params, config, item_category, **kw)


# grid search ----------------------------------------------------------------------


@dataclass
class GridRow:
    learning_rate: float
    lr_decay_step_epochs: int
    layers: int
    val: MetricsReport
    best_epoch: int
    result: TrainResult

    def cells(self) -> list[str]:
        return [
            f"{self.learning_rate:g}",
            str(self.lr_decay_step_epochs),
            str(self.layers),
            f"{self.val.precision[20]:.4f}",
            f"{self.val.mrr[20]:.4f}",
            str(self.best_epoch),
        ]


def grid_search(
    train_set: Sequence,
    val_set: Sequence,
    n_items: int,
    n_categories: int,
    item_category,
    base: TrainConfig,
    learning_rates: Sequence[float] | None = None,
    decay_steps: Sequence[int] | None = None,
    layers: Sequence[int] | None = None,
    subsample: int | None = None,
) -> list[GridRow]:
    """Train every cell and rank by validation ``mrr@20`` (best first).

    An axis left as ``None`` takes its single value from ``base``.
    """
    learning_rates = learning_rates or (base.learning_rate,)
    decay_steps = decay_steps or (base.lr_decay_step_epochs,)
    layers = layers or (base.model.layers,)
    if subsample is not None and subsample < len(train_set):
        idx = np.sort(np.random.default_rng(base.seed).choice(len(train_set), subsample, replace=False))
        train_set = [train_set[i] for i in idx]
    rows = []
    for lr, step, L in product(learning_rates, decay_steps, layers):
        cfg = replace(base, learning_rate=lr, lr_decay_step_epochs=step, model=replace(base.model, layers=L))
        res = train_from_scratch(train_set, val_set, n_items, n_categories, item_category, cfg)
        rows.append(GridRow(lr, step, L, res.best_val, res.best_epoch, res))
        log.info("grid cell lr=%g step=%d L=%d -> val mrr@20 %.4f", lr, step, L, res.best_val.mrr[20])
    rows.sort(key=lambda r: -r.val.mrr[20])
    return rows


def depth_curve(rows: Sequence[GridRow]) -> dict[int, float]:
    """Best validation mrr@20 per number of layers."""
    out: dict[int, float] = {}
    for r in rows:
        out[r.layers] = max(out.get(r.layers, -math.inf), r.val.mrr[20])
    return dict(sorted(out.items()))


def grid_table(rows: Sequence[GridRow]) -> str:
    head = ["lr", "decay_step", "L", "val_P@20", "val_mrr@20", "best_epoch"]
    lines = ["\t".join(head)] + ["\t".join(r.cells()) for r in rows]
    return "\n".join(lines) + "\n"
