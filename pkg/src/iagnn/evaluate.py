"""Top-k precision and reciprocal-rank metrics over target-category candidates."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .graph import collate
from .model import ModelConfig, ModelParams, candidate_mask, forward_batch, prepare_graph

KS = (10, 20)


def rank_of_label(scores: np.ndarray, label: int, candidates: Sequence[int]) -> int:
    """1-based rank among ``candidates``; ties go to the smaller item index."""
    s = scores[label]
    rank = 1
    for v in candidates:
        if v == label:
            continue
        if scores[v] > s or (scores[v] == s and v < label):
            rank += 1
    return rank


def rank_and_score(scores: np.ndarray, label: int, candidates: Sequence[int], k: int) -> tuple[int, float]:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if label not in set(int(c) for c in candidates):
        raise ValueError(f"label {label} is not a candidate")
    rank = rank_of_label(np.asarray(scores), int(label), candidates)
    return (1, 1.0 / rank) if rank <= k else (0, 0.0)


def batch_ranks(scores: np.ndarray, mask: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_of_label` for a ``(B, V)`` score matrix."""
    B, V = scores.shape
    s = scores[np.arange(B), labels][:, None]
    idx = np.arange(V)[None, :]
    better = (scores > s) | ((scores == s) & (idx < labels[:, None]))
    return 1 + (better & mask).sum(axis=1)


def brute_force_rank(scores: np.ndarray, label: int, candidates: Sequence[int]) -> int:
    """Independent oracle: full sort by (-score, index)."""
    order = sorted((-float(scores[v]), int(v)) for v in candidates)
    return [v for _, v in order].index(int(label)) + 1


@dataclass
class MetricsReport:
    precision: dict[int, float] = field(default_factory=dict)
    mrr: dict[int, float] = field(default_factory=dict)
    n_examples: int = 0
    n_singleton_candidates: int = 0

    def as_records(self, split: str) -> list[str]:
        lines = []
        for k in sorted(self.precision):
            lines.append(f"{split}\t{k}\tP\t{self.precision[k]:.6f}")
            lines.append(f"{split}\t{k}\tmrr\t{self.mrr[k]:.6f}")
        return lines

    def table(self, title: str = "") -> str:
        ks = sorted(self.precision)
        head = "".join(f"{'P@' + str(k):>10s}{'mrr@' + str(k):>10s}" for k in ks)
        row = "".join(f"{100 * self.precision[k]:10.2f}{100 * self.mrr[k]:10.2f}" for k in ks)
        lines = [f"{'':12s}{head}", f"{title[:12]:12s}{row}"]
        lines.append(f"n={self.n_examples} singleton_candidates={self.n_singleton_candidates}")
        return "\n".join(lines)


def report_from_ranks(ranks: np.ndarray, n_singletons: int, ks=KS) -> MetricsReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("cannot evaluate an empty split")
    rep = MetricsReport(n_examples=int(ranks.size), n_singleton_candidates=int(n_singletons))
    for k in ks:
        hit = ranks <= k
        rep.precision[k] = float(hit.mean())
        rep.mrr[k] = float(np.where(hit, 1.0 / ranks, 0.0).mean())
    return rep


ScoreFn = Callable[[Sequence], np.ndarray]


def evaluate_scorer(
    score_fn: ScoreFn,
    examples: Sequence,
    item_category: np.ndarray,
    batch_size: int = 512,
    ks=KS,
    oracle_fraction: float = 0.01,
    seed: int = 0,
    workers: int = 1,
    return_ranks: bool = False,
):
    """Rank every example's label among its target-category candidates.

    A seeded ``oracle_fraction`` sample is re-ranked by full sorting and must
    agree with the vectorised ranks.
    """
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    item_category = np.asarray(item_category)
    sizes = np.bincount(item_category)
    chunks = [examples[i:i + batch_size] for i in range(0, len(examples), batch_size)]
    rng = np.random.default_rng(seed)
    n_oracle = max(1, int(round(oracle_fraction * len(examples)))) if oracle_fraction > 0 else 0
    oracle_ids = set(rng.choice(len(examples), size=n_oracle, replace=False).tolist()) if n_oracle else set()

    def run(ci):
        chunk = chunks[ci]
        scores = score_fn(chunk)
        tc = np.array([ex.target_category for ex in chunk])
        labels = np.array([ex.label_item for ex in chunk])
        mask = candidate_mask(tc, item_category)
        ranks = batch_ranks(scores, mask, labels)
        base = ci * batch_size
        for j in range(len(chunk)):
            if base + j in oracle_ids:
                cands = np.flatnonzero(mask[j])
                expect = brute_force_rank(scores[j], int(labels[j]), cands)
                if expect != ranks[j]:
                    raise AssertionError(f"rank oracle mismatch on example {base + j}: {ranks[j]} vs {expect}")
        return ranks

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(chunks))))
    else:
        parts = [run(i) for i in range(len(chunks))]
    ranks = np.concatenate(parts)
    n_single = int(sum(sizes[ex.target_category] == 1 for ex in examples))
    rep = report_from_ranks(ranks, n_single, ks)
    return (rep, ranks) if return_ranks else rep


def model_scorer(params: ModelParams, config: ModelConfig, item_category: np.ndarray) -> ScoreFn:
    def score(chunk):
        graphs = [prepare_graph(ex, config) for ex in chunk]
        with ad.no_grad():
            return forward_batch(collate(graphs), params, config, item_category).scores

    return score


def evaluate(params: ModelParams, examples: Sequence, config: ModelConfig, item_category, **kw) -> MetricsReport:
    return evaluate_scorer(model_scorer(params, config, np.asarray(item_category)), examples, item_category, **kw)


def popularity_baseline(train: Sequence, n_items: int) -> ScoreFn:
    """Score = label frequency in the training split (ties fall to the smaller index)."""
    counts = Counter(int(ex.label_item) for ex in train)
    freq = np.zeros(n_items)
    for v, n in counts.items():
        freq[v] = n

    def score(chunk):
        return np.broadcast_to(freq, (len(chunk), n_items)).copy()

    return score
