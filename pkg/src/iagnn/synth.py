"""Synthetic category-annotated click logs with learnable sequential structure.

Sessions wander between categories along a sparse category-transition
chain.  Inside a category the next item usually follows one of a few fixed
successors of the last item seen in that category; entering a fresh
category picks an item tied to the previous item.  Item popularity is
Zipf-like within each category, so a popularity ranker has real but
limited skill.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def generate_interactions(
    n_sessions: int = 1000,
    n_items: int = 1000,
    n_categories: int = 10,
    mean_length: float = 6.5,
    seed: int = 0,
    p_stay: float = 0.55,
    p_follow: float = 0.75,
    n_successors: int = 3,
) -> list[tuple[str, str, str, int]]:
    """Returns ``(session_id, item_id, category_id, timestamp_ms)`` rows."""
    rng = np.random.default_rng(seed)
    item_cat = np.sort(rng.integers(0, n_categories, n_items))
    item_cat[:n_categories] = np.arange(n_categories)
    by_cat = [np.flatnonzero(item_cat == c) for c in range(n_categories)]
    pop = []
    for members in by_cat:
        w = 1.0 / (1.0 + rng.permutation(len(members))) ** 0.8
        pop.append(w / w.sum())
    successors = np.array(
        [rng.choice(by_cat[item_cat[v]], size=n_successors) for v in range(n_items)]
    )
    succ_w = np.array([0.6, 0.3, 0.1][:n_successors])
    succ_w = succ_w / succ_w.sum()
    affinity = np.array(
        [[rng.choice(by_cat[c]) for c in range(n_categories)] for _ in range(n_items)]
    )
    cat_next = np.array(
        [rng.choice([c for c in range(n_categories) if c != a] or [a], size=2) for a in range(n_categories)]
    )

    def draw_pop(c):
        return int(rng.choice(by_cat[c], p=pop[c]))

    rows = []
    t0 = 1_600_000_000_000
    for s in range(n_sessions):
        length = 2 + rng.poisson(max(mean_length - 2, 0.1))
        start = t0 + int(rng.integers(0, 90 * 24 * 3600)) * 1000
        c = int(rng.integers(0, n_categories))
        v = draw_pop(c)
        last_in = {c: v}
        seq = [v]
        for _ in range(length - 1):
            if rng.random() < p_stay or n_categories == 1:
                nc = c
            else:
                nc = int(cat_next[c][rng.integers(0, 2)]) if rng.random() < 0.8 else int(rng.integers(0, n_categories))
            if nc in last_in and rng.random() < p_follow:
                nv = int(successors[last_in[nc]][rng.choice(n_successors, p=succ_w)])
            elif nc not in last_in and rng.random() < p_follow:
                nv = int(affinity[v][nc])
            else:
                nv = draw_pop(nc)
            c, v = nc, nv
            last_in[c] = v
            seq.append(v)
        sid = f"s{s:07d}"
        for k, item in enumerate(seq):
            rows.append((sid, f"i{item:06d}", f"c{item_cat[item]:03d}", start + 60_000 * k))
    return rows


def write_interactions(path: str | Path, rows, sep: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, item, cat, ts in rows:
            fh.write(f"{sid}{sep}{item}{sep}{cat}{sep}{ts}\n")
