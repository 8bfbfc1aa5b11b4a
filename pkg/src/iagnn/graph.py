"""Per-session category-aware heterogeneous graphs and their batched form.

Node ids inside one graph are canonical: item nodes in order of first
occurrence, then category nodes in order of first occurrence, then the
target node.  Edge lists are sorted ``(src, dst)`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ITEM_ITEM = "item_item"
CAT_CAT = "cat_cat"
ITEM_TO_CAT = "item_to_cat"
CAT_TO_ITEM = "cat_to_item"
ITEM_TO_TGT = "item_to_tgt"
TGT_TO_ITEM = "tgt_to_item"
ITEM_SEQ = "item_seq"  # raw prefix order; only with the add-original-transition ablation

RELATIONS = (ITEM_ITEM, CAT_CAT, ITEM_TO_CAT, CAT_TO_ITEM, ITEM_TO_TGT, TGT_TO_ITEM)
CATEGORY_RELATIONS = (CAT_CAT, ITEM_TO_CAT, CAT_TO_ITEM)

ITEM, CATEGORY, TARGET = 0, 1, 2


@dataclass
class CategoryAwareGraph:
    item_nodes: list[tuple[int, int, int]]  # (node_id, item index, last 1-based position)
    category_nodes: list[tuple[int, int]]  # (node_id, category index)
    target_node: int
    target_category: int
    edges: dict[str, list[tuple[int, int]]]
    last_item_node: int
    last_incat_item_node: int
    last_cat_node: int | None
    last_incat_cat_node: int | None
    prefix_len: int
    item_category: dict[int, int] = field(default_factory=dict)  # node_id -> category index
    packed: dict | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.item_nodes) + len(self.category_nodes) + 1

    def edge_counts(self) -> dict[str, int]:
        return {r: len(e) for r, e in self.edges.items()}


def _first_occurrence(seq) -> dict:
    order: dict = {}
    for x in seq:
        order.setdefault(x, len(order))
    return order


def build_graph(example, with_item_sequence: bool = False) -> CategoryAwareGraph:
    items = [int(v) for v in example.prefix_items]
    cats = [int(c) for c in example.prefix_categories]
    if not items:
        raise ValueError("build_graph: empty prefix")
    n = len(items)
    item_id = _first_occurrence(items)
    n_items = len(item_id)
    cat_id = {c: n_items + k for c, k in _first_occurrence(cats).items()}
    target = n_items + len(cat_id)
    tc = int(example.target_category)

    last_pos = {}
    for pos, v in enumerate(items, 1):
        last_pos[v] = pos
    node_cat = {item_id[v]: c for v, c in zip(items, cats)}

    item_edges = {(i, i) for i in item_id.values()}
    prev_in_cat: dict[int, int] = {}
    for v, c in zip(items, cats):
        node = item_id[v]
        if c in prev_in_cat:
            item_edges.add((prev_in_cat[c], node))
        prev_in_cat[c] = node

    cat_edges = {(k, k) for k in cat_id.values()}
    cat_edges.update((cat_id[a], cat_id[b]) for a, b in zip(cats, cats[1:]))

    i2c = {(item_id[v], cat_id[c]) for v, c in zip(items, cats)}
    edges = {
        ITEM_ITEM: sorted(item_edges),
        CAT_CAT: sorted(cat_edges),
        ITEM_TO_CAT: sorted(i2c),
        CAT_TO_ITEM: sorted((b, a) for a, b in i2c),
        ITEM_TO_TGT: [(i, target) for i in range(n_items)],
        TGT_TO_ITEM: [(target, i) for i in range(n_items)],
    }
    if with_item_sequence:
        edges[ITEM_SEQ] = sorted({(item_id[a], item_id[b]) for a, b in zip(items, items[1:]) if a != b})

    last_item = item_id[items[-1]]
    incat = [item_id[v] for v, c in zip(items, cats) if c == tc]
    last_incat = incat[-1] if incat else last_item
    last_cat = cat_id[cats[-1]]
    last_incat_cat = cat_id.get(tc, last_cat)
    return CategoryAwareGraph(
        item_nodes=[(k, v, last_pos[v]) for v, k in item_id.items()],
        category_nodes=[(k, c) for c, k in cat_id.items()],
        target_node=target,
        target_category=tc,
        edges=edges,
        last_item_node=last_item,
        last_incat_item_node=last_incat,
        last_cat_node=last_cat,
        last_incat_cat_node=last_incat_cat,
        prefix_len=n,
        item_category=node_cat,
    )


def reference_build_graph(example, with_item_sequence: bool = False) -> CategoryAwareGraph:
    """Deliberately naive second construction used to cross-check :func:`build_graph`."""
    items = list(example.prefix_items)
    cats = list(example.prefix_categories)
    n = len(items)

    distinct_items = []
    for v in items:
        if v not in distinct_items:
            distinct_items.append(v)
    distinct_cats = []
    for c in cats:
        if c not in distinct_cats:
            distinct_cats.append(c)

    def inode(v):
        return distinct_items.index(v)

    def cnode(c):
        return len(distinct_items) + distinct_cats.index(c)

    target = len(distinct_items) + len(distinct_cats)

    item_item = []
    for c in distinct_cats:
        sub = [items[p] for p in range(n) if cats[p] == c]
        for k in range(len(sub) - 1):
            pair = (inode(sub[k]), inode(sub[k + 1]))
            if pair not in item_item:
                item_item.append(pair)
    for v in distinct_items:
        if (inode(v), inode(v)) not in item_item:
            item_item.append((inode(v), inode(v)))

    cat_cat = []
    for p in range(n - 1):
        pair = (cnode(cats[p]), cnode(cats[p + 1]))
        if pair not in cat_cat:
            cat_cat.append(pair)
    for c in distinct_cats:
        if (cnode(c), cnode(c)) not in cat_cat:
            cat_cat.append((cnode(c), cnode(c)))

    i2c = []
    for p in range(n):
        pair = (inode(items[p]), cnode(cats[p]))
        if pair not in i2c:
            i2c.append(pair)

    edges = {
        ITEM_ITEM: sorted(item_item),
        CAT_CAT: sorted(cat_cat),
        ITEM_TO_CAT: sorted(i2c),
        CAT_TO_ITEM: sorted((d, s) for s, d in i2c),
        ITEM_TO_TGT: sorted((inode(v), target) for v in distinct_items),
        TGT_TO_ITEM: sorted((target, inode(v)) for v in distinct_items),
    }
    if with_item_sequence:
        seq = []
        for p in range(n - 1):
            if items[p] != items[p + 1] and (inode(items[p]), inode(items[p + 1])) not in seq:
                seq.append((inode(items[p]), inode(items[p + 1])))
        edges[ITEM_SEQ] = sorted(seq)

    item_nodes = []
    for v in distinct_items:
        last = max(p + 1 for p in range(n) if items[p] == v)
        item_nodes.append((inode(v), v, last))
    tc = example.target_category
    last_incat = None
    for p in range(n):
        if cats[p] == tc:
            last_incat = inode(items[p])
    if last_incat is None:
        last_incat = inode(items[-1])
    return CategoryAwareGraph(
        item_nodes=item_nodes,
        category_nodes=[(cnode(c), c) for c in distinct_cats],
        target_node=target,
        target_category=tc,
        edges=edges,
        last_item_node=inode(items[-1]),
        last_incat_item_node=last_incat,
        last_cat_node=cnode(cats[-1]),
        last_incat_cat_node=cnode(tc) if tc in distinct_cats else cnode(cats[-1]),
        prefix_len=n,
        item_category={inode(items[p]): cats[p] for p in range(n)},
    )


def remove_category_nodes(graph: CategoryAwareGraph) -> CategoryAwareGraph:
    """Drop category nodes and every edge touching them; the target node is renumbered."""
    n_items = len(graph.item_nodes)
    new_target = n_items

    def remap(node):
        return new_target if node == graph.target_node else node

    edges = {
        r: [(remap(s), remap(d)) for s, d in e]
        for r, e in graph.edges.items()
        if r not in CATEGORY_RELATIONS
    }
    return CategoryAwareGraph(
        item_nodes=list(graph.item_nodes),
        category_nodes=[],
        target_node=new_target,
        target_category=graph.target_category,
        edges=edges,
        last_item_node=graph.last_item_node,
        last_incat_item_node=graph.last_incat_item_node,
        last_cat_node=None,
        last_incat_cat_node=None,
        prefix_len=graph.prefix_len,
        item_category=dict(graph.item_category),
    )


def dump_graph(graph: CategoryAwareGraph) -> str:
    """Line-based text form: ``NODE kind id payload`` and ``EDGE relation src dst``."""
    lines = []
    for node, item, last in graph.item_nodes:
        lines.append(f"NODE item {node} {item} last={last} cat={graph.item_category[node]}")
    for node, cat in graph.category_nodes:
        lines.append(f"NODE category {node} {cat}")
    lines.append(f"NODE target {graph.target_node} {graph.target_category}")
    for rel in sorted(graph.edges):
        for s, d in graph.edges[rel]:
            lines.append(f"EDGE {rel} {s} {d}")
    return "\n".join(lines) + "\n"


# batching ----------------------------------------------------------------------


@dataclass
class RelationEdges:
    src: np.ndarray
    dst: np.ndarray
    segment: np.ndarray  # dense index of dst among receiving nodes
    receivers: np.ndarray  # sorted unique dst node ids

    @property
    def n_segments(self) -> int:
        return len(self.receivers)


@dataclass
class GraphBatch:
    """Disjoint union of session graphs with nodes grouped by kind.

    Global node order: all item nodes (batch order), all category nodes,
    then one target node per example.
    """

    n_examples: int
    n_item_nodes: int
    n_cat_nodes: int
    item_index: np.ndarray  # (n_item_nodes,)
    item_cat: np.ndarray  # category of each item node
    item_last_pos: np.ndarray
    item_prefix_len: np.ndarray
    item_example: np.ndarray
    cat_index: np.ndarray  # (n_cat_nodes,)
    target_cat: np.ndarray  # (B,)
    relations: dict[str, RelationEdges]
    last_item: np.ndarray  # global node ids, (B,)
    last_incat_item: np.ndarray
    last_cat: np.ndarray | None
    last_incat_cat: np.ndarray | None
    labels: np.ndarray | None = None
    has_categories: bool = True

    @property
    def n_nodes(self) -> int:
        return self.n_item_nodes + self.n_cat_nodes + self.n_examples

    @property
    def target_nodes(self) -> np.ndarray:
        return self.n_item_nodes + self.n_cat_nodes + np.arange(self.n_examples)


_KIND_OF = {
    ITEM_ITEM: (ITEM, ITEM),
    ITEM_SEQ: (ITEM, ITEM),
    CAT_CAT: (CATEGORY, CATEGORY),
    ITEM_TO_CAT: (ITEM, CATEGORY),
    CAT_TO_ITEM: (CATEGORY, ITEM),
    ITEM_TO_TGT: (ITEM, TARGET),
    TGT_TO_ITEM: (TARGET, ITEM),
}


def pack(graph: CategoryAwareGraph) -> dict:
    """Array form of one graph with node ids local to their kind; cached on the graph."""
    if graph.packed is not None:
        return graph.packed
    ni = len(graph.item_nodes)
    items = np.array(graph.item_nodes, dtype=np.int64).reshape(-1, 3)
    order = np.argsort(items[:, 0])
    items = items[order]
    local = {ITEM: lambda n: n, CATEGORY: lambda n: n - ni, TARGET: lambda n: 0}
    edges = {}
    for rel, pairs in graph.edges.items():
        sk, dk = _KIND_OF[rel]
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        if sk == CATEGORY:
            arr[:, 0] -= ni
        elif sk == TARGET:
            arr[:, 0] = 0
        if dk == CATEGORY:
            arr[:, 1] -= ni
        elif dk == TARGET:
            arr[:, 1] = 0
        edges[rel] = arr
    has_cats = bool(graph.category_nodes)
    graph.packed = {
        "item_index": items[:, 1],
        "item_last": items[:, 2],
        "item_cat": np.array([graph.item_category[n] for n in items[:, 0]], dtype=np.int64),
        "cat_index": np.array([c for _, c in sorted(graph.category_nodes)], dtype=np.int64),
        "edges": edges,
        "readout": (
            local[ITEM](graph.last_item_node),
            local[ITEM](graph.last_incat_item_node),
            local[CATEGORY](graph.last_cat_node) if has_cats else -1,
            local[CATEGORY](graph.last_incat_cat_node) if has_cats else -1,
        ),
        "prefix_len": graph.prefix_len,
        "target_category": graph.target_category,
    }
    return graph.packed


def collate(graphs: Sequence[CategoryAwareGraph], labels=None) -> GraphBatch:
    packed = [pack(g) for g in graphs]
    B = len(packed)
    n_i = np.array([len(p["item_index"]) for p in packed], dtype=np.int64)
    n_c = np.array([len(p["cat_index"]) for p in packed], dtype=np.int64)
    total_i, total_c = int(n_i.sum()), int(n_c.sum())
    item_off = np.concatenate([[0], np.cumsum(n_i)[:-1]]).astype(np.int64)
    cat_off = total_i + np.concatenate([[0], np.cumsum(n_c)[:-1]]).astype(np.int64)
    tgt_base = total_i + total_c
    has_cats = bool(B) and bool((n_c > 0).all())
    bidx = np.arange(B)
    base = {ITEM: item_off, CATEGORY: cat_off, TARGET: tgt_base + bidx}

    relations = {}
    rel_names = sorted({r for p in packed for r in p["edges"]})
    for rel in rel_names:
        sk, dk = _KIND_OF[rel]
        arrs = [p["edges"].get(rel, np.empty((0, 2), np.int64)) for p in packed]
        counts = np.array([len(a) for a in arrs], dtype=np.int64)
        cat = np.concatenate(arrs) if arrs else np.empty((0, 2), np.int64)
        gi = np.repeat(bidx, counts)
        src = base[sk][gi] + cat[:, 0]
        dst = base[dk][gi] + cat[:, 1]
        order = np.lexsort((src, dst))  # canonical (dst, src) summation order
        src, dst = src[order], dst[order]
        if len(dst):
            newseg = np.concatenate([[True], dst[1:] != dst[:-1]])
            segment = np.cumsum(newseg) - 1
            receivers = dst[newseg]
        else:
            segment = np.empty(0, np.int64)
            receivers = np.empty(0, np.int64)
        relations[rel] = RelationEdges(src, dst, segment.astype(np.int64), receivers)

    readout = np.array([p["readout"] for p in packed], dtype=np.int64).reshape(B, 4)
    return GraphBatch(
        n_examples=B,
        n_item_nodes=total_i,
        n_cat_nodes=total_c,
        item_index=np.concatenate([p["item_index"] for p in packed]),
        item_cat=np.concatenate([p["item_cat"] for p in packed]),
        item_last_pos=np.concatenate([p["item_last"] for p in packed]),
        item_prefix_len=np.repeat(np.array([p["prefix_len"] for p in packed], np.int64), n_i),
        item_example=np.repeat(bidx, n_i),
        cat_index=np.concatenate([p["cat_index"] for p in packed]) if total_c else np.empty(0, np.int64),
        target_cat=np.array([p["target_category"] for p in packed], np.int64),
        relations=relations,
        last_item=item_off + readout[:, 0],
        last_incat_item=item_off + readout[:, 1],
        last_cat=cat_off + readout[:, 2] if has_cats else None,
        last_incat_cat=cat_off + readout[:, 3] if has_cats else None,
        labels=None if labels is None else np.asarray(labels, np.int64),
        has_categories=has_cats,
    )
