"""The intention adaptive GNN: parameters, batched forward pass, checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graph import (
    CAT_CAT,
    CATEGORY,
    ITEM,
    TARGET,
    CATEGORY_RELATIONS,
    ITEM_SEQ,
    RELATIONS,
    GraphBatch,
    build_graph,
    collate,
    remove_category_nodes,
)

CKPT_MAGIC = "IAGNN-CKPT v1"
TABLES = ("item_table", "category_table", "position_table")
GATE_SITES = ("skip_item", "skip_category", "skip_target", "fuse_item", "fuse_category")


class EmptyCandidates(ValueError):
    """The target category has no candidate items."""


@dataclass
class ModelConfig:
    dim: int = 128
    pos_dim: int | None = None
    layers: int = 2
    max_prefix_len: int = 50
    init_std: float = 0.1
    leaky_slope: float = 0.2
    position_mode: str = "reversed"  # or "positive"
    message_activation: str = "sigmoid"  # or "none"
    share_relation_params: bool = False
    loss: str = "ce"  # or "bce"
    softmax_domain: str = "category"  # or "all"
    no_category_nodes: bool = False
    no_category_transition: bool = False
    target_meanpool: bool = False
    attention_readout: bool = False
    add_original_item_transition: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.dim < 1 or (self.pos_dim is not None and self.pos_dim < 1):
            raise ValueError("dimensions must be positive")
        if self.position_mode not in ("reversed", "positive"):
            raise ValueError(f"unknown position_mode {self.position_mode!r}")
        if self.message_activation not in ("sigmoid", "none"):
            raise ValueError(f"unknown message_activation {self.message_activation!r}")
        if self.loss not in ("ce", "bce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.softmax_domain not in ("category", "all"):
            raise ValueError(f"unknown softmax_domain {self.softmax_domain!r}")

    @property
    def position_dim(self) -> int:
        return self.dim if self.pos_dim is None else self.pos_dim

    def relations(self) -> tuple[str, ...]:
        """Relations that carry messages under the current ablation flags."""
        rels = list(RELATIONS)
        if self.no_category_nodes:
            rels = [r for r in rels if r not in CATEGORY_RELATIONS]
        elif self.no_category_transition:
            rels.remove(CAT_CAT)
        if self.add_original_item_transition:
            rels.append(ITEM_SEQ)
        return tuple(rels)

    def param_relations(self) -> tuple[str, ...]:
        return RELATIONS + ((ITEM_SEQ,) if self.add_original_item_transition else ())


# parameters -------------------------------------------------------------------


def param_shapes(n_items: int, n_categories: int, config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, dp = config.dim, config.position_dim
    shapes = {
        "item_table": (n_items, d),
        "category_table": (n_categories, d),
        "position_table": (config.max_prefix_len, dp),
        "enhance_proj": (d, 2 * d + dp),
    }
    groups = ("shared",) if config.share_relation_params else config.param_relations()
    for layer in range(config.layers):
        for rel in groups:
            shapes[f"layer{layer}.{rel}.W"] = (d, d)
            shapes[f"layer{layer}.{rel}.a_dst"] = (1, d)
            shapes[f"layer{layer}.{rel}.a_src"] = (1, d)
    for site in GATE_SITES:
        shapes[f"gate.{site}"] = (d, 2 * d)
    shapes["session_proj"] = (d, 3 * d)
    return shapes


def param_count(n_items: int, n_categories: int, config: ModelConfig) -> int:
    return int(sum(r * c for r, c in param_shapes(n_items, n_categories, config).values()))


class ModelParams(dict):
    """Ordered ``name -> Tensor`` mapping of learnable tensors."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.items()}

    def copy(self) -> "ModelParams":
        return ModelParams((k, ad.param(t.value.copy(), k)) for k, t in self.items())

    def zero_grad(self) -> None:
        ad.zero_grads(self.values())

    @property
    def n_items(self) -> int:
        return self["item_table"].shape[0]

    @property
    def n_categories(self) -> int:
        return self["category_table"].shape[0]


def init_params(seed: int, n_items: int, n_categories: int, config: ModelConfig) -> ModelParams:
    """Gaussian(0, init_std) for every tensor, drawn in declaration order."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        (name, ad.param(rng.normal(0.0, config.init_std, size=shape), name))
        for name, shape in param_shapes(n_items, n_categories, config).items()
    )


# forward ------------------------------------------------------------------------


def prepare_graph(example, config: ModelConfig):
    g = build_graph(example, with_item_sequence=config.add_original_item_transition)
    if config.no_category_nodes:
        g = remove_category_nodes(g)
    return g


def position_rows(batch: GraphBatch, mode: str, max_len: int) -> np.ndarray:
    if mode == "reversed":
        rows = batch.item_prefix_len - batch.item_last_pos
    else:
        rows = batch.item_last_pos - 1
    if rows.size and rows.max() >= max_len:
        raise ValueError(f"prefix longer than the position table ({max_len} rows)")
    return rows


@dataclass
class ForwardState:
    h0: np.ndarray | None = None
    layers: list[np.ndarray] = field(default_factory=list)
    final: np.ndarray | None = None
    attention: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    gates: dict[str, np.ndarray] = field(default_factory=dict)
    h_v: np.ndarray | None = None
    h_c: np.ndarray | None = None
    h_ct: np.ndarray | None = None
    h_s: np.ndarray | None = None


@dataclass
class ForwardResult:
    loss: ad.Tensor
    scores: np.ndarray  # (B, n_items); meaningful on the candidate mask only
    mask: np.ndarray
    state: ForwardState | None = None


def _gated(a: ad.Tensor, b: ad.Tensor, W: ad.Tensor, state: ForwardState | None, site: str) -> ad.Tensor:
    g = ad.sigmoid(ad.matmul(ad.concat([a, b], axis=1), W, trans_b=True))
    if state is not None:
        state.gates[site] = g.value
    return b + g * (a - b)


RELATION_KINDS = {
    "item_item": (ITEM, ITEM),
    "item_seq": (ITEM, ITEM),
    "cat_cat": (CATEGORY, CATEGORY),
    "item_to_cat": (ITEM, CATEGORY),
    "cat_to_item": (CATEGORY, ITEM),
    "item_to_tgt": (ITEM, TARGET),
    "tgt_to_item": (TARGET, ITEM),
}


def _propagate(h_src, h_dst, src, dst, segment, n_receivers, n_dst, W, a_dst, a_src, config, state, key):
    """Attention-weighted messages from ``src`` rows of ``h_src`` to ``dst`` rows of ``h_dst``.

    ``src``/``dst`` index within their node kinds; rows of ``h_dst`` with no
    incoming edge receive zero.
    """
    Wh = ad.matmul(h_src, W, trans_b=True)
    s_src = ad.matmul(Wh, a_src, trans_b=True)
    # a_dst . (W h_i) == (a_dst W) . h_i
    s_dst = ad.matmul(h_dst, ad.matmul(a_dst, W), trans_b=True)
    e = ad.leaky_relu(ad.gather_rows(s_dst, dst) + ad.gather_rows(s_src, src), config.leaky_slope)
    alpha = ad.segment_softmax(e, segment, n_receivers)
    if state is not None:
        state.attention[key] = (alpha.value.reshape(-1).copy(), segment)
    msg = ad.scatter_add_rows(alpha * ad.gather_rows(Wh, src), dst, n_dst)
    if config.message_activation == "none":
        return msg
    if n_receivers == n_dst:
        return ad.sigmoid(msg)
    mask = np.zeros((n_dst, 1))
    mask[dst] = 1.0
    return ad.sigmoid(msg) * mask


def candidate_groups(target_cat: np.ndarray, item_category: np.ndarray, domain: str = "category"):
    """Yield ``(example rows, sorted candidate items)`` per distinct target category."""
    if domain == "all":
        yield np.arange(len(target_cat)), np.arange(len(item_category))
        return
    for c in np.unique(target_cat):
        cands = np.flatnonzero(item_category == c)
        if cands.size == 0:
            raise EmptyCandidates(f"no candidates for target category {int(c)}")
        yield np.flatnonzero(target_cat == c), cands


def candidate_mask(target_cat: np.ndarray, item_category: np.ndarray, domain: str = "category") -> np.ndarray:
    if domain == "all":
        return np.ones((len(target_cat), len(item_category)), dtype=bool)
    mask = item_category[None, :] == target_cat[:, None]
    empty = ~mask.any(axis=1)
    if empty.any():
        raise EmptyCandidates(f"no candidates for target category {int(target_cat[np.argmax(empty)])}")
    return mask


def forward_batch(
    batch: GraphBatch,
    params: ModelParams,
    config: ModelConfig,
    item_category: np.ndarray,
    keep_state: bool = False,
) -> ForwardResult:
    """Loss (mean over the batch) and candidate scores for a collated batch."""
    state = ForwardState() if keep_state else None
    P = params
    B, NI, NC = batch.n_examples, batch.n_item_nodes, batch.n_cat_nodes

    rows = position_rows(batch, config.position_mode, config.max_prefix_len)
    x_items = ad.concat(
        [
            ad.gather_rows(P["item_table"], batch.item_index),
            ad.gather_rows(P["category_table"], batch.item_cat),
            ad.gather_rows(P["position_table"], rows),
        ],
        axis=1,
    )
    h_items = ad.matmul(x_items, P["enhance_proj"], trans_b=True)
    h0_cat = ad.gather_rows(P["category_table"], batch.cat_index) if NC else None
    if config.target_meanpool:
        counts = np.bincount(batch.item_example, minlength=B).astype(np.float64)
        h0_tgt = ad.scatter_add_rows(h_items, batch.item_example, B) * (1.0 / counts)[:, None]
    else:
        h0_tgt = ad.gather_rows(P["category_table"], batch.target_cat)
    if state is not None:
        state.h0 = np.concatenate([t.value for t in (h_items, h0_cat, h0_tgt) if t is not None], axis=0)

    offsets = {ITEM: 0, CATEGORY: NI, TARGET: NI + NC}
    h0_kind = {ITEM: h_items, TARGET: h0_tgt}
    if NC:
        h0_kind[CATEGORY] = h0_cat
    n_kind = {ITEM: NI, CATEGORY: NC, TARGET: B}
    h = dict(h0_kind)
    for layer in range(config.layers):
        nxt: dict[int, ad.Tensor] = {}
        for rel in config.relations():
            edges = batch.relations.get(rel)
            if edges is None or len(edges.src) == 0:
                continue
            sk, dk = RELATION_KINDS[rel]
            group = "shared" if config.share_relation_params else rel
            pre = f"layer{layer}.{group}"
            out = _propagate(
                h[sk], h[dk], edges.src - offsets[sk], edges.dst - offsets[dk], edges.segment,
                edges.n_segments, n_kind[dk], P[pre + ".W"], P[pre + ".a_dst"], P[pre + ".a_src"],
                config, state, (layer, rel),
            )
            nxt[dk] = out if dk not in nxt else nxt[dk] + out
        for k in h:
            if k not in nxt:  # kind without any incoming relation this layer
                nxt[k] = ad.constant(np.zeros((n_kind[k], config.dim)))
        h = nxt
        if state is not None:
            state.layers.append(np.concatenate([h[k].value for k in sorted(h)], axis=0))

    # per-kind gated skip between h0 and h^(L)
    sites = {ITEM: "skip_item", CATEGORY: "skip_category", TARGET: "skip_target"}
    finals = [_gated(h0_kind[k], h[k], P["gate." + sites[k]], state, sites[k]) for k in sorted(h0_kind)]
    H = ad.concat(finals, axis=0)
    if state is not None:
        state.final = H.value

    h_v = _gated(
        ad.gather_rows(H, batch.last_item), ad.gather_rows(H, batch.last_incat_item),
        P["gate.fuse_item"], state, "fuse_item",
    )
    if batch.has_categories and not config.no_category_nodes:
        h_c = _gated(
            ad.gather_rows(H, batch.last_cat), ad.gather_rows(H, batch.last_incat_cat),
            P["gate.fuse_category"], state, "fuse_category",
        )
    else:
        h_c = ad.constant(np.zeros((B, config.dim)))
    h_ct = ad.gather_rows(H, batch.target_nodes)
    if config.attention_readout:
        H_items = ad.slice_rows(H, 0, NI)
        logits = ad.sum(ad.gather_rows(h_ct, batch.item_example) * H_items, axis=1)
        beta = ad.segment_softmax(logits, batch.item_example, B)
        h_v = h_v + ad.scatter_add_rows(beta * H_items, batch.item_example, B)
    h_s = ad.matmul(ad.concat([h_v, h_c, h_ct], axis=1), P["session_proj"], trans_b=True)
    if state is not None:
        state.h_v, state.h_c, state.h_ct, state.h_s = h_v.value, h_c.value, h_ct.value, h_s.value

    scores = np.full((B, P["item_table"].shape[0]), -np.inf)
    labels = batch.labels
    total = None
    for rows, cands in candidate_groups(batch.target_cat, item_category, config.softmax_domain):
        S = ad.matmul(ad.gather_rows(h_s, rows), ad.gather_rows(P["item_table"], cands), trans_b=True)
        scores[rows[:, None], cands[None, :]] = S.value
        if labels is None:
            continue
        pos = np.searchsorted(cands, labels[rows])
        if np.any(pos >= len(cands)) or np.any(cands[np.minimum(pos, len(cands) - 1)] != labels[rows]):
            raise ValueError("label item outside its candidate set")
        onehot = np.zeros(S.shape)
        onehot[np.arange(len(rows)), pos] = 1.0
        if config.loss == "ce":
            term = ad.sum(ad.log_softmax_over_index_set(S) * onehot) * -1.0
        else:
            term = ad.sum(ad.bce_over_index_set(S, np.ones(S.shape, bool), onehot))
        total = term if total is None else total + term
    loss = ad.constant(np.asarray(0.0)) if total is None else total * (1.0 / B)
    mask = np.isfinite(scores)
    return ForwardResult(loss, scores, mask, state)


def forward(examples: Sequence, params: ModelParams, config: ModelConfig, item_category, keep_state=False):
    """Build, collate and run graphs for ``examples``."""
    graphs = [prepare_graph(ex, config) for ex in examples]
    batch = collate(graphs, labels=[ex.label_item for ex in examples])
    return forward_batch(batch, params, config, np.asarray(item_category), keep_state)


# checkpoints --------------------------------------------------------------------


def _flag_text(config: ModelConfig) -> str:
    return " ".join(f"{k}={v}" for k, v in asdict(config).items())


def _parse_flags(text: str) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    kwargs = {}
    for token in text.split():
        key, _, raw = token.partition("=")
        if key not in types:
            raise ValueError(f"unknown config key in checkpoint: {key}")
        if raw == "None":
            kwargs[key] = None
        elif raw in ("True", "False"):
            kwargs[key] = raw == "True"
        else:
            try:
                kwargs[key] = int(raw)
            except ValueError:
                try:
                    kwargs[key] = float(raw)
                except ValueError:
                    kwargs[key] = raw
    return ModelConfig(**kwargs)


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> None:
    """Text header with tensor records, then little-endian float64 payloads."""
    header = [
        CKPT_MAGIC,
        f"dims {config.dim} {config.dim} {config.position_dim} {config.dim}",
        f"layers {config.layers}",
        f"flags {_flag_text(config)}",
    ]
    for k, v in (extra or {}).items():
        header.append(f"meta {k} {v}")
    header.append(f"tensors {len(params)}")
    for name, t in params.items():
        header.append(f"tensor {name} {' '.join(str(s) for s in t.shape)}")
    header.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        for t in params.values():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig, dict[str, str]]:
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != CKPT_MAGIC:
            raise ValueError(f"{path}: not an {CKPT_MAGIC} checkpoint")
        config = None
        meta: dict[str, str] = {}
        records: list[tuple[str, tuple[int, ...]]] = []
        while True:
            line = fh.readline().decode().rstrip("\n")
            if not line:
                raise ValueError(f"{path}: truncated header")
            if line == "data":
                break
            key, _, rest = line.partition(" ")
            if key == "flags":
                config = _parse_flags(rest)
            elif key == "meta":
                mk, _, mv = rest.partition(" ")
                meta[mk] = mv
            elif key == "tensor":
                name, *dims = rest.split()
                records.append((name, tuple(int(d) for d in dims)))
        if config is None:
            raise ValueError(f"{path}: missing flags record")
        params = ModelParams()
        for name, shape in records:
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated payload for {name}")
            params[name] = ad.param(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64), name)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return params, config, meta


# plain-numpy oracle for the readout -------------------------------------------------


def reference_readout_scores(H: np.ndarray, batch: GraphBatch, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Straight-line recomputation of fusion, session embedding and scores from final node states."""
    p = {k: t.value for k, t in params.items()}

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    out = np.zeros((batch.n_examples, p["item_table"].shape[0]))
    for b in range(batch.n_examples):
        a, c = H[batch.last_item[b]], H[batch.last_incat_item[b]]
        g = sig(p["gate.fuse_item"] @ np.concatenate([a, c]))
        hv = g * a + (1 - g) * c
        if batch.has_categories and not config.no_category_nodes:
            a, c = H[batch.last_cat[b]], H[batch.last_incat_cat[b]]
            g = sig(p["gate.fuse_category"] @ np.concatenate([a, c]))
            hc = g * a + (1 - g) * c
        else:
            hc = np.zeros(config.dim)
        hct = H[batch.target_nodes[b]]
        if config.attention_readout:
            idx = np.flatnonzero(batch.item_example == b)
            logit = H[idx] @ hct
            w = np.exp(logit - logit.max())
            w /= w.sum()
            hv = hv + w @ H[idx]
        hs = p["session_proj"] @ np.concatenate([hv, hc, hct])
        out[b] = p["item_table"] @ hs
    return out
