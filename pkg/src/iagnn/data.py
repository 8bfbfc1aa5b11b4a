"""Interaction-log ingestion, filtering, augmentation, splitting and I/O."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EXAMPLES_MAGIC = "IAGNN-EX"
EXAMPLES_VERSION = "v1"
MAX_PREFIX_LEN = 50
SEPARATORS = {"comma": ",", "tab": "\t"}


class DataError(ValueError):
    """Raised for unusable input data (exit code 2 at the CLI)."""


@dataclass
class RawSession:
    session_id: str
    events: list[tuple[str, str, int]]  # (item_id, category_id, timestamp)

    @property
    def items(self) -> list[str]:
        return [e[0] for e in self.events]

    @property
    def categories(self) -> list[str]:
        return [e[1] for e in self.events]


@dataclass(frozen=True)
class Example:
    prefix_items: tuple
    prefix_categories: tuple
    target_category: object
    label_item: object
    session_id: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.prefix_items) < 1:
            raise DataError("example prefix must be non-empty")
        if len(self.prefix_items) != len(self.prefix_categories):
            raise DataError("prefix items and categories differ in length")


@dataclass
class Vocabulary:
    item_to_index: dict[str, int]
    category_to_index: dict[str, int]
    item_category: dict[int, int]
    candidates_by_category: dict[int, list[int]]

    @classmethod
    def from_items(cls, item_categories: dict[str, str]) -> "Vocabulary":
        """Index items (sorted by id) and categories (sorted by id)."""
        cats = sorted(set(item_categories.values()))
        category_to_index = {c: i for i, c in enumerate(cats)}
        item_to_index = {v: i for i, v in enumerate(sorted(item_categories))}
        item_category = {item_to_index[v]: category_to_index[c] for v, c in item_categories.items()}
        return cls.from_index_maps(item_to_index, category_to_index, item_category)

    @classmethod
    def from_index_maps(cls, item_to_index, category_to_index, item_category) -> "Vocabulary":
        cands: dict[int, list[int]] = {c: [] for c in category_to_index.values()}
        for v in sorted(item_category):
            cands[item_category[v]].append(v)
        return cls(dict(item_to_index), dict(category_to_index), dict(item_category), cands)

    @property
    def n_items(self) -> int:
        return len(self.item_to_index)

    @property
    def n_categories(self) -> int:
        return len(self.category_to_index)

    def item_category_array(self) -> np.ndarray:
        out = np.empty(self.n_items, dtype=np.int64)
        for v, c in self.item_category.items():
            out[v] = c
        return out

    def candidate_sizes(self) -> np.ndarray:
        return np.bincount(self.item_category_array(), minlength=self.n_categories)


# parsing ---------------------------------------------------------------------


@dataclass
class ParseResult:
    sessions: list[RawSession]
    malformed_count: int = 0
    total_lines: int = 0


def parse_interactions(lines: Iterable[str], sep: str = ",", max_bad_fraction: float = 0.5) -> ParseResult:
    """Group ``session,item,category,timestamp`` lines into sessions.

    ``sep`` is either a literal separator or one of ``comma``/``tab``.
    Malformed lines (wrong field count, non-integer timestamp) are skipped
    and counted; more than half malformed is fatal.  Events are ordered by
    timestamp with ties kept in file order.
    """
    sep = SEPARATORS.get(sep, sep)
    grouped: dict[str, list[tuple[int, int, str, str]]] = defaultdict(list)
    bad: list[tuple[int, str]] = []
    total = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        total += 1
        parts = line.split(sep)
        if len(parts) != 4 or not all(p.strip() for p in parts[:3]):
            bad.append((lineno, line))
            continue
        sid, item, cat, ts = (p.strip() for p in parts)
        try:
            stamp = int(ts)
        except ValueError:
            bad.append((lineno, line))
            continue
        grouped[sid].append((stamp, lineno, item, cat))
    if total and len(bad) > max_bad_fraction * total:
        samples = "; ".join(f"line {n}: {text[:60]!r}" for n, text in bad[:3])
        raise DataError(f"{len(bad)} of {total} lines are malformed (e.g. {samples})")
    sessions = []
    for sid in sorted(grouped):
        events = sorted(grouped[sid])
        sessions.append(RawSession(sid, [(item, cat, stamp) for stamp, _, item, cat in events]))
    return ParseResult(sessions, len(bad), total)


def read_interactions(path: str | Path, sep: str = ",") -> ParseResult:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_interactions(fh, sep)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def most_recent_fraction(sessions: Sequence[RawSession], fraction: float) -> list[RawSession]:
    """Keep the most recent ``fraction`` of sessions, ordered by last timestamp."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(sessions)
    order = sorted(sessions, key=lambda s: (s.events[-1][2], s.session_id))
    keep = math.ceil(fraction * len(order))
    kept = {s.session_id for s in order[len(order) - keep:]}
    return [s for s in sessions if s.session_id in kept]


def canonical_categories(sessions: Sequence[RawSession]) -> dict[str, str]:
    """Map every item to its most frequent category (ties: first seen)."""
    counts: dict[str, Counter] = defaultdict(Counter)
    first: dict[tuple[str, str], int] = {}
    n = 0
    for s in sessions:
        for item, cat, _ in s.events:
            counts[item][cat] += 1
            first.setdefault((item, cat), n)
            n += 1
    return {
        item: min(cnt, key=lambda c: (-cnt[c], first[(item, c)]))
        for item, cnt in counts.items()
    }


def _recategorise(sessions: Sequence[RawSession], mapping: dict[str, str]) -> list[RawSession]:
    return [RawSession(s.session_id, [(v, mapping[v], t) for v, _, t in s.events]) for s in sessions]


# filtering / augmentation ------------------------------------------------------


def filter_sessions(
    sessions: Sequence[RawSession], min_occurrence: int = 5, min_session_len: int = 3
) -> list[RawSession]:
    """Alternate item-frequency and session-length filters until nothing changes."""
    current = list(sessions)
    while True:
        freq = Counter(v for s in current for v in s.items)
        rare = {v for v, n in freq.items() if n < min_occurrence}
        nxt = []
        for s in current:
            events = [e for e in s.events if e[0] not in rare] if rare else s.events
            if len(events) >= min_session_len:
                nxt.append(RawSession(s.session_id, events))
        if not rare and len(nxt) == len(current):
            return nxt
        current = nxt


def augment_sessions(sessions: Sequence[RawSession], max_prefix_len: int = MAX_PREFIX_LEN) -> list[Example]:
    """One example per label position ``i >= 2``; prefixes keep the last ``max_prefix_len`` events."""
    out = []
    for s in sessions:
        items, cats = s.items, s.categories
        for i in range(1, len(items)):
            lo = max(0, i - max_prefix_len)
            out.append(
                Example(tuple(items[lo:i]), tuple(cats[lo:i]), cats[i], items[i], s.session_id)
            )
    return out


def index_examples(examples: Iterable[Example], vocab: Vocabulary) -> tuple[list[Example], int]:
    """Map string ids to indices; examples touching unknown items are dropped.

    Returns ``(indexed, n_dropped)``.
    """
    out, dropped = [], 0
    iti, cti = vocab.item_to_index, vocab.category_to_index
    for ex in examples:
        try:
            items = tuple(iti[v] for v in ex.prefix_items)
            label = iti[ex.label_item]
        except KeyError:
            dropped += 1
            continue
        cats = tuple(vocab.item_category[v] for v in items)
        target = cti.get(ex.target_category)
        if target is None or vocab.item_category[label] != target:
            dropped += 1
            continue
        out.append(Example(items, cats, target, label, ex.session_id))
    return out, dropped


def filter_and_index(
    sessions: Sequence[RawSession], min_occurrence: int = 5, min_session_len: int = 3
) -> tuple[Vocabulary, list[Example]]:
    """Filter to fixpoint, augment, and index with a vocabulary over all kept sessions.

    :func:`preprocess` is the leakage-free pipeline (vocabulary from the
    training split only); this helper covers the single-corpus case.
    """
    kept = filter_sessions(sessions, min_occurrence, min_session_len)
    if not kept:
        raise DataError(f"no sessions survive filtering ({len(sessions)} sessions in input)")
    mapping = canonical_categories(kept)
    kept = _recategorise(kept, mapping)
    vocab = Vocabulary.from_items(mapping)
    examples, _ = index_examples(augment_sessions(kept), vocab)
    return vocab, examples


# splitting -------------------------------------------------------------------


def split_sessions(
    sessions: Sequence[RawSession], ratios: Sequence[int] = (8, 1, 1), seed: int = 0
) -> tuple[list[RawSession], list[RawSession], list[RawSession]]:
    """Seeded shuffle of sessions, then contiguous cuts by ``ratios``."""
    if len(sessions) < 10:
        raise DataError(f"need at least 10 sessions to split, got {len(sessions)}")
    ordered = sorted(sessions, key=lambda s: s.session_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    total = float(np.sum(ratios))
    n = len(ordered)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    parts = [ordered[i] for i in perm]
    return parts[:n_train], parts[n_train:n_train + n_val], parts[n_train + n_val:]


def split_dataset(
    examples: Sequence[Example], ratios: Sequence[int] = (8, 1, 1), seed: int = 0
) -> tuple[list[Example], list[Example], list[Example]]:
    """Session-level split of already augmented examples."""
    by_session: dict[str, list[Example]] = defaultdict(list)
    for ex in examples:
        by_session[ex.session_id].append(ex)
    ids = sorted(by_session)
    if len(ids) < 10:
        raise DataError(f"need at least 10 sessions to split, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    total = float(np.sum(ratios))
    n_train = int(round(len(ids) * ratios[0] / total))
    n_val = int(round(len(ids) * ratios[1] / total))
    shuffled = [ids[i] for i in perm]
    cuts = (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])
    return tuple([ex for sid in part for ex in by_session[sid]] for part in cuts)  # type: ignore[return-value]


# full pipeline -------------------------------------------------------------------


@dataclass
class PreprocessResult:
    vocab: Vocabulary
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    sessions: list[RawSession]
    dropped: dict[str, int]
    malformed: int = 0


def preprocess(
    sessions: Sequence[RawSession],
    min_occurrence: int = 5,
    min_session_len: int = 3,
    ratios: Sequence[int] = (8, 1, 1),
    seed: int = 0,
    fraction: float = 1.0,
    max_prefix_len: int = MAX_PREFIX_LEN,
) -> PreprocessResult:
    """Fraction -> filter to fixpoint -> session split -> train vocabulary -> augment -> index."""
    sessions = most_recent_fraction(sessions, fraction)
    kept = filter_sessions(sessions, min_occurrence, min_session_len)
    if not kept:
        raise DataError(f"no sessions survive filtering ({len(sessions)} sessions in input)")
    mapping = canonical_categories(kept)
    kept = _recategorise(kept, mapping)
    train_s, val_s, test_s = split_sessions(kept, ratios, seed)
    train_items = {v for s in train_s for v in s.items}
    vocab = Vocabulary.from_items({v: mapping[v] for v in train_items})
    dropped = {}
    splits = []
    for name, part in (("train", train_s), ("valid", val_s), ("test", test_s)):
        exs, n_drop = index_examples(augment_sessions(part, max_prefix_len), vocab)
        dropped[name] = n_drop
        splits.append(exs)
    if not splits[0]:
        raise DataError("training split is empty after preprocessing")
    return PreprocessResult(vocab, splits[0], splits[1], splits[2], kept, dropped)


def dataset_stats(sessions: Sequence[RawSession]) -> dict[str, float]:
    """Corpus statistics in the usual table layout."""
    n = len(sessions)
    items = {v for s in sessions for v in s.items}
    cats = {c for s in sessions for c in s.categories}
    return {
        "items": len(items),
        "sessions": n,
        "avg_session_length": (sum(len(s.events) for s in sessions) / n) if n else 0.0,
        "categories": len(cats),
        "avg_categories_per_session": (sum(len(set(s.categories)) for s in sessions) / n) if n else 0.0,
    }


# file formats ----------------------------------------------------------------------


def _fmt(seq) -> str:
    return " ".join(str(int(x)) for x in seq)


def write_examples(path: str | Path, examples: Sequence[Example], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{EXAMPLES_MAGIC} {EXAMPLES_VERSION} {vocab.n_items} {vocab.n_categories}\n")
        for ex in examples:
            fh.write(
                f"{_fmt(ex.prefix_items)}|{_fmt(ex.prefix_categories)}|"
                f"{int(ex.target_category)}|{int(ex.label_item)}\n"
            )


def read_examples(path: str | Path) -> tuple[list[Example], int, int]:
    """Returns ``(examples, n_items, n_categories)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != EXAMPLES_MAGIC:
            raise DataError(f"{path}: not an examples file")
        if header[1] != EXAMPLES_VERSION:
            raise DataError(f"{path}: unsupported version {header[1]!r} (expected {EXAMPLES_VERSION})")
        n_items, n_cats = int(header[2]), int(header[3])
        out = []
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                pi, pc, tc, lab = line.split("|")
                ex = Example(
                    tuple(int(x) for x in pi.split()),
                    tuple(int(x) for x in pc.split()),
                    int(tc),
                    int(lab),
                )
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}: corrupted record at line {lineno}: {exc}") from None
            out.append(ex)
    return out, n_items, n_cats


def write_vocabulary(path: str | Path, vocab: Vocabulary) -> None:
    """Sidecar: ``category <idx> <id>`` and ``item <idx> <id> <category idx>`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cid, idx in sorted(vocab.category_to_index.items(), key=lambda kv: kv[1]):
            fh.write(f"category\t{idx}\t{cid}\n")
        for vid, idx in sorted(vocab.item_to_index.items(), key=lambda kv: kv[1]):
            fh.write(f"item\t{idx}\t{vid}\t{vocab.item_category[idx]}\n")


def read_vocabulary(path: str | Path) -> Vocabulary:
    items, cats, item_cat = {}, {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "category" and len(parts) == 3:
                cats[parts[2]] = int(parts[1])
            elif parts[0] == "item" and len(parts) == 4:
                items[parts[2]] = int(parts[1])
                item_cat[int(parts[1])] = int(parts[3])
            elif parts != [""]:
                raise DataError(f"{path}: bad vocabulary line {lineno}")
    return Vocabulary.from_index_maps(items, cats, item_cat)


def load_dataset(data_dir: str | Path) -> tuple[Vocabulary, dict[str, list[Example]]]:
    data_dir = Path(data_dir)
    vocab_path = data_dir / "vocab.tsv"
    if not vocab_path.exists():
        raise DataError(f"missing vocabulary file {vocab_path}")
    vocab = read_vocabulary(vocab_path)
    splits = {}
    for name in ("train", "valid", "test"):
        path = data_dir / f"{name}.txt"
        if not path.exists():
            raise DataError(f"missing examples file {path}")
        splits[name], n_items, n_cats = read_examples(path)
        if (n_items, n_cats) != (vocab.n_items, vocab.n_categories):
            raise DataError(f"{path}: header sizes disagree with vocabulary")
    return vocab, splits


def save_dataset(out_dir: str | Path, result: PreprocessResult) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vocabulary(out_dir / "vocab.tsv", result.vocab)
    for name in ("train", "valid", "test"):
        write_examples(out_dir / f"{name}.txt", getattr(result, name), result.vocab)
