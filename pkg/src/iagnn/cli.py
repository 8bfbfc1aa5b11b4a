"""``iagnn`` command line: preprocess, train, evaluate, gradcheck, ablate, grid."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig, coerce, load_config, load_grid_spec
from .data import DataError, Example, dataset_stats, load_dataset, preprocess, read_interactions, save_dataset
from .evaluate import MetricsReport, evaluate, evaluate_scorer, popularity_baseline
from .model import forward, init_params, load_checkpoint, save_checkpoint
from .synth import generate_interactions, write_interactions
from .trainer import NumericFailure, depth_curve, grid_search, grid_table, train_from_scratch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("iagnn")

ABLATIONS = (
    ("IAGNN", {}),
    ("w/o category nodes", {"no_category_nodes": True}),
    ("w/o target category info", {"target_meanpool": True}),
    ("w/o category transition", {"no_category_transition": True}),
    ("add item transition", {"add_original_item_transition": True}),
    ("add attention", {"attention_readout": True}),
    ("positive position", {"position_mode": "positive"}),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out(text: str = "") -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _write(path: str | None, text: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _config(args, **extra) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "deterministic": True if getattr(args, "deterministic", False) else None,
        "data_dir": getattr(args, "data_dir", None),
    }
    for item in getattr(args, "set", None) or []:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = coerce(key.strip(), raw)
    overrides.update(extra)
    cfg = load_config(getattr(args, "config", None), overrides)
    sys.stderr.write("# effective config\n" + cfg.to_text())
    return cfg


def report_text(reports: dict[str, MetricsReport]) -> str:
    blocks = [rep.table(split) for split, rep in reports.items()]
    records = [line for split, rep in reports.items() for line in rep.as_records(split)]
    return "\n".join(blocks) + "\n\n" + "\n".join(records) + "\n"


# commands --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    rows = generate_interactions(
        n_sessions=args.sessions, n_items=args.items, n_categories=args.categories, seed=args.seed
    )
    write_interactions(args.out, rows, sep="," if args.sep == "comma" else "\t")
    _out(f"wrote {len(rows)} interactions from {args.sessions} sessions to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args, input=args.input, sep=args.sep, fraction=args.fraction)
    if not cfg.input:
        raise UsageError("preprocess needs --input")
    parsed = read_interactions(cfg.input, cfg.separator)
    res = preprocess(
        parsed.sessions,
        min_occurrence=cfg.min_occurrence,
        min_session_len=cfg.min_session_len,
        seed=cfg.split_seed,
        fraction=cfg.fraction,
        max_prefix_len=cfg.max_prefix_len,
    )
    save_dataset(args.out_dir, res)
    stats = dataset_stats(res.sessions)
    _out(f"{'items':>10s}{'sessions':>10s}{'avg.len':>10s}{'cats':>8s}{'avg.cats':>10s}")
    _out(
        f"{stats['items']:10d}{stats['sessions']:10d}{stats['avg_session_length']:10.2f}"
        f"{stats['categories']:8d}{stats['avg_categories_per_session']:10.2f}"
    )
    _out(
        f"examples train={len(res.train)} valid={len(res.valid)} test={len(res.test)}"
        f" malformed_lines={parsed.malformed_count}"
        f" dropped_oov valid={res.dropped['valid']} test={res.dropped['test']}"
    )
    return EXIT_OK


def _load(cfg: RunConfig):
    if not cfg.data_dir:
        raise UsageError("this command needs --data-dir")
    vocab, splits = load_dataset(cfg.data_dir)
    return vocab, splits, vocab.item_category_array()


def cmd_train(args) -> int:
    cfg = _config(args)
    vocab, splits, ic = _load(cfg)
    tcfg = cfg.train_config()
    res = train_from_scratch(splits["train"], splits["valid"], vocab.n_items, vocab.n_categories, ic, tcfg)
    history = res.history_text()
    _out(history)
    _write(args.history, history)
    if args.out:
        save_checkpoint(args.out, res.params, tcfg.model, {"best_epoch": res.best_epoch, "seed": cfg.seed})
    reports = {
        "valid": res.best_val,
        "test": evaluate(res.params, splits["test"], tcfg.model, ic, workers=cfg.effective_workers),
    }
    text = report_text(reports)
    _out(text)
    _write(args.report, text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not Path(args.checkpoint).exists():
        raise DataError(f"missing checkpoint {args.checkpoint}")
    try:
        params, mcfg, _ = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    vocab, splits, ic = _load(cfg)
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split}")
    rep = evaluate(params, splits[args.split], mcfg, ic, workers=cfg.effective_workers)
    text = report_text({args.split: rep})
    _out(text)
    _write(args.report, text)
    return EXIT_OK


def toy_examples(n_items: int = 12, n_categories: int = 4, n: int = 3, seed: int = 0):
    """Random examples over a small vocabulary whose target category never
    matches the last clicked item, so both fusion gates carry gradient.
    Even-indexed examples also contain the target category in the prefix."""
    rng = np.random.default_rng(seed)
    ic = np.arange(n_items) % n_categories
    out = []
    for k in range(n):
        length = int(rng.integers(3, 7))
        items = [int(v) for v in rng.integers(0, n_items, length)]
        last_cat = ic[items[-1]]
        tc = int((last_cat + 1 + rng.integers(0, n_categories - 1)) % n_categories)
        if k % 2 == 0:
            items[0] = int(rng.choice(np.flatnonzero(ic == tc)))
        else:
            items = [v if ic[v] != tc else items[-1] for v in items]
        label = int(rng.choice(np.flatnonzero(ic == tc)))
        out.append(Example(tuple(items), tuple(int(ic[v]) for v in items), tc, label))
    return out, ic


def gradient_check(cfg: RunConfig, tol: float = 1e-4) -> ad.GradCheckReport:
    mcfg = cfg.model_config()
    examples, ic = toy_examples(seed=cfg.seed)
    params = init_params(cfg.seed, len(ic), int(ic.max()) + 1, mcfg)
    return ad.finite_difference_check(lambda: forward(examples, params, mcfg, ic).loss, params, tol_rel=tol, seed=cfg.seed)


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    rep = gradient_check(cfg, args.tol)
    _out(rep.summary())
    _out(f"overall max_rel_err={max(rep.max_rel_error.values()):.3e} tol={args.tol:g} {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def _table(head: list[str], rows: list[list[str]], first: int = 28) -> str:
    lines = [f"{head[0]:<{first}s}" + "".join(f"{h:>10s}" for h in head[1:])]
    lines += [f"{r[0]:<{first}s}" + "".join(f"{c:>10s}" for c in r[1:]) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _config(args)
    vocab, splits, ic = _load(cfg)
    rows = []
    for name, flags in ABLATIONS:
        tcfg = cfg.train_config()
        tcfg = replace(tcfg, model=replace(tcfg.model, **flags))
        res = train_from_scratch(splits["train"], splits["valid"], vocab.n_items, vocab.n_categories, ic, tcfg)
        rep = evaluate(res.params, splits["test"], tcfg.model, ic, workers=cfg.effective_workers)
        rows.append([name] + [f"{100 * v:.2f}" for v in (rep.precision[10], rep.precision[20], rep.mrr[10], rep.mrr[20])])
        log.info("ablation %s done", name)
    text = _table(["configuration", "P@10", "P@20", "mrr@10", "mrr@20"], rows)
    _out(text)
    _write(args.report, text)
    return EXIT_OK


def depth_note(curve: dict[int, float]) -> str:
    """Whether validation mrr@20 falls once depth exceeds four layers, and where it peaks."""
    deep = [L for L in curve if L > 4]
    shallow = [L for L in curve if L <= 4]
    if not deep or not shallow:
        return "depth trend: not enough depths to judge decline beyond L=4"
    ref = curve[max(shallow)]
    declined = all(curve[L] < ref for L in deep)
    peak = max(curve, key=curve.get)
    return (
        f"depth trend: peak at L={peak} ({'near' if 3 <= peak <= 4 else 'not near'} L=4); "
        f"decline beyond L={max(shallow)} {'observed' if declined else 'not observed'}"
    )


def cmd_grid(args) -> int:
    cfg = _config(args)
    vocab, splits, ic = _load(cfg)
    spec = load_grid_spec(args.grid_spec)
    rows = grid_search(
        splits["train"],
        splits["valid"],
        vocab.n_items,
        vocab.n_categories,
        ic,
        cfg.train_config(),
        learning_rates=spec.learning_rates,
        decay_steps=spec.decay_steps,
        layers=spec.layers,
        subsample=spec.subsample or None,
    )
    curve = depth_curve(rows)
    text = grid_table(rows) + "\nL\tbest_val_mrr@20\n"
    text += "".join(f"{L}\t{v:.4f}\n" for L, v in curve.items())
    text += depth_note(curve) + "\n"
    _out(text)
    _write(args.report, text)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    vocab, splits, ic = _load(cfg)
    rep = evaluate_scorer(popularity_baseline(splits["train"], vocab.n_items), splits[args.split], ic)
    _out(report_text({args.split: rep}))
    return EXIT_OK


# parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iagnn", description="Category-aware session recommendation with an intention adaptive GNN.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--deterministic", action="store_true")
        if data:
            sp.add_argument("--data-dir")

    sp = sub.add_parser("synth", help="write a synthetic interaction log")
    sp.add_argument("--out", required=True)
    sp.add_argument("--sessions", type=int, default=1000)
    sp.add_argument("--items", type=int, default=1000)
    sp.add_argument("--categories", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sep", choices=("comma", "tab"), default="comma")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="parse, filter, split and augment an interaction log")
    common(sp, data=False)
    sp.add_argument("--input")
    sp.add_argument("--sep", choices=("comma", "tab"))
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train, save a checkpoint and report test metrics")
    common(sp)
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--history", help="tab-separated per-epoch history file")
    sp.add_argument("--report", help="metrics report file")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter tensor")
    common(sp, data=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and compare the seven ablation configurations")
    common(sp)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("grid", help="grid search over learning rate, decay step and depth")
    common(sp)
    sp.add_argument("--grid-spec", required=True)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("baseline", help="evaluate the in-category popularity ranker")
    common(sp)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
        )
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"iagnn: error: {exc}\n")
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        sys.stderr.write(f"iagnn: data error: {exc}\n")
        return EXIT_DATA
    except (NumericFailure, ad.NumericError, FloatingPointError) as exc:
        sys.stderr.write(f"iagnn: numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
