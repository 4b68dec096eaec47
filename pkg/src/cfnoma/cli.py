"""Command-line entry point: ``cfnoma {generate,train,evaluate,compare,sweep,export-plots}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    over = list(args.override or [])
    if args.seed is not None:
        over.append(f"seed={args.seed}")
    if args.out is not None:
        over.append(f"out={json.dumps(args.out)}")
    if getattr(args, "method", None):
        over.append(f"method={json.dumps(args.method)}")
    return cfg.with_overrides(over)


def cmd_generate(cfg, args):
    paths = harness.generate(cfg)
    for k, p in paths.items():
        print(f"{k}\t{p}")


def cmd_train(cfg, args):
    print(harness.train(cfg))


def cmd_evaluate(cfg, args):
    res = harness.evaluate(cfg, checkpoint=args.checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_table([res], out / "results.csv")
    (out / f"result_{res.method}.json").write_text(json.dumps(res.to_dict(), indent=2))
    print(json.dumps(res.aggregate, indent=2))


def cmd_compare(cfg, args):
    res = harness.compare(cfg)
    for r in res:
        a = r.aggregate
        print(f"{r.method:20s} {a['sum_rate']:8.3f} bps/Hz  {a['overhead_kbit']:8.3f} Kbit")


def cmd_sweep(cfg, args):
    vals = [float(v) for v in args.values.split(",")] if args.values else None
    for c, r in harness.sweep(cfg, vals):
        print(f"corr_D={c:g}\t{r.method}\t{r.aggregate['sum_rate']:.3f}")


def cmd_export(cfg, args):
    for p in harness.export_plots(cfg.out):
        print(p)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "export-plots": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfnoma", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--method", choices=harness.METHODS)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted keys reach nested sections, e.g. network.K=3")
        if name == "evaluate":
            p.add_argument("--checkpoint")
        if name == "sweep":
            p.add_argument("--values", help="comma-separated corr_D values")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
