"""Command line entry point: ``slowfast {pretrain,finetune,probe,grid,report}``.

Exit status: 0 on success, 1 on a configuration error, 2 on a numerical
failure (non-finite loss or gradient). The output root is ``--output``,
else ``$SLOWFAST_OUTPUT``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from ..numcore import CheckpointError, NumericalError
from .config import ConfigError, dump_config, load_config, replace_in
from .experiment import (GRID_AXES, collect_summaries, cached_pretrained, output_root, pretrain,
                         run_experiment, run_grid, run_probe_sweep)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("slowfast")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", "-c", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--output", "-o", help="output root (default: $SLOWFAST_OUTPUT or ./runs)")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slowfast", description="Slow/fast fine-tuning experiments on a synthetic benchmark")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("pretrain", help="masked-LM pre-training (cached by config hash)")
    _common(p)
    p.add_argument("--checkpoint", help="write the checkpoint here instead of the cache")
    p.add_argument("--force", action="store_true", help="re-train even if the cache has a checkpoint")

    p = sub.add_parser("finetune", help="fine-tune one method over all seeds")
    _common(p)
    p.add_argument("--method", help="shortcut for --set experiment.method=...")
    p.add_argument("--seeds", help="shortcut for --set experiment.seeds=...")

    p = sub.add_parser("probe", help="per-layer freeze / re-initialize sweep")
    _common(p)
    p.add_argument("--kind", choices=("freeze", "reinitialize"), required=True)
    p.add_argument("--layers", default="", help="e.g. 1-6 (default: every layer)")
    p.add_argument("--sublayers", default="", help="restrict to attention and/or feed_forward")

    p = sub.add_parser("grid", help="sweep one hyper-parameter")
    _common(p)
    p.add_argument("--axis", choices=GRID_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("report", help="tabulate every summary.json under the output root")
    p.add_argument("--output", "-o")
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


def _config(args, extra=()):
    return load_config(args.config, list(args.overrides) + list(extra))


def _cmd_pretrain(args, root):
    cfg = _config(args)
    if args.checkpoint:
        pretrain(cfg, args.checkpoint)
        print(args.checkpoint)
        return
    cache = os.path.join(root, "cache")
    path = os.path.join(cache, f"pretrained-{cfg.pretrain_key()}.ckpt")
    if args.force and os.path.exists(path):
        os.remove(path)
    cached_pretrained(cfg, cache)
    print(path)


def _cmd_finetune(args, root):
    extra = []
    if args.method:
        extra.append(f"experiment.method={args.method}")
    if args.seeds:
        extra.append(f"experiment.seeds={args.seeds}")
    cfg = _config(args, extra)
    out = cfg.output_dir or os.path.join(root, "finetune", cfg.method)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dump_config(cfg))
    s = run_experiment(cfg, out_dir=out, cache_dir=os.path.join(root, "cache"))
    print(f"{cfg.method}: source {s.mean['source']:.2f}  non-source {s.mean['non_source']:.2f}  "
          f"gap {s.mean['gap']:.2f} (+/- {s.std['gap']:.2f})  -> {out}")


def _layer_list(raw, num_layers):
    from .experiment import _parse_layers
    return _parse_layers(raw, num_layers) or list(range(1, num_layers + 1))


def _cmd_probe(args, root):
    cfg = _config(args)
    pre = cached_pretrained(cfg, os.path.join(root, "cache"))
    out = os.path.join(root, "probe", args.kind + (f"-{args.sublayers}" if args.sublayers else ""))
    rows = run_probe_sweep(cfg, args.kind, _layer_list(args.layers, cfg.model.num_layers), pretrained=pre,
                           out_dir=out, sublayers=args.sublayers)
    print("layer  kind          source  non_source    gap")
    for layer, kind, src, ns, gap in rows:
        print(f"{layer:>5}  {kind:<12} {src:7.2f}  {ns:10.2f} {gap:6.2f}")


def _cmd_grid(args, root):
    cfg = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        values = [int(v) if args.axis in ("r_exp", "M") else float(v) for v in values]
    except ValueError:
        raise ConfigError(f"--values: cannot parse {args.values!r} for axis {args.axis}") from None
    pre = cached_pretrained(cfg, os.path.join(root, "cache"))
    rows = run_grid(cfg, args.axis, values, pretrained=pre, out_dir=os.path.join(root, "grid", args.axis))
    for axis, value, method, src, ns, gap, gap_std in rows:
        print(f"{axis}={value}: source {src:.2f}  non-source {ns:.2f}  gap {gap:.2f} (+/- {gap_std:.2f})")


def _cmd_report(args, root):
    found = collect_summaries(root)
    if not found:
        print(f"no summary.json under {root}")
        return
    print(f"{'run':<40} {'method':<14} {'seeds':>5} {'source':>7} {'non_src':>8} {'gap':>7}")
    for rel, s in found:
        print(f"{rel:<40} {s.method:<14} {len(s.seeds):>5} {s.mean['source']:7.2f} "
              f"{s.mean['non_source']:8.2f} {s.mean['gap']:7.2f}")


COMMANDS = {"pretrain": _cmd_pretrain, "finetune": _cmd_finetune, "probe": _cmd_probe,
            "grid": _cmd_grid, "report": _cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = output_root(args.output)
    try:
        COMMANDS[args.command](args, root)
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
