"""Command-line entry point: ``msmatch <verb> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as X

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _config(ref, args) -> X.ExperimentConfig:
    cfg = X.load_config(ref)
    if getattr(args, "seeds", None):
        cfg = cfg.replace(split=X.dataclasses.replace(cfg.split, seeds=tuple(args.seeds)))
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args.config, args)
    res = X.run_train(cfg, args.output)
    for seed, rep in sorted(res.reports.items()):
        print(f"seed {seed}: accuracy {rep.accuracy:.2f}")
    if res.aggregate is not None:
        print(f"mean accuracy {res.aggregate.accuracy:.2f} ± {res.aggregate.std['accuracy']:.2f} "
              f"over {res.aggregate.n_seeds} seed(s)")
    print(f"run directory: {res.run_dir}")
    if res.failures:
        print(str(X.RunFailed(res.failures)), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    rep = X.evaluate_run(args.run)
    if args.out:
        rep.save_json(args.out)
    print(f"accuracy {rep.accuracy:.2f}")
    for row in rep.per_class:
        print(f"  {row['class']:<24} P {row['precision']:6.2f}  R {row['recall']:6.2f}  F1 {row['f1']:6.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args.config, args)
    table = X.run_sweep(cfg, args.axis, args.values, args.output)
    for v, cell in zip(table.values, table.cells()):
        print(f"{args.axis}={v}: {cell}")
    if table.failures:
        for v, msg in table.failures.items():
            print(f"{args.axis}={v} failed: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    rep = X.run_report(args.runs, args.out)
    for g in rep.groups:
        line = f"{g.config['name']} [{g.config_hash}] {g.aggregate.accuracy:.2f} ± {g.aggregate.std['accuracy']:.2f}"
        if g.target_accuracy is not None:
            line += f"  (target {g.target_accuracy:.2f})"
        print(line)
    if rep.duplicates:
        print(f"skipped {rep.duplicates} duplicate run(s)")
    print(f"wrote {len(rep.files)} file(s) to {args.out}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    written = X.saliency_for_run(args.run, args.ids, args.out, args.target)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = X.load_config(args.config)
    if not args.skip_paths:
        cfg.validate_paths()
    if args.render:
        sys.stdout.write(cfg.render())
    print(f"ok {cfg.name} hash={cfg.config_hash()}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in X.list_presets():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("config", help="config file or preset name")
    t.add_argument("--output", help="override output_dir")
    t.add_argument("--seeds", type=int, nargs="+")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a finished seed directory")
    e.add_argument("run", help="runs/<hash>/<seed>")
    e.add_argument("--out", help="write the report JSON here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one run per axis value")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=X.SWEEP_AXES)
    s.add_argument("--values", required=True, nargs="+")
    s.add_argument("--output")
    s.add_argument("--seeds", type=int, nargs="+")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="merge finished runs into tables and figures")
    r.add_argument("runs", nargs="+", help="run or seed directories")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("saliency", help="guided-backprop maps for chosen samples")
    g.add_argument("run", help="runs/<hash>/<seed>")
    g.add_argument("--ids", nargs="+", required=True)
    g.add_argument("--target", default="pred", help="'pred', 'true' or a class index")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_saliency)

    v = sub.add_parser("validate-config", help="parse and check a config")
    v.add_argument("config")
    v.add_argument("--render", action="store_true", help="print the normalized config")
    v.add_argument("--skip-paths", action="store_true", help="do not require the data root to exist")
    v.set_defaults(func=cmd_validate)

    ls = sub.add_parser("presets", help="list shipped presets")
    ls.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad arguments already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.verb == "saliency" and args.target not in ("pred", "true"):
        try:
            int(args.target)
        except ValueError:
            print(f"invalid --target {args.target!r}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except X.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except X.RunFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
