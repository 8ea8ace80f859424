"""Command-line entry point: ``aptmtl run|sweep-beta|pareto-check|diag|export-plot``.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import ConfigError, InvalidInputError, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _cmd_run(args) -> int:
    cfg = harness.RunConfig.load(args.config)
    res = harness.run(cfg, out_dir=args.out)
    sys.stdout.write(harness.summary_csv(res.summary))
    print(f"trajectory: {res.trajectory}", file=sys.stderr)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = harness.RunConfig.load(args.config)
    out = harness.output_dir(cfg, args.out)
    table = harness.sweep_beta(cfg, _csv_list(args.betas), _csv_list(args.seeds),
                               out_dir=out, jobs=args.jobs)
    sys.stdout.write(harness.sweep_csv(table))
    return EXIT_OK


def _cmd_pareto(args) -> int:
    verdicts = harness.pareto_check(args.trajectory, args.tol)
    for run_id, v in verdicts.items():
        state = "reached" if v["reached"] else "not-reached"
        if v["aborted"]:
            state += " (aborted)"
        print(f"{run_id}\t{v['min_norm']:.6e}\t{state}")
    return EXIT_OK


def _cmd_diag(args) -> int:
    rows = harness.summarize(harness.read_trajectory(args.trajectory))
    sys.stdout.write(harness.summary_csv(rows))
    return EXIT_OK


def _cmd_export(args) -> int:
    sys.stdout.write(harness.export_series(args.trajectory, args.what))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aptmtl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help=f"output directory (else ${harness.OUTPUT_ENV}, config, ./runs)")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep-beta", help="sweep static beta1 over aggregators x optimizers x seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--betas", required=True, help="comma list, e.g. default,0.6,0.2,0.0")
    s.add_argument("--seeds", required=True, help="comma list, e.g. 1,2,3")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    c = sub.add_parser("pareto-check", help="Pareto-stationarity verdict per initialization")
    c.add_argument("--trajectory", required=True)
    c.add_argument("--tol", type=float, required=True)
    c.set_defaults(func=_cmd_pareto)

    d = sub.add_parser("diag", help="re-derive summary rows from a trajectory")
    d.add_argument("--trajectory", required=True)
    d.set_defaults(func=_cmd_diag)

    e = sub.add_parser("export-plot", help="emit CSV series for plotting")
    e.add_argument("--trajectory", required=True)
    e.add_argument("--what", required=True, choices=["cos", "proj", "erank", "traj"])
    e.set_defaults(func=_cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except InvalidInputError as e:
        # bad values that survive config parsing surface mid-run as numerics
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
