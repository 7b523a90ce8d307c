"""``dbcd`` command line: run, sweep, simulate, oracle-check, gen-data.

Exit codes: 0 success, 2 config error, 3 oracle failure, 4 runtime error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from dbcd.config import ConfigError, dump_config, parse_config, parse_value

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("dbcd")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="JSON experiment config")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, help="set data, init and graph seeds at once")
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-init", type=int)
    p.add_argument("--seed-graph", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="dbcd", description="Decentralized block coordinate descent for personalized MLPs")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train one configuration and write metrics.csv")
    _common(p)
    p = sub.add_parser("sweep", help="independent runs over one config key")
    _common(p)
    p.add_argument("--key", required=True, help="dotted config key to vary")
    p.add_argument("--values", required=True, help="comma separated values, or a JSON list")
    p = sub.add_parser("simulate", help="hour-by-hour budgeted run (default 60 exchanges/hour for 10 hours)")
    _common(p)
    p = sub.add_parser("oracle-check", help="brute-force checks of every block update and of backprop")
    _common(p)
    p.add_argument("--cases", type=int, default=1000, help="random instances per subproblem")
    p = sub.add_parser("gen-data", help="write the configured dataset as per-device CSV files")
    _common(p)
    return parser


def _overrides(args):
    items = list(args.overrides)
    for name in ("data", "init", "graph"):
        value = getattr(args, f"seed_{name}")
        if value is None:
            value = args.seed
        if value is not None:
            items.append(f"seed_{name}={value}")
    if args.threads is not None:
        items.append(f"threads={args.threads}")
    return items


def _sweep_values(text):
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    return [parse_value(v.strip()) for v in text.split(",") if v.strip()]


def _print_summary(log):
    for k, v in sorted(log.summary.items()):
        if not isinstance(v, (list, dict)):
            print(f"{k}: {v}")


def cmd_run(args, cfg):
    from dbcd.simulator import run_experiment, write_run
    log = run_experiment(cfg)
    if args.out:
        write_run(log, cfg, args.out)
    else:
        sys.stdout.write(log.to_csv())
    _print_summary(log)
    return EXIT_OK


def cmd_sweep(args, cfg):
    from dbcd.simulator import sweep, write_run, write_sweep_summary
    try:
        values = _sweep_values(args.values)
        for v in values:
            cfg.replace(**{args.key: v})
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"/{args.key.replace('.', '/')}", str(exc)) from None
    logs, summary = sweep(cfg, args.key, values)
    if args.out:
        out = Path(args.out)
        for v, log in zip(values, logs):
            write_run(log, cfg.replace(**{args.key: v}), out / f"{args.key}={v}")
        write_sweep_summary(out / "sweep_summary.csv", args.key, summary)
        dump_config(cfg, out / "config.json")
    for row in summary:
        print(f"{args.key}={row['value']} final_test_acc={row['final_test_acc']:.4f}")
    return EXIT_OK


def cmd_simulate(args, cfg):
    from dbcd.simulator import run_budgeted_simulation, write_run
    if not cfg.budget.exchanges_per_hour:
        cfg = cfg.replace(**{"budget.exchanges_per_hour": 60})
    log = run_budgeted_simulation(cfg)
    if args.out:
        write_run(log, cfg, args.out)
    else:
        sys.stdout.write(log.to_csv())
    _print_summary(log)
    return EXIT_OK


def cmd_oracle_check(args, cfg):
    from dbcd.oracles import run_oracle_suites
    results = run_oracle_suites(n_cases=args.cases, seed=cfg.seed_init)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} suites passed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = [{"suite": r.name, "passed": r.passed, "seconds": r.seconds,
                   "checks": [vars(c) for c in r.checks]} for r in results]
        (out / "oracle_report.json").write_text(json.dumps(report, indent=2) + "\n")
        dump_config(cfg, out / "config.json")
    return EXIT_OK if ok else EXIT_ORACLE


def cmd_gen_data(args, cfg):
    from dbcd.data import export_csv
    from dbcd.simulator import build_dataset
    if not args.out:
        raise ConfigError("/out", "gen-data needs --out")
    fed = build_dataset(cfg)
    export_csv(fed, args.out)
    dump_config(cfg, Path(args.out) / "config.json")
    print(f"wrote {len(fed)} devices to {args.out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "simulate": cmd_simulate,
            "oracle-check": cmd_oracle_check, "gen-data": cmd_gen_data}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
