"""Command line entry point: run, preset, list-presets, validate."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import apply_overrides, load_config, parse_override
from .engine import SimulationError
from .presets import PRESETS, list_presets, preset
from .runner import OUTPUT_ENV, aggregate_rows, run_experiment
from .topology import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2

log = logging.getLogger("seqbalance_sim")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="seqbalance-sim",
        description="Packet-level RoCEv2 load-balancing simulator.",
        epilog=f"Outputs go to --out, output.dir, or ${OUTPUT_ENV}/<name> "
               "(default ./results/<name>).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--override", "-o", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config key, YAML value")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, help="runs executed concurrently")

    r = sub.add_parser("run", help="run an experiment config file")
    r.add_argument("config")
    common(r)
    pr = sub.add_parser("preset", help="run a named preset")
    pr.add_argument("name", choices=list(PRESETS), metavar="name")
    common(pr)
    sub.add_parser("list-presets", help="print preset names")
    v = sub.add_parser("validate", help="check a config file against the schema")
    v.add_argument("config")
    return p


def _print_summary(results, path) -> None:
    for row in aggregate_rows(results):
        parts = [f"{row['variant']}:"]
        for k in ("flows", "mean_slowdown", "p99_slowdown", "mean_imbalance",
                  "all_senders_gbps", "reorder_retx_packets", "drops",
                  "congestion_bytes"):
            if k in row:
                v = row[k]
                parts.append(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}")
        print(" ".join(parts))
    for r in results:
        for row in r.table1:
            print(f"size={row[0]} fct_base={row[3]} fct_delayed={row[4]} "
                  f"ratio={row[5]:.3f}")
        for thr, sizes in r.flowlets.items():
            print(f"threshold={thr}ns flowlets={len(sizes)} min={min(sizes)} "
                  f"max={max(sizes)}")
    print(f"outputs: {path}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.cmd == "list-presets":
            for name in list_presets():
                print(name)
            return EXIT_OK
        if args.cmd == "validate":
            cfg = load_config(args.config)
            print(f"{args.config}: ok ({cfg['workload']['kind']}, "
                  f"scheme {cfg['scheme']['name']})")
            return EXIT_OK
        cfg = load_config(args.config) if args.cmd == "run" else preset(args.name)
        cfg = apply_overrides(cfg, [parse_override(o) for o in args.override])
        t0 = time.perf_counter()
        results, path = run_experiment(cfg, args.out, args.jobs)
        log.info("%d runs in %.1fs", len(results), time.perf_counter() - t0)
        _print_summary(results, path)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
