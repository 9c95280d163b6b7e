"""Command-line entry point: ``metaadapt <subcommand> [options]``.

Subcommands: ``gen-maps``, ``collect``, ``train``, ``evaluate``, ``compare``.

Exit codes: 0 success; 1 unexpected error; 2 bad arguments or configuration;
3 missing input (config, dataset, checkpoint, map or report); 4 unusable
input data (e.g. empty dataset, reports with mismatched map categories);
5 failure writing outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from metaadapt import experiment as ex


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML configuration file")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--episodes", type=int, help="episodes per configuration and map category")
    common.add_argument("--map-category", action="append", dest="map_category",
                        help="restrict to a map category (repeatable)")
    common.add_argument("--full-scale", action="store_true", help="paper-scale episode counts and planner")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration entry, e.g. mppi.num_samples=32")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="metaadapt", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-maps", parents=[common], help="write the evaluation maps")
    c = sub.add_parser("collect", parents=[common], help="collect training runs in the data-generation world")
    c.add_argument("--runs", type=int, help="number of runs (default from config)")
    t = sub.add_parser("train", parents=[common], help="train baseline and meta-learned models")
    t.add_argument("--data", type=Path, required=True, help="dataset directory written by collect")
    e = sub.add_parser("evaluate", parents=[common], help="closed-loop evaluation of the configurations")
    e.add_argument("--checkpoint", type=Path, required=True, help="directory with baseline.npz/meta.npz")
    e.add_argument("--maps", type=Path, help="directory written by gen-maps (optional)")
    e.add_argument("--configuration", action="append", choices=ex.CONFIGURATIONS,
                   help="restrict to a configuration (repeatable)")
    k = sub.add_parser("compare", parents=[common], help="compare evaluation reports")
    k.add_argument("reports", nargs="+", type=Path, help="report directories (metrics.json inside)")
    k.add_argument("--label", action="append", help="label per report, in order")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ex.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = yaml.safe_load(value)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.episodes is not None:
        out["episodes"] = args.episodes
    if args.map_category:
        out["map_categories"] = args.map_category
    if getattr(args, "configuration", None):
        out["configurations"] = args.configuration
    if getattr(args, "runs", None) is not None:
        out["collect.runs"] = args.runs
    return out


def run(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ex.RunConfig.resolve(args.config, _overrides(args), args.full_scale)
        if args.command == "gen-maps":
            for path in ex.gen_maps(cfg, args.out):
                print(path)
        elif args.command == "collect":
            st = ex.collect(cfg, args.out)
            print(ex.format_statistics(st))
        elif args.command == "train":
            summary = ex.train(cfg, args.data, args.out)
            for key, value in summary.items():
                print(f"{key}: {value}")
        elif args.command == "evaluate":
            report = ex.evaluate(cfg, args.checkpoint, args.out, args.maps)
            print(ex.format_report(report["aggregates"]))
        elif args.command == "compare":
            ex.compare(args.reports, args.out, args.label)
            print((Path(args.out) / "comparison.txt").read_text())
    except ex.ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ex.EXIT_OUTPUT
    return ex.EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
