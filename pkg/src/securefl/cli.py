"""Command-line entry point: ``securefl {split,run,grid,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import FederationError
from . import experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="securefl", description="Encrypted federated training on toy tasks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment YAML")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="override the output directory")

    common(sub.add_parser("split", help="partition the dataset into server and client shares"))
    run = sub.add_parser("run", help="run one federation on an existing split")
    common(run)
    run.add_argument("--transport", choices=("inproc", "socket"), default=None)
    grid = sub.add_parser("grid", help="sweep server learning rate and momentum")
    common(grid)
    grid.add_argument("--transport", choices=("inproc", "socket"), default=None)
    grid.add_argument("--parallel-cells", type=int, default=1, metavar="N")
    rep = sub.add_parser("report", help="plot loss and metrics per round")
    rep.add_argument("records", help="records.jsonl written by run")
    rep.add_argument("--out", default=None, help="directory for the plots")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            result = experiment.cmd_report(args.records, args.out)
            print(json.dumps(result["plots"], indent=2))
            return 0
        cfg = experiment.load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "split":
            split = experiment.cmd_split(cfg)
            sizes = {"server": len(split.server_ids), **{str(c): len(v) for c, v in split.client_ids.items()}}
            print(json.dumps(sizes, sort_keys=True))
        elif args.command == "run":
            summary = experiment.cmd_run(cfg, transport=args.transport)
            print(json.dumps(summary, indent=2, sort_keys=True))
        else:
            if args.parallel_cells < 1:
                raise experiment.ConfigError("--parallel-cells must be >= 1")
            rows = experiment.cmd_grid(cfg, args.parallel_cells, transport=args.transport)
            failed = [r for r in rows if r["status"] != "ok"]
            print(f"{len(rows) - len(failed)}/{len(rows)} cells completed; table at {cfg.output_dir / 'grid.csv'}")
    except (FederationError, ValueError, OSError) as exc:
        print(f"securefl: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
