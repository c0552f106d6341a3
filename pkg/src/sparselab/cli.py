"""Command line: ``sparselab {run,report,validate,probe} ...``"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner
from .config import ConfigError, load_config


def _print_validation(diag: dict):
    print(f"steps/epoch {diag['steps_per_epoch']}, total steps {diag['total_steps']}")
    if diag["events"]:
        print(f"{'step':>8} {'epoch':>8} {'sparsity':>10} {'regen r':>8} {'fwd FLOPs':>12}")
        for e in diag["events"]:
            print(f"{e['step']:>8} {e['epoch']:>8.2f} {e['sparsity']:>10.6f} "
                  f"{e['regen_ratio']:>8.4f} {e['forward_flops']:>12.4g}")
    else:
        print("no topology events")
    for path, msg in diag["warnings"]:
        print(f"warning: {path}: {msg}")
    print(f"final sparsity {diag['final_sparsity']:.4f}; est. forward FLOPs/sample "
          f"{diag['est_forward_flops_final']:.4g} (dense {diag['dense_forward_flops']:.4g}); "
          f"est. normalized train FLOPs {diag['est_normalized_train_flops']:.4f}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sparselab", description="Sparse training lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="train every seed of a config")
    p.add_argument("config")
    p.add_argument("--out", help=f"run directory (default: ${runner.OUT_ENV} or output_dir, plus name)")
    p = sub.add_parser("report", help="rebuild summary tables from a run directory")
    p.add_argument("run_dir")
    p = sub.add_parser("validate", help="expand schedules without training")
    p.add_argument("config")
    p.add_argument("--json", action="store_true", help="print diagnostics as JSON")
    p = sub.add_parser("probe", help="run the pruning-plasticity sweep of a config")
    p.add_argument("config")
    p.add_argument("--out")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "report":
            row = runner.report(args.run_dir)
            print(",".join(runner.SUMMARY_COLUMNS))
            print(",".join(str(row[c]) for c in runner.SUMMARY_COLUMNS))
            return 0
        cfg = load_config(args.config, check_files=args.cmd != "validate")
        if args.cmd == "validate":
            diag = runner.validate(cfg)
            if args.json:
                print(json.dumps(diag, indent=2))
            else:
                _print_validation(diag)
            return 0
        if args.cmd == "run":
            return runner.run(cfg, args.out)
        rows = runner.probe(cfg, args.out)
        failed = [r for r in rows if r["error"]]
        print(f"{len(rows)} probe cells, {len(failed)} failed")
        return 1 if failed else 0
    except ConfigError as e:
        for path, msg in e.problems:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return 2
    except runner.NoRunsFound as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
