"""Render report figures from chmm-evidence CSV outputs."""

from __future__ import annotations

import argparse
import json
import sys

from .figures import plot_posteriors, plot_state_heatmap
from .tables import SchemaError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chmm-plots", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("posteriors",
                        help="model-averaged parameter posterior panels")
    sp.add_argument("--samples", action="append", required=True,
                    metavar="MODEL=CSV",
                    help="per-model samples file, e.g. 3=fit3_samples.csv")
    sp.add_argument("--evidence", required=True, help="ranking CSV")
    sp.add_argument("--out-dir", default="figures")

    sp = sub.add_parser("heatmap", help="per-bird infection-probability grid")
    sp.add_argument("--smooth", required=True, help="smoothing CSV")
    sp.add_argument("--data", required=True, help="observation CSV")
    sp.add_argument("--out-dir", default="figures")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "posteriors":
            samples = {}
            for item in args.samples:
                model, _, path = item.partition("=")
                if not path:
                    raise ValueError("--samples expects MODEL=CSV, got %r" % item)
                samples[int(model)] = path
            paths = plot_posteriors(samples, args.evidence, args.out_dir)
        else:
            paths = plot_state_heatmap(args.smooth, args.data, args.out_dir)
    except (OSError, ValueError, SchemaError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"written": paths}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
