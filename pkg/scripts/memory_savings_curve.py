#!/usr/bin/env python3
"""Tabulate fast-tier memory savings versus sequence length.

Savings come from keeping stable heads' pages beyond the top-K budget in the
slow tier; the analytic fraction depends only on sequence length, the page
budget, and the unstable-head fraction.  Prints one column per fraction and
optionally writes the table as CSV.
"""

import argparse
import sys
from pathlib import Path

from tierkv.config import Config
from tierkv.simulator import memory_savings

DEFAULT_SEQS = (256, 512, 1024, 2048, 4096, 8192, 16384, 20000, 32768,
                65536, 131072)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fractions", default="0.125,0.25,0.5",
                    help="unstable-head fractions to sweep (default: %(default)s)")
    ap.add_argument("--seq-tokens",
                    default=",".join(str(s) for s in DEFAULT_SEQS),
                    help="sequence lengths in tokens")
    ap.add_argument("--topk-pages", type=int, default=64)
    ap.add_argument("--out", type=Path, default=None, help="also write CSV")
    args = ap.parse_args(argv)

    fractions = [float(f) for f in args.fractions.split(",")]
    seqs = [int(s) for s in args.seq_tokens.split(",")]
    configs = [Config(unstable_fraction=f, topk_pages=args.topk_pages)
               for f in fractions]

    header = ["seq_tokens"] + [f"u={f:g}" for f in fractions]
    rows = []
    for seq in seqs:
        rows.append([seq] + [memory_savings(seq, cfg) for cfg in configs])

    print("  ".join(f"{h:>10s}" for h in header))
    for row in rows:
        print(f"{row[0]:>10d}  " +
              "  ".join(f"{v:>10.4f}" for v in row[1:]))
    for f, cfg in zip(fractions, configs):
        print(f"asymptote at u={f:g}: {1.0 - f:.4f} "
              f"(reached as pages >> {cfg.topk_pages}-page budget)")

    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(",".join(h.replace("=", "") for h in header) + "\n")
            for row in rows:
                fh.write(f"{row[0]}," +
                         ",".join(f"{v:.6f}" for v in row[1:]) + "\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
