#!/usr/bin/env python3
"""Compare offline batch throughput of both policies across output lengths.

Under a capped fast tier the dense policy must commit every request's full
cache up front, so longer generations shrink its batch; the selective policy
commits only the per-head working set and keeps batching.  The throughput
ratio should therefore grow with output length.
"""

import argparse
import sys
from pathlib import Path

from tierkv.config import Config
from tierkv.simulator import run_offline
from tierkv.workload import make_requests

sys.path.insert(0, str(Path(__file__).resolve().parent))
from script_common import default_profile  # noqa: E402


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--outputs", default="50,250,500,1000,1500",
                    help="output lengths to sweep (default: %(default)s)")
    ap.add_argument("--n-requests", type=int, default=24)
    ap.add_argument("--prompt-tokens", type=int, default=2048)
    ap.add_argument("--capacity-mb", type=int, default=48,
                    help="fast-tier capacity in MiB (default: %(default)s)")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", type=Path, default=None, help="also write CSV")
    args = ap.parse_args(argv)

    cfg = Config(num_layers=2, kv_heads_per_layer=4,
                 fast_tier_capacity_bytes=args.capacity_mb * 1024 * 1024)
    profile = default_profile(cfg)
    outputs = [int(o) for o in args.outputs.split(",")]

    print(f"{args.n_requests} requests, prompt {args.prompt_tokens}, "
          f"fast tier {args.capacity_mb} MiB")
    print(f"{'output':>7s} {'dense tok/s':>12s} {'flexi tok/s':>12s} "
          f"{'ratio':>6s} {'batch d/f':>10s}")
    rows = []
    for out in outputs:
        reqs = make_requests(args.n_requests, args.prompt_tokens, out,
                             seed=args.seed)
        dense = run_offline(reqs, cfg, None, "dense").metrics
        flexi = run_offline(reqs, cfg, profile, "flexicache").metrics
        ratio = flexi.throughput_tokens_per_s / dense.throughput_tokens_per_s
        print(f"{out:>7d} {dense.throughput_tokens_per_s:>12.0f} "
              f"{flexi.throughput_tokens_per_s:>12.0f} {ratio:>6.3f} "
              f"{dense.peak_batch:>4d}/{flexi.peak_batch:<4d}")
        rows.append((out, dense.throughput_tokens_per_s,
                     flexi.throughput_tokens_per_s, ratio,
                     dense.peak_batch, flexi.peak_batch))

    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write("output_tokens,dense_tok_s,flexicache_tok_s,ratio,"
                     "dense_peak_batch,flexicache_peak_batch\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]:.2f},{r[2]:.2f},{r[3]:.4f},"
                         f"{r[4]},{r[5]}\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
