"""Command-line front end.

Subcommands
-----------
gen-trace   synthesize a top-K page selection trace
stability   per-head temporal stability reports from trace files
classify    build a stable/unstable head profile from traces
overlap     cross-task overlap matrix between saved head profiles
simulate    run the batch serving simulator (``--policy dense|flexicache``)
savings     fast-tier residency savings versus sequence length
sweep       run the simulator over a parameter grid, one CSV row per run

Configuration starts from built-in defaults, then an optional ``--config``
file, then repeated ``--set KEY=VALUE`` overrides, then the dedicated flags
(``--seed``, ``--topk-pages``, ``--rerank-period``, ``--unstable-fraction``).

The ``FXC_LOG`` environment variable sets the log level (DEBUG, INFO, ...).
Exit codes: 0 success, 2 bad command line, 3 library/runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import Config, HeadId, all_heads, load_config
from .errors import ConfigError, TierKVError
from .scoring import MinMaxCache, score_pages, select_topk, update_minmax
from .simulator import POLICIES, Metrics, memory_savings, run_offline, run_online
from .stability import (HeadProfile, classify_heads, compute_stability_report,
                        cross_task_overlap, save_overlap_csv)
from .tiering import write_transfer_log
from .trace import gen_synthetic_kv, gen_synthetic_trace, load_trace, save_trace
from .workload import make_requests

log = logging.getLogger("tierkv")


def _setup_logging() -> None:
    level_name = os.environ.get("FXC_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES.get(key)
    if ftype is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _build_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {}
    for pair in args.set or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        overrides[key.strip()] = _coerce(key.strip(), raw.strip())
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    for flag, key in (("topk_pages", "topk_pages"),
                      ("rerank_period", "rerank_period"),
                      ("unstable_fraction", "unstable_fraction")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    log.info("config: %s", cfg)
    return cfg


def _default_profile(cfg: Config) -> HeadProfile:
    """Synthetic profile: the configured unstable fraction, lowest flat
    head indices first.  Used when no measured profile file is supplied."""
    n = cfg.n_unstable_heads()
    heads = list(all_heads(cfg))
    unstable = tuple(heads[:n])
    mean_ts = np.ones((cfg.num_layers, cfg.kv_heads_per_layer))
    for (l, h) in unstable:
        mean_ts[l, h] = 0.0
    counts = np.zeros((cfg.num_layers, cfg.kv_heads_per_layer), dtype=np.int64)
    return HeadProfile(model_id="synthetic", n_layers=cfg.num_layers,
                       n_heads_per_layer=cfg.kv_heads_per_layer,
                       fraction=cfg.unstable_fraction, unstable=unstable,
                       mean_ts=mean_ts, bottom_counts=counts, task="default")


def _parse_span(text: str):
    """'128' -> 128, '64:256' -> (64, 256)."""
    if ":" in text:
        lo, _, hi = text.partition(":")
        return (int(lo), int(hi))
    return int(text)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat KEY = VALUE config file")
    p.add_argument("--seed", type=int, default=None, help="override rng seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field (repeatable)")


def _add_workload(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-requests", type=int, default=16)
    p.add_argument("--prompt-tokens", default="1024",
                   help="tokens per prompt, fixed N or range LO:HI")
    p.add_argument("--output-tokens", default="128",
                   help="output tokens per request, fixed N or range LO:HI")
    p.add_argument("--rate", type=float, default=None,
                   help="Poisson arrival rate (requests/s); omit for offline")
    p.add_argument("--max-sim-time", type=float, default=None,
                   help="cut the simulation off at this many seconds")
    p.add_argument("--profile", help="head profile file (flexicache)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tierkv",
        description="two-tier KV cache management: stability analysis, "
                    "page scoring, and serving simulation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="synthesize a top-K selection trace")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--initial-pool", type=int, default=1024)
    p.add_argument("--persistence", type=float, default=0.9)
    p.add_argument("--planted", type=int, default=None,
                   help="number of planted unstable heads (lowest flat "
                        "indices); defaults to the configured fraction")
    p.add_argument("--sample-id", default="synthetic")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("stability", help="temporal stability reports")
    _add_common(p)
    p.add_argument("traces", nargs="+")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", help="report file (stem suffixed per trace)")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("classify", help="build a head profile from traces")
    _add_common(p)
    p.add_argument("traces", nargs="+")
    p.add_argument("--fraction", type=float, default=None,
                   help="unstable fraction; defaults to config")
    p.add_argument("--model-id", default="model")
    p.add_argument("--task", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("overlap", help="cross-task overlap between profiles")
    _add_common(p)
    p.add_argument("profiles", nargs="+")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("simulate", help="run the serving simulator")
    _add_common(p)
    _add_workload(p)
    p.add_argument("--policy", required=True, choices=list(POLICIES))
    p.add_argument("--topk-pages", type=int, default=None)
    p.add_argument("--rerank-period", type=int, default=None)
    p.add_argument("--unstable-fraction", type=float, default=None)
    p.add_argument("--out", help="output prefix; writes PREFIX.metrics.txt, "
                                 "PREFIX.metrics.csv, PREFIX.transfers.csv")
    p.add_argument("--dump-scores", metavar="CSV",
                   help="also run a synthetic single-head scoring demo over "
                        "one prompt and dump per-page scores")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("savings", help="residency savings vs sequence length")
    _add_common(p)
    p.add_argument("--seq-tokens",
                   default="1024,2048,4096,8192,16384,20000,32768,65536")
    p.add_argument("--topk-pages", type=int, default=None)
    p.add_argument("--unstable-fraction", type=float, default=None)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_savings)

    p = sub.add_parser("sweep", help="parameter sweep over simulate")
    _add_common(p)
    _add_workload(p)
    p.add_argument("--param", required=True,
                   choices=["rate", "n_requests", "prompt_tokens",
                            "output_tokens", "topk_pages", "rerank_period",
                            "unstable_fraction"])
    p.add_argument("--values", required=True,
                   help="comma-separated parameter values")
    p.add_argument("--policies", default="both",
                   choices=["both", "dense", "flexicache"])
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_sweep)

    return ap


# ---------------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    cfg = _build_config(args)
    n_planted = args.planted if args.planted is not None \
        else cfg.n_unstable_heads()
    planted = list(all_heads(cfg))[:n_planted]
    trace = gen_synthetic_trace(cfg, planted, args.persistence, args.steps,
                                initial_pool=args.initial_pool,
                                sample_id=args.sample_id)
    save_trace(trace, args.out)
    print(f"wrote {args.out}: {trace.n_steps} steps, "
          f"{trace.n_layers}x{trace.n_heads_per_layer} heads, K={trace.k}, "
          f"{n_planted} planted unstable")
    return 0


def _report_path(base: str, stem: str, many: bool) -> str:
    if not many:
        return base
    p = Path(base)
    return str(p.with_name(f"{p.stem}.{stem}{p.suffix or '.txt'}"))


def cmd_stability(args) -> int:
    cfg = _build_config(args)
    many = len(args.traces) > 1
    for path in args.traces:
        trace = load_trace(path)
        rep = compute_stability_report(trace, cfg, window=args.window,
                                       stride=args.stride)
        mean = float(np.mean(rep.mean_ts))
        print(f"{trace.sample_id}: {rep.n_windows} windows, "
              f"mean stability {mean:.4f}")
        if args.out:
            out = _report_path(args.out, trace.sample_id, many)
            rep.save_text(out)
            print(f"  wrote {out}")
    return 0


def cmd_classify(args) -> int:
    cfg = _build_config(args)
    fraction = args.fraction if args.fraction is not None \
        else cfg.unstable_fraction
    reports = [compute_stability_report(load_trace(p), cfg)
               for p in args.traces]
    profile = classify_heads(reports, fraction, model_id=args.model_id,
                             task=args.task)
    profile.save_text(args.out)
    print(f"classified {len(profile.unstable)}/{profile.n_heads} heads "
          f"unstable from {len(reports)} trace(s) -> {args.out}")
    return 0


def cmd_overlap(args) -> int:
    _build_config(args)
    profiles = [HeadProfile.load_text(p) for p in args.profiles]
    labels = [prof.task or prof.model_id or Path(path).stem
              for prof, path in zip(profiles, args.profiles)]
    matrix = cross_task_overlap(profiles)
    for label, row in zip(labels, matrix):
        print(label + "," + ",".join(f"{v:.4f}" for v in row))
    if args.out:
        save_overlap_csv(matrix, labels, args.out)
        print(f"wrote {args.out}")
    return 0


def _load_profile(args, cfg: Config) -> HeadProfile:
    if args.profile:
        return HeadProfile.load_text(args.profile)
    return _default_profile(cfg)


def cmd_simulate(args) -> int:
    cfg = _build_config(args)
    requests = make_requests(args.n_requests, _parse_span(args.prompt_tokens),
                             _parse_span(args.output_tokens),
                             seed=cfg.rng_seed)
    profile = _load_profile(args, cfg) if args.policy == "flexicache" else None
    if args.rate is not None:
        result = run_online(requests, args.rate, cfg, profile, args.policy,
                            max_sim_time_s=args.max_sim_time)
    else:
        result = run_offline(requests, cfg, profile, args.policy)
    sys.stdout.write(result.metrics.to_text())
    if args.out:
        prefix = args.out
        Path(prefix + ".metrics.txt").write_text(result.metrics.to_text())
        Path(prefix + ".metrics.csv").write_text(
            Metrics.csv_header() + "\n" + result.metrics.to_csv_row() + "\n")
        write_transfer_log(result.transfers, prefix + ".transfers.csv")
        print(f"wrote {prefix}.metrics.txt, {prefix}.metrics.csv, "
              f"{prefix}.transfers.csv")
    if args.dump_scores:
        _dump_scores(cfg, args.dump_scores)
        print(f"wrote {args.dump_scores}")
    return 0


def _dump_scores(cfg: Config, path: str) -> None:
    """Push one synthetic prompt through the metadata/scoring path and dump
    per-page upper-bound scores plus the selected top-K for the first head."""
    tokens = 64 * cfg.page_size_tokens
    keys, _ = gen_synthetic_kv(cfg, tokens, seed=cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    q = rng.standard_normal(cfg.head_dim)
    cache = MinMaxCache(cfg.head_dim, cfg.page_size_tokens)
    meta = cache.get_or_create("demo", HeadId(0, 0))
    n_pages = tokens // cfg.page_size_tokens
    for page in range(n_pages):
        meta.add_page()
        sl = slice(page * cfg.page_size_tokens, (page + 1) * cfg.page_size_tokens)
        update_minmax(meta, page, keys[0, 0, sl, :])
    scores = score_pages(q, meta)
    chosen = select_topk(scores, min(cfg.topk_pages, n_pages),
                         pinned=(n_pages - 1,))
    with open(path, "w") as fh:
        fh.write("page,score,selected\n")
        for page in range(n_pages):
            fh.write(f"{page},{scores[page]:.6f},"
                     f"{int(page in chosen)}\n")


def cmd_savings(args) -> int:
    cfg = _build_config(args)
    seqs = [int(s) for s in args.seq_tokens.split(",") if s.strip()]
    lines = ["seq_tokens,savings"]
    for seq in seqs:
        lines.append(f"{seq},{memory_savings(seq, cfg):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    policies = ["dense", "flexicache"] if args.policies == "both" \
        else [args.policies]
    rows = ["param,value," + Metrics.csv_header()]
    for raw in values:
        for policy in policies:
            run_cfg = cfg
            rate = args.rate
            n_req = args.n_requests
            prompt = _parse_span(args.prompt_tokens)
            output = _parse_span(args.output_tokens)
            if args.param in ("topk_pages", "rerank_period"):
                run_cfg = dataclasses.replace(cfg, **{args.param: int(raw)})
            elif args.param == "unstable_fraction":
                run_cfg = dataclasses.replace(cfg, unstable_fraction=float(raw))
            elif args.param == "rate":
                rate = float(raw)
            elif args.param == "n_requests":
                n_req = int(raw)
            elif args.param == "prompt_tokens":
                prompt = _parse_span(raw)
            elif args.param == "output_tokens":
                output = _parse_span(raw)
            requests = make_requests(n_req, prompt, output,
                                     seed=run_cfg.rng_seed)
            profile = (_load_profile(args, run_cfg)
                       if policy == "flexicache" else None)
            if rate is not None:
                res = run_online(requests, rate, run_cfg, profile, policy,
                                 max_sim_time_s=args.max_sim_time)
            else:
                res = run_offline(requests, run_cfg, profile, policy)
            rows.append(f"{args.param},{raw}," + res.metrics.to_csv_row())
            log.info("sweep %s=%s policy=%s done", args.param, raw, policy)
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except TierKVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
