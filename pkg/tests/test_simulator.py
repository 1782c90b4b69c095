import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tierkv.config import Config
from tierkv.errors import AdmissionError
from tierkv.simulator import (CostModel, Metrics, memory_savings, run_offline,
                              run_online)
from tierkv.workload import Request, make_requests
from conftest import make_profile


# ---------------------------------------------------------------------------
# residency savings


def test_memory_savings_long_context_anchor():
    cfg = Config()  # page 16, K=64 pages, u=0.25
    assert memory_savings(20_000, cfg) == pytest.approx(0.7116, abs=1e-9)


def test_memory_savings_short_sequences_zero():
    cfg = Config()
    # everything fits in the budget: nothing to save
    assert memory_savings(64 * 16, cfg) == 0.0
    assert memory_savings(100, cfg) == 0.0


def test_memory_savings_asymptote():
    cfg = Config()
    assert memory_savings(10**6 * 16, cfg) == pytest.approx(0.75, abs=1e-3)


def test_memory_savings_requires_full_page():
    with pytest.raises(ValueError):
        memory_savings(7, Config())


@settings(max_examples=60, deadline=None)
@given(a=st.integers(16, 10**6), b=st.integers(16, 10**6))
def test_memory_savings_monotone(a, b):
    cfg = Config()
    lo, hi = sorted((a, b))
    assert memory_savings(lo, cfg) <= memory_savings(hi, cfg) + 1e-12


def test_memory_savings_scales_with_unstable_fraction():
    lean = Config(unstable_fraction=0.125)
    fat = Config(unstable_fraction=0.5)
    assert memory_savings(10**6, lean) > memory_savings(10**6, fat)


# ---------------------------------------------------------------------------
# cost model


def test_cost_model_from_config():
    cfg = Config()
    cm = CostModel.from_config(cfg)
    assert cm.decode_step_cost(0) == cfg.step_overhead_s
    assert cm.decode_step_cost(10**9) == pytest.approx(
        cfg.step_overhead_s + cfg.attn_cost_per_byte_s * 10**9)
    assert cm.prefill_cost(2048) == pytest.approx(2048 * cfg.prefill_cost_per_token_s)


def test_cost_model_rejects_nonpositive():
    with pytest.raises(ValueError):
        CostModel(0.0, 1e-11, 1e-5)


# ---------------------------------------------------------------------------
# engine, offline


def quick_cfg(**kw):
    base = dict(num_layers=2, kv_heads_per_layer=4,
                fast_tier_capacity_bytes=128 * 1024 * 1024)
    base.update(kw)
    return Config(**base)


def test_offline_dense_runs_to_completion(sim_cfg):
    reqs = make_requests(8, 512, 32, seed=0)
    res = run_offline(reqs, sim_cfg, None, "dense")
    m = res.metrics
    assert m.policy == "dense" and m.mode == "offline"
    assert m.finished == 8 and m.queued_at_end == 0
    assert m.total_tokens == 8 * (512 + 32)
    assert m.output_tokens == 8 * 32
    assert m.sim_time_s > 0
    assert m.offload_events == 0 and m.reload_events == 0
    assert res.transfers == []


def test_offline_flexicache_runs_to_completion(sim_cfg, sim_profile):
    reqs = make_requests(8, 2048, 64, seed=0)
    res = run_offline(reqs, sim_cfg, sim_profile, "flexicache")
    m = res.metrics
    assert m.finished == 8
    assert m.total_tokens == 8 * (2048 + 64)
    assert m.offload_events > 0
    assert m.offload_once_ok
    assert m.peak_fast_bytes <= sim_cfg.fast_tier_capacity_bytes
    assert len(res.transfers) == m.offload_events + m.reload_events


def test_flexicache_needs_profile(sim_cfg):
    with pytest.raises(ValueError):
        run_offline(make_requests(1, 64, 4, seed=0), sim_cfg, None, "flexicache")


def test_unknown_policy_rejected(sim_cfg):
    with pytest.raises(ValueError):
        run_offline(make_requests(1, 64, 4, seed=0), sim_cfg, None, "compress")


def test_empty_workload_rejected(sim_cfg):
    with pytest.raises(ValueError):
        run_offline([], sim_cfg, None, "dense")


def test_determinism_same_seed(sim_cfg, sim_profile):
    reqs = make_requests(10, 1024, 48, seed=3)
    a = run_offline(reqs, sim_cfg, sim_profile, "flexicache")
    b = run_offline(reqs, sim_cfg, sim_profile, "flexicache")
    assert a.metrics.to_text() == b.metrics.to_text()
    assert [(e.issue_time_s, e.n_bytes) for e in a.transfers] == \
           [(e.issue_time_s, e.n_bytes) for e in b.transfers]


def test_flexicache_touches_fewer_bytes_for_long_contexts(sim_profile, sim_cfg):
    # sequences far beyond the top-K budget: selection-based residency must
    # shrink both the peak footprint and the per-step byte traffic
    reqs = make_requests(6, 4096, 64, seed=1)
    dense = run_offline(reqs, sim_cfg, None, "dense")
    flexi = run_offline(reqs, sim_cfg, sim_profile, "flexicache")
    assert flexi.metrics.peak_fast_bytes < dense.metrics.peak_fast_bytes
    assert flexi.metrics.tpot_mean_s < dense.metrics.tpot_mean_s


def test_admission_error_when_single_request_cannot_fit():
    cfg = quick_cfg(fast_tier_capacity_bytes=1024 * 1024)
    reqs = [Request("big", 8192, 128)]
    with pytest.raises(AdmissionError, match="big"):
        run_offline(reqs, cfg, None, "dense")


def test_memory_capped_dense_batch_vs_flexicache():
    cfg = quick_cfg(fast_tier_capacity_bytes=48 * 1024 * 1024)
    prof = make_profile(cfg)
    reqs = make_requests(24, 2048, 256, seed=2)
    dense = run_offline(reqs, cfg, None, "dense")
    flexi = run_offline(reqs, cfg, prof, "flexicache")
    assert dense.metrics.peak_batch < flexi.metrics.peak_batch
    assert flexi.metrics.throughput_tokens_per_s > \
        dense.metrics.throughput_tokens_per_s


def test_score_eval_ratio_exact():
    # 16 heads, 4 unstable, R=16, 161 output tokens = 160 decode steps:
    # unstable heads score every step, stable heads every 16th, so
    # evals/naive = (150*4 + 10*16) / (160*16) = 760/2560 = 0.296875
    cfg = Config(num_layers=4, kv_heads_per_layer=4, unstable_fraction=0.25,
                 rerank_period=16,
                 fast_tier_capacity_bytes=512 * 1024 * 1024)
    prof = make_profile(cfg)
    assert len(prof.unstable) == 4
    reqs = make_requests(3, 2048, 161, seed=4)
    res = run_offline(reqs, cfg, prof, "flexicache")
    m = res.metrics
    assert m.score_evals_naive == 3 * 160 * 16
    assert m.score_evals / m.score_evals_naive == 0.296875
    assert m.score_evals / m.score_evals_naive == \
        0.25 + (1 - 0.25) / cfg.rerank_period
    assert m.prefill_selections == 3 * 16


def test_layer_scoring_skips_counted():
    cfg = Config(num_layers=4, kv_heads_per_layer=4, unstable_fraction=0.25,
                 fast_tier_capacity_bytes=512 * 1024 * 1024)
    prof = make_profile(cfg)  # unstable heads cluster in layer 0
    reqs = make_requests(1, 1024, 33, seed=0)
    res = run_offline(reqs, cfg, prof, "flexicache")
    # layers 1..3 are all-stable; 30 of 32 decode steps are off-boundary
    assert res.metrics.layer_scoring_skips == 30 * 3


def test_offload_and_reload_byte_accounting(sim_cfg, sim_profile):
    reqs = make_requests(4, 2048, 64, seed=6)
    res = run_offline(reqs, sim_cfg, sim_profile, "flexicache")
    m = res.metrics
    off = sum(e.n_bytes for e in res.transfers if e.direction == "offload")
    rel = sum(e.n_bytes for e in res.transfers if e.direction == "reload")
    assert off == m.offload_bytes > 0
    assert rel == m.reload_bytes
    # 6 stable heads, 128 prompt pages: the initial offload alone covers them
    assert m.offload_bytes >= 4 * 6 * 128 * sim_cfg.page_bytes


def test_max_output_one_emits_only_prefill_token(sim_cfg):
    reqs = [Request("one", 64, 1)]
    res = run_offline(reqs, sim_cfg, None, "dense")
    m = res.metrics
    assert m.finished == 1
    assert m.output_tokens == 1
    assert m.tpot_mean_s == 0.0  # no decode steps at all
    assert m.ttft_mean_s > 0


def test_metrics_text_and_csv_align():
    m = Metrics(policy="dense", mode="offline")
    text = m.to_text()
    header = Metrics.csv_header().split(",")
    row = m.to_csv_row().split(",")
    assert len(header) == len(row)
    assert text.count("\n") == len(header)
    assert header[0] == "policy" and row[0] == "dense"


# ---------------------------------------------------------------------------
# engine, online


def test_online_arrivals_spread_ttft(sim_cfg, sim_profile):
    reqs = make_requests(20, 1024, 32, seed=7)
    res = run_online(reqs, 50.0, sim_cfg, sim_profile, "flexicache")
    m = res.metrics
    assert m.mode == "online"
    assert m.finished == 20
    assert m.sim_time_s > 20 / 50.0 * 0.5  # arrivals stretch the run
    assert m.ttft_p95_s >= m.ttft_p50_s


def test_online_determinism(sim_cfg):
    reqs = make_requests(12, 512, 24, seed=8)
    a = run_online(reqs, 30.0, sim_cfg, None, "dense")
    b = run_online(reqs, 30.0, sim_cfg, None, "dense")
    assert a.metrics.to_text() == b.metrics.to_text()


def test_online_respects_explicit_arrivals(sim_cfg):
    reqs = [Request("a", 64, 4, arrival_time_s=0.0),
            Request("b", 64, 4, arrival_time_s=5.0)]
    res = run_online(reqs, 1000.0, sim_cfg, None, "dense")
    assert res.metrics.sim_time_s > 5.0


def test_online_cutoff_counts_backlog(sim_cfg):
    reqs = make_requests(40, 2048, 512, seed=9)
    res = run_online(reqs, 200.0, sim_cfg, None, "dense",
                     max_sim_time_s=0.3)
    m = res.metrics
    assert m.finished < 40
    assert m.queued_at_end > 0
    assert m.sim_time_s >= 0.3


def test_online_rejects_bad_rate(sim_cfg):
    with pytest.raises(ValueError):
        run_online(make_requests(2, 64, 4, seed=0), 0.0, sim_cfg, None, "dense")


def test_pause_fraction_near_inverse_rerank_period():
    # link sized so one boundary reload costs about one decode step
    cfg = quick_cfg(link_bandwidth_bytes_per_s=400e6, link_latency_s=5e-5)
    prof = make_profile(cfg)
    reqs = make_requests(60, 2048, 128, seed=5)
    res = run_online(reqs, 8.0, cfg, prof, "flexicache")
    m = res.metrics
    target = 1.0 / cfg.rerank_period
    assert 0.5 * target <= m.pause_fraction <= 1.5 * target
    assert m.pause_steps > 0 and m.reload_events > 0


def test_dense_never_pauses(sim_cfg):
    reqs = make_requests(10, 1024, 64, seed=10)
    res = run_online(reqs, 20.0, sim_cfg, None, "dense")
    assert res.metrics.pause_fraction == 0.0
    assert res.metrics.pause_steps == 0
