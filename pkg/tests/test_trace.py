import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tierkv.config import Config, HeadId, all_heads
from tierkv.errors import TraceFormatError
from tierkv.trace import (TopKTrace, gen_synthetic_kv, gen_synthetic_trace,
                          load_trace, save_trace)


def tiny_trace(steps=6, layers=2, heads=2, k=3, pool0=8):
    rng = np.random.default_rng(0)
    pools = np.arange(pool0, pool0 + steps, dtype=np.uint32)
    sel = np.empty((steps, layers, heads, k), dtype=np.uint32)
    for s in range(steps):
        for l in range(layers):
            for h in range(heads):
                sel[s, l, h] = np.sort(rng.choice(pools[s], size=k,
                                                  replace=False))
    return TopKTrace("tiny", sel, pools)


def test_shape_accessors():
    tr = tiny_trace()
    assert (tr.n_steps, tr.n_layers, tr.n_heads_per_layer, tr.k) == (6, 2, 2, 3)
    hs = tr.head_selections(HeadId(1, 0))
    assert hs.shape == (6, 3)
    assert np.array_equal(hs, tr.selections[:, 1, 0, :])


def test_rejects_duplicate_indices_in_one_step():
    tr = tiny_trace()
    bad = tr.selections.copy()
    bad[2, 0, 1, 0] = bad[2, 0, 1, 1]
    with pytest.raises(ValueError, match="duplicate"):
        TopKTrace("dup", bad, tr.pool_sizes)


def test_rejects_index_at_or_above_pool():
    tr = tiny_trace()
    bad = tr.selections.copy()
    bad[3, 1, 1, 2] = tr.pool_sizes[3]
    with pytest.raises(ValueError):
        TopKTrace("oob", bad, tr.pool_sizes)


def test_rejects_shrinking_pool():
    tr = tiny_trace()
    pools = tr.pool_sizes.copy()
    pools[4] = pools[3] - 2
    with pytest.raises(ValueError, match="shrink"):
        TopKTrace("shrink", tr.selections, pools)


def test_roundtrip(tmp_path):
    tr = tiny_trace()
    path = tmp_path / "t.fxtk"
    save_trace(tr, path)
    back = load_trace(path)
    assert back.sample_id == "t"          # falls back to the file stem
    assert np.array_equal(back.selections, tr.selections)
    assert np.array_equal(back.pool_sizes, tr.pool_sizes)


def test_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "bad.fxtk"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(TraceFormatError, match="offset 0"):
        load_trace(path)


def test_bad_version_offset_four(tmp_path):
    tr = tiny_trace()
    path = tmp_path / "v.fxtk"
    save_trace(tr, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(TraceFormatError, match="offset 4"):
        load_trace(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "short.fxtk"
    path.write_bytes(b"FXTK\x01\x00")
    with pytest.raises(TraceFormatError, match="header"):
        load_trace(path)


def test_truncated_body_names_offset(tmp_path):
    tr = tiny_trace()
    path = tmp_path / "cut.fxtk"
    save_trace(tr, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(TraceFormatError, match="offset"):
        load_trace(path)


def test_trailing_bytes_rejected(tmp_path):
    tr = tiny_trace()
    path = tmp_path / "extra.fxtk"
    save_trace(tr, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(TraceFormatError, match="trailing"):
        load_trace(path)


def test_corrupt_selection_names_exact_offset(tmp_path):
    tr = tiny_trace()
    path = tmp_path / "corrupt.fxtk"
    save_trace(tr, path)
    blob = bytearray(path.read_bytes())
    # overwrite the very first selection entry of step 0 with an index
    # beyond the step's pool size
    first_sel_off = 18 + 4
    struct.pack_into("<I", blob, first_sel_off, 10_000)
    path.write_bytes(bytes(blob))
    with pytest.raises(TraceFormatError, match=f"offset {first_sel_off}"):
        load_trace(path)


# ---------------------------------------------------------------------------
# synthetic generation


def gen_cfg():
    return Config(num_layers=2, kv_heads_per_layer=4, topk_pages=16,
                  stability_window=8)


def test_synthetic_shapes_and_growth():
    cfg = gen_cfg()
    tr = gen_synthetic_trace(cfg, [HeadId(0, 0)], 0.9, 48, initial_pool=64,
                             seed=1)
    assert tr.selections.shape == (48, 2, 4, 16)
    assert tr.pool_sizes[0] == 64
    # the pool grows one page per page_size_tokens steps
    assert tr.pool_sizes[-1] == 64 + 47 // cfg.page_size_tokens
    assert np.all(np.diff(tr.pool_sizes.astype(int)) >= 0)


def test_synthetic_rows_sorted_and_unique():
    cfg = gen_cfg()
    tr = gen_synthetic_trace(cfg, [], 0.5, 32, initial_pool=64, seed=2)
    sel = tr.selections
    assert np.all(sel[..., 1:] > sel[..., :-1])


def test_planted_heads_churn_more():
    cfg = gen_cfg()
    planted = [HeadId(0, 0), HeadId(0, 1)]
    tr = gen_synthetic_trace(cfg, planted, 0.95, 64, initial_pool=256, seed=3)
    step_overlap = lambda l, h: np.mean([
        len(np.intersect1d(tr.selections[s, l, h], tr.selections[s + 1, l, h]))
        for s in range(tr.n_steps - 1)])
    unstable = np.mean([step_overlap(0, 0), step_overlap(0, 1)])
    stable = np.mean([step_overlap(1, h) for h in range(4)])
    assert unstable < stable * 0.5


def test_seed_reproducibility():
    cfg = gen_cfg()
    a = gen_synthetic_trace(cfg, [HeadId(1, 2)], 0.8, 20, seed=7)
    b = gen_synthetic_trace(cfg, [HeadId(1, 2)], 0.8, 20, seed=7)
    c = gen_synthetic_trace(cfg, [HeadId(1, 2)], 0.8, 20, seed=8)
    assert np.array_equal(a.selections, b.selections)
    assert not np.array_equal(a.selections, c.selections)


def test_k_larger_than_pool_rejected():
    cfg = gen_cfg()
    with pytest.raises(ValueError):
        gen_synthetic_trace(cfg, [], 0.9, 8, initial_pool=8, seed=0)


def test_gen_synthetic_kv_shapes():
    cfg = gen_cfg()
    keys, values = gen_synthetic_kv(cfg, 40, seed=4)
    assert keys.shape == (2, 4, 40, cfg.head_dim)
    assert values.shape == keys.shape
    k2, _ = gen_synthetic_kv(cfg, 40, seed=4)
    assert np.array_equal(keys, k2)


@settings(max_examples=25, deadline=None)
@given(steps=st.integers(2, 20), layers=st.integers(1, 3),
       heads=st.integers(1, 3), k=st.integers(1, 6), seed=st.integers(0, 99))
def test_roundtrip_property(tmp_path_factory, steps, layers, heads, k, seed):
    rng = np.random.default_rng(seed)
    pool0 = k + rng.integers(0, 8)
    pools = (pool0 + np.cumsum(rng.integers(0, 2, size=steps))).astype(np.uint32)
    sel = np.empty((steps, layers, heads, k), dtype=np.uint32)
    for s in range(steps):
        for l in range(layers):
            for h in range(heads):
                sel[s, l, h] = np.sort(
                    rng.choice(int(pools[s]), size=k, replace=False))
    tr = TopKTrace("prop", sel, pools)
    path = tmp_path_factory.mktemp("tr") / "p.fxtk"
    save_trace(tr, path)
    back = load_trace(path, sample_id="prop")
    assert back.sample_id == "prop"
    assert np.array_equal(back.selections, sel)
    assert np.array_equal(back.pool_sizes, pools)
