import numpy as np
import pytest

from tierkv.config import Config, HeadId, all_heads
from tierkv.stability import HeadProfile


@pytest.fixture
def small_cfg():
    """2 layers x 4 heads, small pages — fast enough for per-test use."""
    return Config(num_layers=2, kv_heads_per_layer=4, topk_pages=32,
                  stability_window=16)


@pytest.fixture
def sim_cfg():
    return Config(num_layers=2, kv_heads_per_layer=4,
                  fast_tier_capacity_bytes=128 * 1024 * 1024)


def make_profile(cfg, n_unstable=None):
    """Profile marking the first n flat heads unstable."""
    n = cfg.n_unstable_heads() if n_unstable is None else n_unstable
    heads = list(all_heads(cfg))
    unstable = tuple(heads[:n])
    mean_ts = np.ones((cfg.num_layers, cfg.kv_heads_per_layer))
    for (l, h) in unstable:
        mean_ts[l, h] = 0.0
    counts = np.zeros((cfg.num_layers, cfg.kv_heads_per_layer), dtype=np.int64)
    return HeadProfile(model_id="fixture", n_layers=cfg.num_layers,
                       n_heads_per_layer=cfg.kv_heads_per_layer,
                       fraction=n / cfg.n_heads, unstable=unstable,
                       mean_ts=mean_ts, bottom_counts=counts, task="fixture")


@pytest.fixture
def small_profile(small_cfg):
    return make_profile(small_cfg)


@pytest.fixture
def sim_profile(sim_cfg):
    return make_profile(sim_cfg)
