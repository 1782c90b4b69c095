"""Shared helpers for the experiment scripts."""

import numpy as np

from tierkv.config import Config, all_heads
from tierkv.stability import HeadProfile


def default_profile(cfg: Config) -> HeadProfile:
    """Synthetic profile marking the first configured fraction of heads
    unstable — a stand-in for a profile measured from real traces."""
    heads = list(all_heads(cfg))
    unstable = tuple(heads[:cfg.n_unstable_heads()])
    mean_ts = np.ones((cfg.num_layers, cfg.kv_heads_per_layer))
    for head in unstable:
        mean_ts[head.layer, head.head] = 0.0
    counts = np.zeros((cfg.num_layers, cfg.kv_heads_per_layer), dtype=np.int64)
    return HeadProfile(model_id="synthetic", n_layers=cfg.num_layers,
                       n_heads_per_layer=cfg.kv_heads_per_layer,
                       fraction=len(unstable) / max(cfg.n_heads, 1),
                       unstable=unstable, mean_ts=mean_ts,
                       bottom_counts=counts, task="")
