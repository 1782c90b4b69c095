"""Run configuration, head addressing, and page-size arithmetic.

A single :class:`Config` instance fixes the model geometry (layers, KV heads,
head dim), the paging and selection parameters (page size, top-K budget,
re-rank period, stability window), the two-tier memory envelope, and the
simulator cost-model constants.  Everything downstream is a pure function of
(config, seed, arguments).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, NamedTuple

from .errors import ConfigError


class HeadId(NamedTuple):
    """(layer, head) address of one KV head.  Tuple order gives the canonical
    tie-break ordering used throughout."""

    layer: int
    head: int


@dataclass(frozen=True)
class Config:
    # paging / selection
    page_size_tokens: int = 16
    topk_pages: int = 64
    unstable_fraction: float = 0.25
    rerank_period: int = 16
    stability_window: int = 32          # stability window W, in decode steps
    window_stride: int = 0           # 0 means "stride = stability_window" (non-overlapping)
    # model geometry
    num_layers: int = 4
    kv_heads_per_layer: int = 8
    head_dim: int = 64
    bytes_per_kv_element: int = 2
    # memory tiers
    fast_tier_capacity_bytes: int = 2 * 1024**3
    slow_tier_capacity_bytes: int = 64 * 1024**3
    link_bandwidth_bytes_per_s: float = 64e9
    link_latency_s: float = 10e-6
    transfer_chunk_bytes: int = 1 << 20
    # determinism
    rng_seed: int = 12345
    # simulator cost model and synthetic selection dynamics
    step_overhead_s: float = 2e-4
    attn_cost_per_byte_s: float = 1e-11
    prefill_cost_per_token_s: float = 1e-5
    sim_persistence: float = 0.98

    def __post_init__(self):
        _positive_int = [
            "page_size_tokens", "topk_pages", "rerank_period", "num_layers",
            "kv_heads_per_layer", "head_dim", "bytes_per_kv_element",
            "fast_tier_capacity_bytes", "slow_tier_capacity_bytes",
            "transfer_chunk_bytes",
        ]
        for name in _positive_int:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not 0.0 < self.unstable_fraction < 1.0:
            raise ConfigError(
                f"unstable_fraction must lie in (0, 1), got {self.unstable_fraction!r}")
        if self.stability_window < 2:
            raise ConfigError(f"stability_window must be >= 2, got {self.stability_window!r}")
        if not isinstance(self.window_stride, int) or self.window_stride < 0:
            raise ConfigError(f"window_stride must be a non-negative integer")
        if self.link_bandwidth_bytes_per_s <= 0:
            raise ConfigError("link_bandwidth_bytes_per_s must be positive")
        if self.link_latency_s < 0:
            raise ConfigError("link_latency_s must be non-negative")
        if not isinstance(self.rng_seed, int) or self.rng_seed < 0:
            raise ConfigError(f"rng_seed must be a non-negative integer, got {self.rng_seed!r}")
        if self.step_overhead_s <= 0 or self.attn_cost_per_byte_s <= 0 \
                or self.prefill_cost_per_token_s <= 0:
            raise ConfigError("cost-model constants must be strictly positive")
        if not 0.0 <= self.sim_persistence <= 1.0:
            raise ConfigError("sim_persistence must lie in [0, 1]")

    # -- derived quantities -------------------------------------------------

    @property
    def n_heads(self) -> int:
        return self.num_layers * self.kv_heads_per_layer

    @property
    def stride(self) -> int:
        return self.window_stride if self.window_stride else self.stability_window

    @property
    def page_bytes(self) -> int:
        """Bytes of one KV page for one head (keys and values)."""
        return self.page_size_tokens * self.head_dim * 2 * self.bytes_per_kv_element

    @property
    def minmax_bytes_per_page(self) -> int:
        """Bytes of per-page min/max key metadata for one head."""
        return 2 * self.head_dim * self.bytes_per_kv_element

    def n_unstable_heads(self, fraction: float | None = None) -> int:
        """round(fraction * L * H), half away from zero."""
        f = self.unstable_fraction if fraction is None else fraction
        return int(math.floor(f * self.n_heads + 0.5))


def all_heads(cfg: Config) -> Iterator[HeadId]:
    for layer in range(cfg.num_layers):
        for head in range(cfg.kv_heads_per_layer):
            yield HeadId(layer, head)


def pages_for_tokens(tokens: int, page_size_tokens: int) -> int:
    return -(-tokens // page_size_tokens)


def full_pages_for_tokens(tokens: int, page_size_tokens: int) -> int:
    return tokens // page_size_tokens


# -- flat key=value config files --------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def load_config(path) -> Config:
    """Parse a flat ``key = value`` text file.  Unknown and duplicate keys are
    rejected; missing keys keep their defaults."""
    seen: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            seen[key] = _parse_value(key, value, path, lineno)
    return Config(**seen)


def _parse_value(key: str, value: str, path, lineno: int):
    want = _FIELD_TYPES[key]
    is_float = "float" in str(want)
    try:
        return float(value) if is_float else int(value)
    except ValueError:
        kind = "float" if is_float else "int"
        raise ConfigError(f"{path}:{lineno}: key {key!r} expects {kind}, got {value!r}") from None


def save_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(Config):
            fh.write(f"{f.name} = {getattr(cfg, f.name)!r}\n")
