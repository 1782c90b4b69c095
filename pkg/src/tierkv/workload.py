"""Request descriptions and workload synthesis."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import Config, pages_for_tokens


@dataclass(frozen=True)
class Request:
    id: str
    prompt_tokens: int
    max_output_tokens: int
    arrival_time_s: float = 0.0

    def __post_init__(self):
        if self.prompt_tokens < 1:
            raise ValueError("prompt_tokens must be >= 1")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.arrival_time_s < 0:
            raise ValueError("arrival_time_s must be non-negative")

    def prompt_pages(self, page_size_tokens: int) -> int:
        return pages_for_tokens(self.prompt_tokens, page_size_tokens)

    def max_total_pages(self, page_size_tokens: int) -> int:
        return pages_for_tokens(self.prompt_tokens + self.max_output_tokens,
                                page_size_tokens)


def make_requests(n: int, prompt_tokens, output_tokens, *,
                  seed: int | None = None) -> list[Request]:
    """Uniform synthetic workload.  ``prompt_tokens`` / ``output_tokens`` may
    be ints or (lo, hi) ranges sampled uniformly per request."""
    rng = np.random.default_rng(seed) if seed is not None else None

    def draw(value):
        if isinstance(value, int):
            return value
        lo, hi = value
        if rng is None:
            raise ValueError("ranges need a seed")
        return int(rng.integers(lo, hi + 1))

    return [Request(id=f"r{i:04d}", prompt_tokens=draw(prompt_tokens),
                    max_output_tokens=draw(output_tokens))
            for i in range(n)]


def assign_poisson_arrivals(requests, rate_per_s: float,
                            seed: int | None = None) -> list[Request]:
    """Replace arrival times with a Poisson process of the given rate."""
    if rate_per_s <= 0:
        raise ValueError("arrival rate must be positive")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rate_per_s, size=len(requests))
    times = np.cumsum(gaps)
    return [replace(r, arrival_time_s=float(t)) for r, t in zip(requests, times)]


def load_workload(path) -> list[Request]:
    """One request per line: ``prompt_tokens output_tokens [arrival_s]``."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected "
                                 f"'prompt output [arrival]', got {line!r}")
            arrival = float(parts[2]) if len(parts) == 3 else 0.0
            out.append(Request(id=f"r{len(out):04d}",
                               prompt_tokens=int(parts[0]),
                               max_output_tokens=int(parts[1]),
                               arrival_time_s=arrival))
    if not out:
        raise ValueError(f"{path}: empty workload")
    return out
