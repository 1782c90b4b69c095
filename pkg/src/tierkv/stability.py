"""Temporal stability of per-head top-K page selections.

The primitive is a chance-corrected overlap between two K-subsets of an
N-page candidate pool: raw intersection is normalised so that identical sets
score 1 and the expected overlap of two uniform random subsets scores 0
(negative excursions clamp to 0).  Averaging the overlap between the anchor
step of a window and every later step in the window gives a per-head temporal
stability score; counting how often a head lands in the bottom fraction of
the per-window ranking yields the stable/unstable split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config, HeadId
from .errors import ConsistencyError, DegeneratePoolError
from .trace import TopKTrace


def rco(set_a, set_b, k: int, pool_size: int) -> float:
    """Random-corrected overlap of two K-subsets of a pool of ``pool_size``."""
    sa = {int(x) for x in set_a}
    sb = {int(x) for x in set_b}
    if len(sa) != k or len(sb) != k:
        raise ValueError(f"both sets must have exactly k={k} distinct elements")
    if k >= pool_size:
        raise DegeneratePoolError(
            f"overlap correction undefined: k={k} >= pool size {pool_size}")
    if sa and (max(sa) >= pool_size or max(sb) >= pool_size or
               min(sa) < 0 or min(sb) < 0):
        raise ValueError("set elements must lie in [0, pool_size)")
    return _rco_value(len(sa & sb), k, pool_size)


def _rco_value(intersection: int, k: int, pool_size: int) -> float:
    chance = k / pool_size
    return max(0.0, (intersection / k - chance) / (1.0 - chance))


def _window_pair_values(trace: TopKTrace, layer: int, head: int,
                        start: int, window: int) -> np.ndarray:
    """RCO between the window anchor and each later step; NaN where the pool
    is degenerate (N_t <= K) at the target step."""
    k = trace.k
    rows = trace.selections[:, layer, head, :]
    anchor = rows[start]
    out = np.empty(window - 1)
    for delta in range(1, window):
        t = start + delta
        pool = int(trace.pool_sizes[t])
        if k >= pool:
            out[delta - 1] = np.nan
            continue
        inter = np.intersect1d(anchor, rows[t]).size
        out[delta - 1] = _rco_value(inter, k, pool)
    return out


def temporal_stability(trace: TopKTrace, head: HeadId, start: int,
                       window: int) -> float:
    """Mean anchored overlap over one window; degenerate pairs are excluded."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if start < 0 or start + window - 1 >= trace.n_steps:
        raise ValueError(
            f"window [{start}, {start + window}) exceeds trace length {trace.n_steps}")
    vals = _window_pair_values(trace, head.layer, head.head, start, window)
    good = vals[~np.isnan(vals)]
    if good.size == 0:
        raise DegeneratePoolError("every pair in the window has a degenerate pool")
    return float(good.sum() / good.size)


@dataclass
class StabilityReport:
    """Windowed stability summary of one trace."""

    trace_id: str
    n_layers: int
    n_heads_per_layer: int
    window: int
    k: int
    window_starts: tuple[int, ...]
    ts: np.ndarray = field(repr=False)          # (L, H, n_windows)
    offset_rco: np.ndarray = field(repr=False)  # (L, H, window - 1), mean over windows
    degenerate_pairs: int = 0

    @property
    def n_windows(self) -> int:
        return len(self.window_starts)

    @property
    def mean_ts(self) -> np.ndarray:
        return self.ts.mean(axis=2)

    def bottom_counts(self, fraction: float = 0.25) -> np.ndarray:
        """Per-head count of windows in which the head ranked in the bottom
        ``fraction`` of heads by temporal stability."""
        n_bottom = int(math.floor(fraction * self.ts.shape[0] * self.ts.shape[1] + 0.5))
        counts = np.zeros(self.ts.shape[:2], dtype=np.int64)
        flat = counts.reshape(-1)
        for w in range(self.ts.shape[2]):
            flat[_bottom_heads(self.ts[:, :, w].reshape(-1), n_bottom)] += 1
        return counts

    def save_text(self, path) -> None:
        mean = self.mean_ts
        counts = self.bottom_counts()
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# tierkv stability report v1\n")
            fh.write(f"# trace={self.trace_id}\n")
            fh.write(f"# layers={self.n_layers}\n")
            fh.write(f"# heads_per_layer={self.n_heads_per_layer}\n")
            fh.write(f"# window={self.window}\n")
            fh.write(f"# k={self.k}\n")
            fh.write(f"# windows={self.n_windows}\n")
            fh.write(f"# degenerate_pairs={self.degenerate_pairs}\n")
            fh.write("# columns: layer head mean_ts bottom_quartile_count\n")
            for l in range(self.n_layers):
                for h in range(self.n_heads_per_layer):
                    fh.write(f"{l} {h} {mean[l, h]:.9g} {int(counts[l, h])}\n")


def _bottom_heads(ts_flat: np.ndarray, n_bottom: int) -> np.ndarray:
    """Indices of the n_bottom lowest-TS heads; ties break toward the lower
    flat (layer, head) index."""
    order = np.lexsort((np.arange(ts_flat.size), ts_flat))
    return order[:n_bottom]


def compute_stability_report(trace: TopKTrace, cfg: Config | None = None, *,
                             window: int | None = None,
                             stride: int | None = None) -> StabilityReport:
    if window is None:
        window = cfg.stability_window if cfg is not None else 32
    if stride is None:
        stride = cfg.stride if cfg is not None else window
    if window < 2:
        raise ValueError("window must be >= 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if trace.n_steps < window:
        raise ValueError(
            f"trace has {trace.n_steps} steps, too short for window {window}")
    starts = tuple(range(0, trace.n_steps - window + 1, stride))
    l_dim, h_dim = trace.n_layers, trace.n_heads_per_layer
    pair_vals = np.empty((l_dim, h_dim, len(starts), window - 1))
    for l in range(l_dim):
        for h in range(h_dim):
            for w, s in enumerate(starts):
                pair_vals[l, h, w] = _window_pair_values(trace, l, h, s, window)
    degenerate = int(np.isnan(pair_vals).sum())
    with np.errstate(invalid="ignore"):
        ts = np.nanmean(pair_vals, axis=3)
        offset_rco = np.nanmean(pair_vals, axis=2)
    if np.isnan(ts).any():
        raise DegeneratePoolError("a window has no non-degenerate pairs")
    return StabilityReport(
        trace_id=trace.sample_id, n_layers=l_dim, n_heads_per_layer=h_dim,
        window=window, k=trace.k, window_starts=starts, ts=ts,
        offset_rco=offset_rco, degenerate_pairs=degenerate)


# -- classification -----------------------------------------------------------

@dataclass
class HeadProfile:
    """Per-head stable/unstable classification plus the statistics behind it."""

    model_id: str
    n_layers: int
    n_heads_per_layer: int
    fraction: float
    unstable: tuple[HeadId, ...]
    mean_ts: np.ndarray = field(repr=False)        # (L, H)
    bottom_counts: np.ndarray = field(repr=False)  # (L, H)
    task: str = ""
    trace_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.unstable = tuple(sorted(HeadId(*h) for h in self.unstable))
        self._unstable_set = frozenset(self.unstable)

    @property
    def n_heads(self) -> int:
        return self.n_layers * self.n_heads_per_layer

    @property
    def stable(self) -> tuple[HeadId, ...]:
        return tuple(h for h in _iter_heads(self.n_layers, self.n_heads_per_layer)
                     if h not in self._unstable_set)

    def is_unstable(self, head: HeadId) -> bool:
        return HeadId(*head) in self._unstable_set

    def save_text(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# tierkv head profile v1\n")
            fh.write(f"# model_id={self.model_id}\n")
            fh.write(f"# task={self.task}\n")
            fh.write(f"# traces={','.join(self.trace_ids)}\n")
            fh.write(f"# fraction={self.fraction!r}\n")
            fh.write(f"# layers={self.n_layers}\n")
            fh.write(f"# heads_per_layer={self.n_heads_per_layer}\n")
            fh.write("# columns: layer head mean_ts bottom_count class\n")
            for l in range(self.n_layers):
                for h in range(self.n_heads_per_layer):
                    cls = "unstable" if HeadId(l, h) in self._unstable_set else "stable"
                    fh.write(f"{l} {h} {self.mean_ts[l, h]:.9g} "
                             f"{int(self.bottom_counts[l, h])} {cls}\n")

    @classmethod
    def load_text(cls, path) -> "HeadProfile":
        meta: dict[str, str] = {}
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    body = line[1:].strip()
                    if "=" in body:
                        key, _, val = body.partition("=")
                        meta[key.strip()] = val.strip()
                    continue
                parts = line.split()
                if len(parts) != 5:
                    raise ConsistencyError(f"{path}: malformed profile row {line!r}")
                rows.append(parts)
        try:
            l_dim = int(meta["layers"])
            h_dim = int(meta["heads_per_layer"])
            fraction = float(meta.get("fraction", "0.25"))
        except (KeyError, ValueError) as exc:
            raise ConsistencyError(f"{path}: missing or malformed profile header") from exc
        if len(rows) != l_dim * h_dim:
            raise ConsistencyError(
                f"{path}: expected {l_dim * h_dim} head rows, found {len(rows)}")
        mean_ts = np.zeros((l_dim, h_dim))
        counts = np.zeros((l_dim, h_dim), dtype=np.int64)
        unstable = []
        for l_s, h_s, ts_s, count_s, klass in rows:
            l, h = int(l_s), int(h_s)
            mean_ts[l, h] = float(ts_s)
            counts[l, h] = int(count_s)
            if klass == "unstable":
                unstable.append(HeadId(l, h))
            elif klass != "stable":
                raise ConsistencyError(f"{path}: unknown head class {klass!r}")
        traces = tuple(t for t in meta.get("traces", "").split(",") if t)
        return cls(model_id=meta.get("model_id", ""), n_layers=l_dim,
                   n_heads_per_layer=h_dim, fraction=fraction,
                   unstable=tuple(unstable), mean_ts=mean_ts,
                   bottom_counts=counts, task=meta.get("task", ""),
                   trace_ids=traces)


def _iter_heads(n_layers, n_heads_per_layer):
    for l in range(n_layers):
        for h in range(n_heads_per_layer):
            yield HeadId(l, h)


def classify_heads(reports, fraction: float, *, model_id: str = "model",
                   task: str = "") -> HeadProfile:
    """Aggregate bottom-fraction window counts across reports and mark the
    ``round(fraction * L * H)`` most frequently bottom-ranked heads unstable.

    Ties break toward the lower mean stability score, then the lower
    (layer, head) index.  The result is invariant to report ordering.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("classify_heads needs at least one report")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction!r}")
    l_dim = reports[0].n_layers
    h_dim = reports[0].n_heads_per_layer
    for r in reports:
        if (r.n_layers, r.n_heads_per_layer) != (l_dim, h_dim):
            raise ValueError("reports disagree on head grid dimensions")
    if sum(r.n_windows for r in reports) < 1:
        raise ValueError("no stability windows across the given reports")

    # canonical order => bitwise-identical aggregation regardless of input order
    canon = sorted(reports, key=lambda r: (r.trace_id, r.n_windows, r.ts.tobytes()))
    n_heads = l_dim * h_dim
    n_unstable = int(math.floor(fraction * n_heads + 0.5))
    counts = np.zeros(n_heads, dtype=np.int64)
    ts_sum = np.zeros(n_heads)
    n_windows = 0
    for r in canon:
        for w in range(r.n_windows):
            counts[_bottom_heads(r.ts[:, :, w].reshape(-1), n_unstable)] += 1
        ts_sum += r.ts.sum(axis=2).reshape(-1)
        n_windows += r.n_windows
    mean_ts = ts_sum / n_windows

    ranked = sorted(range(n_heads),
                    key=lambda i: (-counts[i], mean_ts[i], i))
    unstable = tuple(sorted(HeadId(i // h_dim, i % h_dim)
                            for i in ranked[:n_unstable]))
    return HeadProfile(
        model_id=model_id, n_layers=l_dim, n_heads_per_layer=h_dim,
        fraction=fraction, unstable=unstable,
        mean_ts=mean_ts.reshape(l_dim, h_dim),
        bottom_counts=counts.reshape(l_dim, h_dim), task=task,
        trace_ids=tuple(r.trace_id for r in canon))


def cross_task_overlap(profiles) -> np.ndarray:
    """Pairwise |A_i ∩ A_j| / C over the profiles' unstable sets, all of which
    must share the head grid and the cardinality C."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("cross_task_overlap needs at least one profile")
    dims = (profiles[0].n_layers, profiles[0].n_heads_per_layer)
    card = len(profiles[0].unstable)
    if card == 0:
        raise ValueError("profiles have empty unstable sets")
    sets = []
    for p in profiles:
        if (p.n_layers, p.n_heads_per_layer) != dims:
            raise ValueError("profiles disagree on head grid dimensions")
        if len(p.unstable) != card:
            raise ValueError(
                f"unstable-set cardinality mismatch: {len(p.unstable)} != {card}")
        sets.append(frozenset(p.unstable))
    n = len(sets)
    out = np.zeros((n, n))
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            v = len(sets[i] & sets[j]) / card
            out[i, j] = out[j, i] = v
    return out


def save_overlap_csv(matrix: np.ndarray, labels, path) -> None:
    labels = list(labels)
    if matrix.shape != (len(labels), len(labels)):
        raise ValueError("label count must match matrix dimensions")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task," + ",".join(labels) + "\n")
        for i, lab in enumerate(labels):
            fh.write(lab + "," + ",".join(f"{matrix[i, j]:.4f}"
                                          for j in range(len(labels))) + "\n")
