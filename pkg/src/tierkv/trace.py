"""Top-K selection traces: binary container I/O and synthetic generators.

A trace records, for every decode step and every (layer, head), the set of K
candidate pages the head selected, together with the candidate-pool size at
that step.  The on-disk container is little-endian::

    magic   4 bytes  b"FXTK"
    version u32      1
    D       u32      number of decode steps
    L       u16      layers
    H       u16      KV heads per layer
    K       u16      selection size
    then per step s:
        N_s u32      candidate pool size
        L*H records of K u32 page indices (layer-major, head-minor)

Parse failures raise :class:`TraceFormatError` naming the byte offset of the
offending field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import Config, HeadId
from .errors import TraceFormatError

MAGIC = b"FXTK"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")


@dataclass
class TopKTrace:
    sample_id: str
    selections: np.ndarray = field(repr=False)   # (D, L, H, K) uint32
    pool_sizes: np.ndarray = field(repr=False)   # (D,) uint32

    def __post_init__(self):
        self.selections = np.ascontiguousarray(self.selections, dtype=np.uint32)
        self.pool_sizes = np.ascontiguousarray(self.pool_sizes, dtype=np.uint32)
        if self.selections.ndim != 4:
            raise ValueError("selections must have shape (D, L, H, K)")
        if self.pool_sizes.shape != (self.selections.shape[0],):
            raise ValueError("pool_sizes must have one entry per step")
        bad = _first_violation(self.selections, self.pool_sizes)
        if bad is not None:
            raise ValueError(bad[0])

    @property
    def n_steps(self) -> int:
        return self.selections.shape[0]

    @property
    def n_layers(self) -> int:
        return self.selections.shape[1]

    @property
    def n_heads_per_layer(self) -> int:
        return self.selections.shape[2]

    @property
    def k(self) -> int:
        return self.selections.shape[3]

    def head_selections(self, head: HeadId) -> np.ndarray:
        """(D, K) view of one head's selections."""
        return self.selections[:, head.layer, head.head, :]


def _first_violation(sel: np.ndarray, pools: np.ndarray):
    """Return (message, step, flat_record_index) for the first invariant
    violation, or None.  flat_record_index is the (l*H + h) record within the
    step, or -1 when the violation is on the pool-size field itself."""
    d = sel.shape[0]
    if d == 0:
        return None
    drop = np.flatnonzero(np.diff(pools.astype(np.int64)) < 0)
    if drop.size:
        s = int(drop[0]) + 1
        return (f"candidate pool shrinks at step {s} "
                f"({int(pools[s - 1])} -> {int(pools[s])})", s, -1)
    over = sel >= pools[:, None, None, None]
    if over.any():
        s, l, h, j = map(int, np.argwhere(over)[0])
        return (f"page index {int(sel[s, l, h, j])} >= pool size {int(pools[s])} "
                f"at step {s}, layer {l}, head {h}", s,
                (l * sel.shape[2] + h) * sel.shape[3] + j)
    if sel.shape[3] > 1:
        srt = np.sort(sel, axis=3)
        dup = srt[..., 1:] == srt[..., :-1]
        if dup.any():
            s, l, h, _ = map(int, np.argwhere(dup)[0])
            return (f"duplicate page index within selection at step {s}, "
                    f"layer {l}, head {h}", s, (l * sel.shape[2] + h) * sel.shape[3])
    return None


# -- container I/O -----------------------------------------------------------

def save_trace(trace: TopKTrace, path) -> None:
    d, l, h, k = trace.selections.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, l, h, k))
        for s in range(d):
            fh.write(struct.pack("<I", int(trace.pool_sizes[s])))
            fh.write(trace.selections[s].astype("<u4").tobytes())


def load_trace(path, sample_id: str | None = None) -> TopKTrace:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TraceFormatError(
            f"truncated header: need {_HEADER.size} bytes, have {len(blob)}", 0)
    magic, version, d, l, h, k = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}", 4)
    if l == 0 or h == 0 or k == 0:
        raise TraceFormatError(f"zero dimension in header (L={l}, H={h}, K={k})", 12)
    step_bytes = 4 + l * h * k * 4
    want = _HEADER.size + d * step_bytes
    if len(blob) < want:
        raise TraceFormatError(
            f"truncated: need {want} bytes for {d} steps, have {len(blob)}", len(blob))
    if len(blob) > want:
        raise TraceFormatError("trailing data after last step", want)

    pools = np.empty(d, dtype=np.uint32)
    sel = np.empty((d, l, h, k), dtype=np.uint32)
    for s in range(d):
        base = _HEADER.size + s * step_bytes
        pools[s] = struct.unpack_from("<I", blob, base)[0]
        sel[s] = np.frombuffer(blob, dtype="<u4", count=l * h * k,
                               offset=base + 4).reshape(l, h, k)

    bad = _first_violation(sel, pools)
    if bad is not None:
        msg, s, rec = bad
        base = _HEADER.size + s * step_bytes
        offset = base if rec < 0 else base + 4 + rec * 4
        raise TraceFormatError(msg, offset)

    if sample_id is None:
        sample_id = _stem(path)
    return TopKTrace(sample_id=sample_id, selections=sel, pool_sizes=pools)


def _stem(path) -> str:
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[0] if "." in name else name


# -- synthetic generators -----------------------------------------------------

def gen_synthetic_trace(cfg: Config, planted_unstable, persistence: float,
                        steps: int, *, initial_pool: int = 1024,
                        sample_id: str = "synthetic",
                        seed: int | None = None) -> TopKTrace:
    """Generate a trace with a planted stable/unstable head split.

    Stable heads re-sample each step from the previous selection, retaining
    every element independently with probability ``persistence``; the
    replacements are drawn uniformly from the rest of the pool.  Planted
    unstable heads draw an independent uniform K-subset every step.  The
    candidate pool starts at ``initial_pool`` pages and grows by one page per
    ``cfg.page_size_tokens`` steps, mirroring decode-time cache growth.
    """
    if not 0.0 <= persistence <= 1.0:
        raise ValueError(f"persistence must lie in [0, 1], got {persistence!r}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    k = cfg.topk_pages
    if k > initial_pool:
        raise ValueError(f"K={k} exceeds candidate pool at step 0 ({initial_pool})")
    l_dim, h_dim = cfg.num_layers, cfg.kv_heads_per_layer
    unstable = np.zeros((l_dim, h_dim), dtype=bool)
    for hid in planted_unstable:
        layer, head = hid
        if not (0 <= layer < l_dim and 0 <= head < h_dim):
            raise ValueError(f"planted head {(layer, head)} out of range")
        unstable[layer, head] = True

    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    sel = np.empty((steps, l_dim, h_dim, k), dtype=np.uint32)
    pools = np.empty(steps, dtype=np.uint32)
    for s in range(steps):
        pool = initial_pool + s // cfg.page_size_tokens
        pools[s] = pool
        for l in range(l_dim):
            for h in range(h_dim):
                if s == 0 or unstable[l, h]:
                    row = rng.choice(pool, size=k, replace=False)
                elif persistence >= 1.0:
                    row = sel[s - 1, l, h]
                else:
                    prev = sel[s - 1, l, h]
                    kept = prev[rng.random(k) < persistence]
                    need = k - kept.size
                    if need:
                        avail = np.ones(pool, dtype=bool)
                        avail[kept] = False
                        row = np.concatenate(
                            [kept, rng.choice(np.flatnonzero(avail), size=need,
                                              replace=False)])
                    else:
                        row = kept
                sel[s, l, h] = np.sort(row.astype(np.uint32))
    return TopKTrace(sample_id=sample_id, selections=sel, pool_sizes=pools)


def gen_synthetic_kv(cfg: Config, tokens: int, seed: int | None = None):
    """Deterministic unit-scale key/value tensors of shape (L, H, tokens, d)."""
    if tokens < 0:
        raise ValueError("tokens must be non-negative")
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    shape = (cfg.num_layers, cfg.kv_heads_per_layer, tokens, cfg.head_dim)
    keys = rng.standard_normal(shape)
    values = rng.standard_normal(shape)
    return keys, values
