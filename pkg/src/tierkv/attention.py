"""Reference decode attention over full and page-sparse KV sets.

This is the numeric ground truth the paging machinery is judged against:
a double-precision softmax(q·K^T / sqrt(d))·V with max-subtraction, computed
either over every stored token or only over the tokens of a page selection.
With the full page budget the sparse path visits the same tokens in the same
order and reproduces the dense result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config, HeadId
from .errors import ConsistencyError
from .scoring import MinMaxMeta, TopKSet, build_minmax, score_pages, select_topk
from .trace import gen_synthetic_kv


@dataclass
class AttentionState:
    """All stored keys/values for one request, paged by position."""

    keys: np.ndarray = field(repr=False)    # (L, H, T, d) float64
    values: np.ndarray = field(repr=False)  # (L, H, T, d) float64
    page_size_tokens: int = 16

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.keys.ndim != 4 or self.keys.shape != self.values.shape:
            raise ValueError("keys and values must both be (L, H, T, d)")
        if self.page_size_tokens < 1:
            raise ValueError("page_size_tokens must be positive")

    @classmethod
    def from_random(cls, cfg: Config, tokens: int,
                    seed: int | None = None) -> "AttentionState":
        keys, values = gen_synthetic_kv(cfg, tokens, seed)
        return cls(keys=keys, values=values, page_size_tokens=cfg.page_size_tokens)

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[2]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[3]

    @property
    def n_pages(self) -> int:
        return -(-self.n_tokens // self.page_size_tokens)

    def page_token_slice(self, page: int) -> slice:
        if not 0 <= page < self.n_pages:
            raise ValueError(f"page {page} out of range (have {self.n_pages})")
        lo = page * self.page_size_tokens
        return slice(lo, min(lo + self.page_size_tokens, self.n_tokens))

    def minmax_for(self, head: HeadId) -> MinMaxMeta:
        return build_minmax(self.keys[head.layer, head.head], self.page_size_tokens)


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    d = keys.shape[1]
    logits = keys @ q / math.sqrt(d)
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return w @ values


def dense_decode(q: np.ndarray, state: AttentionState, head: HeadId) -> np.ndarray:
    """Attention output over every stored token of one head."""
    if state.n_tokens == 0:
        raise ValueError("attention over an empty state is undefined")
    q = np.asarray(q, dtype=float)
    l, h = head.layer, head.head
    return _attend(q, state.keys[l, h], state.values[l, h])


def sparse_decode(q: np.ndarray, state: AttentionState, head: HeadId,
                  topk, resident=None) -> np.ndarray:
    """Attention restricted to the tokens of the selected pages.

    ``topk`` is a :class:`TopKSet` or an iterable of page indices.  When
    ``resident`` is given (a container of fast-resident logical pages), any
    selected page missing from it raises a residency violation — attending to
    a null-mapped page would read the reserved null block.
    """
    if state.n_tokens == 0:
        raise ValueError("attention over an empty state is undefined")
    pages = sorted({int(p) for p in getattr(topk, "pages", topk)})
    if not pages:
        raise ValueError("sparse attention needs at least one page")
    if pages[0] < 0 or pages[-1] >= state.n_pages:
        raise ValueError(f"page selection out of range (have {state.n_pages})")
    if resident is not None:
        missing = [p for p in pages if p not in resident]
        if missing:
            raise ConsistencyError(
                f"residency violation: pages {missing} of {head} map to the null block")
    q = np.asarray(q, dtype=float)
    idx = np.concatenate([np.arange(state.page_token_slice(p).start,
                                    state.page_token_slice(p).stop)
                          for p in pages])
    l, h = head.layer, head.head
    return _attend(q, state.keys[l, h][idx], state.values[l, h][idx])


@dataclass
class SparsityStats:
    budget: int
    errors: np.ndarray = field(repr=False)  # one relative L2 error per (step, head)

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def p95(self) -> float:
        return float(np.percentile(self.errors, 95))


def sparsity_error(state: AttentionState, queries: np.ndarray,
                   budget: int) -> SparsityStats:
    """Relative L2 error of budgeted sparse attention against the dense
    reference, over a stream of per-step queries.

    ``queries`` has shape (S, d) for a single-head state or (S, L, H, d);
    each step selects pages by min/max score with the last page pinned.
    """
    queries = np.asarray(queries, dtype=float)
    L, H = state.keys.shape[0], state.keys.shape[1]
    if queries.ndim == 2:
        if (L, H) != (1, 1):
            raise ValueError("2-D query stream requires a single-head state")
        queries = queries[:, None, None, :]
    if queries.ndim != 4 or queries.shape[1:3] != (L, H):
        raise ValueError("queries must be (S, d) or (S, L, H, d)")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    last_page = state.n_pages - 1
    errors = np.empty((queries.shape[0], L, H))
    metas = {(l, h): state.minmax_for(HeadId(l, h))
             for l in range(L) for h in range(H)}
    for s in range(queries.shape[0]):
        for l in range(L):
            for h in range(H):
                head = HeadId(l, h)
                q = queries[s, l, h]
                sel = select_topk(score_pages(q, metas[(l, h)]), budget,
                                  pinned=(last_page,))
                ref = dense_decode(q, state, head)
                out = sparse_decode(q, state, head, sel)
                errors[s, l, h] = np.linalg.norm(out - ref) / np.linalg.norm(ref)
    return SparsityStats(budget=budget, errors=errors.reshape(-1))
