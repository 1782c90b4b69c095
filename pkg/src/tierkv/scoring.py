"""Query-aware page scoring from per-page key min/max metadata.

Each KV page keeps the elementwise minimum and maximum of its keys.  For a
query q the page score sums, per dimension, the larger of q_i*min_i and
q_i*max_i — the maximum of q·k over the page's axis-aligned bounding box, and
therefore an upper bound on q·k for every key actually stored in the page.
Metadata is tiny (two vectors per page) and is allocated in coarse blocks so
the allocator is touched 128x less often than per-page bookkeeping would.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import HeadId

META_BLOCK_PAGES = 128


class MinMaxMeta:
    """Per-page key min/max vectors and fill counts for one head's pages."""

    def __init__(self, head_dim: int, page_size_tokens: int):
        if head_dim < 1 or page_size_tokens < 1:
            raise ValueError("head_dim and page_size_tokens must be positive")
        self.head_dim = head_dim
        self.page_size_tokens = page_size_tokens
        self.blocks_allocated = 0
        self._n_pages = 0
        self.mins = np.empty((0, head_dim))
        self.maxs = np.empty((0, head_dim))
        self.fill = np.empty(0, dtype=np.int32)

    @property
    def n_pages(self) -> int:
        return self._n_pages

    def add_page(self) -> int:
        if self._n_pages == self.mins.shape[0]:
            grow = META_BLOCK_PAGES
            self.mins = np.vstack([self.mins, np.full((grow, self.head_dim), np.inf)])
            self.maxs = np.vstack([self.maxs, np.full((grow, self.head_dim), -np.inf)])
            self.fill = np.concatenate([self.fill, np.zeros(grow, dtype=np.int32)])
            self.blocks_allocated += 1
        page = self._n_pages
        self.mins[page] = np.inf
        self.maxs[page] = -np.inf
        self.fill[page] = 0
        self._n_pages += 1
        return page

    def _check_page(self, page: int) -> None:
        if not 0 <= page < self._n_pages:
            raise ValueError(f"unknown page {page} (have {self._n_pages})")


def update_minmax(meta: MinMaxMeta, page: int, key: np.ndarray) -> None:
    """Fold one appended key into a page's bounds."""
    meta._check_page(page)
    if meta.fill[page] >= meta.page_size_tokens:
        raise ValueError(f"page {page} is full ({meta.page_size_tokens} keys)")
    key = np.asarray(key, dtype=float)
    if key.shape != (meta.head_dim,):
        raise ValueError(f"key must have shape ({meta.head_dim},)")
    np.minimum(meta.mins[page], key, out=meta.mins[page])
    np.maximum(meta.maxs[page], key, out=meta.maxs[page])
    meta.fill[page] += 1


def build_minmax(keys: np.ndarray, page_size_tokens: int) -> MinMaxMeta:
    """Vectorised construction from an (n_tokens, d) key matrix."""
    keys = np.asarray(keys, dtype=float)
    if keys.ndim != 2:
        raise ValueError("keys must be (n_tokens, head_dim)")
    n, d = keys.shape
    meta = MinMaxMeta(d, page_size_tokens)
    if n == 0:
        return meta
    n_pages = -(-n // page_size_tokens)
    for _ in range(n_pages):
        meta.add_page()
    starts = np.arange(n_pages) * page_size_tokens
    meta.mins[:n_pages] = np.minimum.reduceat(keys, starts, axis=0)
    meta.maxs[:n_pages] = np.maximum.reduceat(keys, starts, axis=0)
    fills = np.full(n_pages, page_size_tokens, dtype=np.int32)
    fills[-1] = n - (n_pages - 1) * page_size_tokens
    meta.fill[:n_pages] = fills
    return meta


def score_page(q: np.ndarray, meta: MinMaxMeta, page: int) -> float:
    """Upper bound on q·k over the page's keys."""
    meta._check_page(page)
    if meta.fill[page] == 0:
        raise ValueError(f"page {page} is empty; nothing to score")
    q = np.asarray(q, dtype=float)
    return float(np.sum(np.maximum(q * meta.mins[page], q * meta.maxs[page])))


def score_pages(q: np.ndarray, meta: MinMaxMeta) -> np.ndarray:
    """Scores for every page of one head; all pages must be non-empty."""
    if meta.n_pages == 0:
        return np.empty(0)
    if (meta.fill[:meta.n_pages] == 0).any():
        raise ValueError("cannot score a head with empty pages")
    q = np.asarray(q, dtype=float)
    mins = meta.mins[:meta.n_pages]
    maxs = meta.maxs[:meta.n_pages]
    return np.sum(np.maximum(q * mins, q * maxs), axis=1)


class MinMaxCache:
    """Fast-tier-resident metadata store keyed by (request, layer, head)."""

    def __init__(self, head_dim: int, page_size_tokens: int):
        self.head_dim = head_dim
        self.page_size_tokens = page_size_tokens
        self._metas: dict[tuple, MinMaxMeta] = {}

    def get_or_create(self, request_id, head: HeadId) -> MinMaxMeta:
        key = (request_id, HeadId(*head))
        meta = self._metas.get(key)
        if meta is None:
            meta = self._metas[key] = MinMaxMeta(self.head_dim, self.page_size_tokens)
        return meta

    def release_request(self, request_id) -> None:
        for key in [k for k in self._metas if k[0] == request_id]:
            del self._metas[key]

    @property
    def blocks_allocated(self) -> int:
        return sum(m.blocks_allocated for m in self._metas.values())

    def resident_bytes(self, bytes_per_element: int) -> int:
        per_page = 2 * self.head_dim * bytes_per_element
        return sum(m.n_pages * per_page for m in self._metas.values())


@dataclass(frozen=True)
class TopKSet:
    """An ordered selection of page indices for one head.  The page currently
    being appended is pinned by the caller, so it is always a member."""

    pages: tuple[int, ...]
    epoch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pages", tuple(sorted(int(p) for p in self.pages)))
        if len(set(self.pages)) != len(self.pages):
            raise ValueError("TopKSet pages must be distinct")
        if self.pages and self.pages[0] < 0:
            raise ValueError("TopKSet pages must be non-negative")

    def __contains__(self, page: int) -> bool:
        return int(page) in set(self.pages)

    def __len__(self) -> int:
        return len(self.pages)


def select_topk(scores, k: int, pinned=(), epoch: int = 0) -> TopKSet:
    """Pinned pages plus the highest-scoring others, up to min(k, n_pages).

    Ties break toward the higher score, then the lower page index, so the
    selection is a pure function of its inputs.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = scores.size
    pinned = sorted({int(p) for p in pinned})
    if pinned and (pinned[0] < 0 or pinned[-1] >= n):
        raise ValueError("pinned pages must reference scored pages")
    if len(pinned) > k:
        raise ValueError(f"cannot pin {len(pinned)} pages with k={k}")
    budget = min(k, n)
    chosen = list(pinned)
    if len(chosen) < budget:
        in_pinned = np.zeros(n, dtype=bool)
        in_pinned[pinned] = True
        order = np.lexsort((np.arange(n), -scores))
        for idx in order:
            if in_pinned[idx]:
                continue
            chosen.append(int(idx))
            if len(chosen) == budget:
                break
    return TopKSet(pages=tuple(chosen), epoch=epoch)


def rerank_due(head: HeadId, step: int, profile, period: int) -> bool:
    """Unstable heads re-rank every step; stable heads every ``period`` steps."""
    if period < 1:
        raise ValueError("period must be >= 1")
    if profile.is_unstable(head):
        return True
    return step % period == 0


def layer_scoring_skippable(layer: int, step: int, profile, period: int) -> bool:
    """True when no head in the layer is due, so the whole layer's scoring
    pass can be skipped."""
    heads = [HeadId(layer, h) for h in range(profile.n_heads_per_layer)]
    return not any(rerank_due(h, step, profile, period) for h in heads)
