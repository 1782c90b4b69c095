"""Dense logical-to-physical page mapping with recycling and dirty tracking.

The table maps (request, layer, head, logical page) to a physical block id in
a flat pool.  Block 0 is a reserved null block: it is never allocated, never
written, and stands for "this logical page is not fast-tier resident".  A
shadow copy mirrors the table across explicit flushes; modified entries are
tracked exactly and returned as maximal contiguous runs in flattened
(request, layer, head, page) order, which is what a device-side copy of the
table would consume.

Recycling swaps evicted pages' physical blocks directly to promoted pages
(ascending logical order on both sides) instead of a free-then-allocate round
trip, so a steady-state re-rank does not touch the allocator at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HeadId
from .errors import ConsistencyError, PoolExhausted

NULL_BLOCK = 0


class PhysicalPool:
    """Flat block pool with a reserved null block and a LIFO free list."""

    def __init__(self, total_blocks: int, tier: str = "fast"):
        if total_blocks < 2:
            raise ValueError("pool needs at least one real block beyond the null block")
        if tier not in ("fast", "slow"):
            raise ValueError(f"unknown tier {tier!r}")
        self.tier = tier
        self.total_blocks = total_blocks
        # pop() order is 1, 2, 3, ... for a fresh pool
        self._free = list(range(total_blocks - 1, 0, -1))
        self._is_free = np.ones(total_blocks, dtype=bool)
        self._is_free[NULL_BLOCK] = False

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def live_count(self) -> int:
        return self.total_blocks - 1 - len(self._free)

    def allocate(self) -> int:
        if not self._free:
            raise PoolExhausted(f"{self.tier} pool exhausted "
                                f"({self.total_blocks - 1} blocks all live)")
        block = self._free.pop()
        self._is_free[block] = False
        return block

    def allocate_many(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        if n > len(self._free):
            raise PoolExhausted(f"{self.tier} pool exhausted: need {n}, "
                                f"have {len(self._free)} free")
        if n == 0:
            return np.empty(0, dtype=np.int32)
        taken = self._free[-n:][::-1]
        del self._free[-n:]
        ids = np.asarray(taken, dtype=np.int32)
        self._is_free[ids] = False
        return ids

    def release(self, block: int) -> None:
        block = int(block)
        if block == NULL_BLOCK:
            raise ConsistencyError("the null block can never be freed")
        if not 0 < block < self.total_blocks:
            raise ConsistencyError(f"block {block} is not part of this pool")
        if self._is_free[block]:
            raise ConsistencyError(f"double free of block {block}")
        self._free.append(block)
        self._is_free[block] = True

    def release_many(self, blocks) -> None:
        for b in np.asarray(blocks).reshape(-1):
            self.release(int(b))

    def clone(self) -> "PhysicalPool":
        new = PhysicalPool.__new__(PhysicalPool)
        new.tier = self.tier
        new.total_blocks = self.total_blocks
        new._free = list(self._free)
        new._is_free = self._is_free.copy()
        return new


@dataclass(frozen=True)
class RecyclePlan:
    """Outcome of one re-rank's block shuffle for a single head."""

    evicted: tuple[int, ...]                      # logical pages leaving the fast tier
    promoted: tuple[int, ...]                     # logical pages entering the fast tier
    reassigned: tuple[tuple[int, int, int], ...]  # (from_logical, to_logical, physical)
    freed_blocks: tuple[int, ...]                 # surplus evictions, returned to pool
    fresh_allocs: tuple[tuple[int, int], ...]     # (logical, physical) newly allocated
    copies: tuple[tuple[int, int], ...]           # (slow-tier source page, dest physical)


class BlockTable:
    """Dense (request, layer, head, logical page) -> physical block mapping."""

    def __init__(self, pool: PhysicalPool, num_layers: int,
                 kv_heads_per_layer: int, *, requests_cap: int = 4,
                 pages_cap: int = 8):
        if num_layers < 1 or kv_heads_per_layer < 1:
            raise ValueError("layer and head counts must be positive")
        self.pool = pool
        self.L = num_layers
        self.H = kv_heads_per_layer
        self._table = np.full((requests_cap, self.L, self.H, pages_cap),
                              NULL_BLOCK, dtype=np.int32)
        self._shadow = self._table.copy()
        self._dirty = np.zeros(self._table.shape, dtype=bool)
        self._n_pages = np.zeros((requests_cap, self.L, self.H), dtype=np.int32)
        self._rows: dict = {}
        self._free_rows: list[int] = list(range(requests_cap - 1, -1, -1))

    # -- shape bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self._table.shape

    def _grow_pages(self, need: int) -> None:
        cap = self._table.shape[3]
        new_cap = max(cap * 2, need)
        pad = [(0, 0)] * 3 + [(0, new_cap - cap)]
        self._table = np.pad(self._table, pad, constant_values=NULL_BLOCK)
        self._shadow = np.pad(self._shadow, pad, constant_values=NULL_BLOCK)
        self._dirty = np.pad(self._dirty, pad, constant_values=False)

    def _grow_rows(self) -> None:
        cap = self._table.shape[0]
        new_cap = cap * 2
        pad = [(0, new_cap - cap)] + [(0, 0)] * 3
        self._table = np.pad(self._table, pad, constant_values=NULL_BLOCK)
        self._shadow = np.pad(self._shadow, pad, constant_values=NULL_BLOCK)
        self._dirty = np.pad(self._dirty, pad, constant_values=False)
        self._n_pages = np.pad(self._n_pages, [(0, new_cap - cap), (0, 0), (0, 0)])
        self._free_rows = list(range(new_cap - 1, cap - 1, -1)) + self._free_rows

    def add_request(self, request_id) -> int:
        if request_id in self._rows:
            raise ConsistencyError(f"request {request_id!r} already registered")
        if not self._free_rows:
            self._grow_rows()
        row = self._free_rows.pop()
        self._rows[request_id] = row
        return row

    def release_request(self, request_id) -> int:
        """Free every live block of a request; returns the number freed."""
        row = self._row(request_id)
        entries = self._table[row]
        live = entries[entries != NULL_BLOCK]
        self.pool.release_many(live)
        self._dirty[row][entries != NULL_BLOCK] = True
        entries[:] = NULL_BLOCK
        self._n_pages[row] = 0
        del self._rows[request_id]
        self._free_rows.append(row)
        return int(live.size)

    def _row(self, request_id) -> int:
        try:
            return self._rows[request_id]
        except KeyError:
            raise ConsistencyError(f"unknown request {request_id!r}") from None

    # -- lookups ---------------------------------------------------------------

    def n_pages(self, request_id, head: HeadId) -> int:
        row = self._row(request_id)
        return int(self._n_pages[row, head.layer, head.head])

    def physical(self, request_id, head: HeadId, logical: int) -> int:
        row = self._row(request_id)
        if not 0 <= logical < self._n_pages[row, head.layer, head.head]:
            raise ValueError(f"logical page {logical} not allocated for {head}")
        return int(self._table[row, head.layer, head.head, logical])

    def physical_for_read(self, request_id, head: HeadId, logical: int) -> int:
        """Data-path lookup: a null mapping here is a residency violation."""
        block = self.physical(request_id, head, logical)
        if block == NULL_BLOCK:
            raise ConsistencyError(
                f"read of evicted page {logical} for {head}: null block is not data")
        return block

    def resident_pages(self, request_id, head: HeadId) -> np.ndarray:
        """Sorted logical indices currently mapped to real blocks."""
        row = self._row(request_id)
        n = self._n_pages[row, head.layer, head.head]
        entries = self._table[row, head.layer, head.head, :n]
        return np.flatnonzero(entries != NULL_BLOCK)

    def assert_resident(self, request_id, head: HeadId, pages) -> None:
        row = self._row(request_id)
        pages = np.asarray(list(pages), dtype=np.int64)
        if pages.size == 0:
            return
        n = self._n_pages[row, head.layer, head.head]
        if pages.min() < 0 or pages.max() >= n:
            raise ValueError("page index out of allocated range")
        entries = self._table[row, head.layer, head.head, pages]
        if (entries == NULL_BLOCK).any():
            missing = pages[entries == NULL_BLOCK]
            raise ConsistencyError(
                f"pages {missing.tolist()} of {head} are not fast-tier resident")

    # -- mutation ----------------------------------------------------------------

    def allocate_page(self, request_id, head: HeadId) -> int:
        """Append one logical page for a head, backed by a fresh block."""
        row = self._row(request_id)
        l, h = head.layer, head.head
        n = int(self._n_pages[row, l, h])
        if n == self._table.shape[3]:
            self._grow_pages(n + 1)
        block = self.pool.allocate()
        self._table[row, l, h, n] = block
        self._dirty[row, l, h, n] = True
        self._n_pages[row, l, h] = n + 1
        return n

    def allocate_pages(self, request_id, head: HeadId, count: int) -> np.ndarray:
        row = self._row(request_id)
        l, h = head.layer, head.head
        n = int(self._n_pages[row, l, h])
        if n + count > self._table.shape[3]:
            self._grow_pages(n + count)
        blocks = self.pool.allocate_many(count)
        self._table[row, l, h, n:n + count] = blocks
        self._dirty[row, l, h, n:n + count] = True
        self._n_pages[row, l, h] = n + count
        return np.arange(n, n + count)

    def allocate_page_all_heads(self, request_id) -> int:
        """Append the same new logical page to every head of a request.
        All heads must currently agree on their page count."""
        row = self._row(request_id)
        counts = self._n_pages[row]
        n = int(counts.reshape(-1)[0])
        if (counts != n).any():
            raise ConsistencyError("heads disagree on page count; "
                                   "cannot append in lockstep")
        if n == self._table.shape[3]:
            self._grow_pages(n + 1)
        blocks = self.pool.allocate_many(self.L * self.H)
        self._table[row, :, :, n] = blocks.reshape(self.L, self.H)
        self._dirty[row, :, :, n] = True
        self._n_pages[row] = n + 1
        return n

    def evict_to_null(self, request_id, head: HeadId, logical: int) -> int:
        """Drop a resident page's block back to the pool; returns the block."""
        row = self._row(request_id)
        l, h = head.layer, head.head
        if not 0 <= logical < self._n_pages[row, l, h]:
            raise ValueError(f"logical page {logical} not allocated for {head}")
        block = int(self._table[row, l, h, logical])
        if block == NULL_BLOCK:
            raise ConsistencyError(
                f"double eviction of page {logical} for {head}")
        self.pool.release(block)
        self._table[row, l, h, logical] = NULL_BLOCK
        self._dirty[row, l, h, logical] = True
        return block

    def evict_many(self, request_id, head: HeadId, logicals) -> np.ndarray:
        row = self._row(request_id)
        l, h = head.layer, head.head
        pages = np.asarray(sorted(int(p) for p in logicals), dtype=np.int64)
        if pages.size == 0:
            return np.empty(0, dtype=np.int32)
        if pages[0] < 0 or pages[-1] >= self._n_pages[row, l, h]:
            raise ValueError("logical page out of allocated range")
        blocks = self._table[row, l, h, pages]
        if (blocks == NULL_BLOCK).any():
            raise ConsistencyError("double eviction within batch")
        self.pool.release_many(blocks)
        self._table[row, l, h, pages] = NULL_BLOCK
        self._dirty[row, l, h, pages] = True
        return blocks.astype(np.int32)

    def recycle(self, request_id, head: HeadId, old_topk, new_topk,
                slow_resident=None) -> RecyclePlan:
        """Move blocks from pages leaving the selection to pages entering it.

        ``old_topk`` must be the head's currently resident selection and
        ``new_topk`` the freshly selected one.  Evicted and promoted pages are
        paired in ascending logical order; surplus evictions free blocks and
        surplus promotions draw fresh ones.  When ``slow_resident`` is given,
        every promoted page must appear in it (it needs a slow-tier copy to
        reload from).  Returns the plan, including the copy list pairing each
        promoted page with its destination block.
        """
        row = self._row(request_id)
        l, h = head.layer, head.head
        old = np.unique(np.asarray(list(old_topk), dtype=np.int64))
        new = np.unique(np.asarray(list(new_topk), dtype=np.int64))
        n = int(self._n_pages[row, l, h])
        for arr, name in ((old, "old"), (new, "new")):
            if arr.size and (arr[0] < 0 or arr[-1] >= n):
                raise ValueError(f"{name} selection references unallocated pages")
        evicted = np.setdiff1d(old, new, assume_unique=True)
        promoted = np.setdiff1d(new, old, assume_unique=True)

        if old.size and (self._table[row, l, h, old] == NULL_BLOCK).any():
            raise ConsistencyError("old selection references evicted pages")
        if promoted.size and (self._table[row, l, h, promoted] != NULL_BLOCK).any():
            raise ConsistencyError("promoted page is already resident")
        if slow_resident is not None:
            missing = [int(p) for p in promoted if int(p) not in slow_resident]
            if missing:
                raise ConsistencyError(
                    f"promoted pages {missing} have no slow-tier copy for {head}")

        m = min(evicted.size, promoted.size)
        reassigned = []
        if m:
            moved = self._table[row, l, h, evicted[:m]].copy()
            self._table[row, l, h, evicted[:m]] = NULL_BLOCK
            self._table[row, l, h, promoted[:m]] = moved
            self._dirty[row, l, h, evicted[:m]] = True
            self._dirty[row, l, h, promoted[:m]] = True
            reassigned = [(int(e), int(p), int(b))
                          for e, p, b in zip(evicted[:m], promoted[:m], moved)]
        freed = []
        for page in evicted[m:]:
            block = int(self._table[row, l, h, page])
            self.pool.release(block)
            self._table[row, l, h, page] = NULL_BLOCK
            self._dirty[row, l, h, page] = True
            freed.append(block)
        fresh = []
        for page in promoted[m:]:
            block = self.pool.allocate()
            self._table[row, l, h, page] = block
            self._dirty[row, l, h, page] = True
            fresh.append((int(page), block))
        copies = tuple((int(p), int(self._table[row, l, h, p])) for p in promoted)
        return RecyclePlan(
            evicted=tuple(int(p) for p in evicted),
            promoted=tuple(int(p) for p in promoted),
            reassigned=tuple(reassigned), freed_blocks=tuple(freed),
            fresh_allocs=tuple(fresh), copies=copies)

    # -- dirty tracking and the shadow ----------------------------------------

    def mark_dirty(self, request_id, head: HeadId, logical: int) -> None:
        row = self._row(request_id)
        if not 0 <= logical < self._n_pages[row, head.layer, head.head]:
            raise ValueError(f"logical page {logical} not allocated")
        self._dirty[row, head.layer, head.head, logical] = True

    def flush_dirty(self) -> list[tuple[int, int]]:
        """Apply dirty entries to the shadow and return them as maximal
        (offset, length) runs in flattened table order."""
        flat_dirty = self._dirty.reshape(-1)
        idx = np.flatnonzero(flat_dirty)
        if idx.size == 0:
            return []
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = idx[np.concatenate(([0], breaks + 1))]
        ends = idx[np.concatenate((breaks, [idx.size - 1]))]
        self._shadow.reshape(-1)[idx] = self._table.reshape(-1)[idx]
        flat_dirty[:] = False
        return [(int(s), int(e - s + 1)) for s, e in zip(starts, ends)]

    def shadow_equal(self) -> bool:
        return bool(np.array_equal(self._table, self._shadow))

    # -- invariants and debugging ----------------------------------------------

    def live_entries(self) -> np.ndarray:
        return self._table[self._table != NULL_BLOCK]

    def check_injective(self) -> None:
        live = self.live_entries()
        if np.unique(live).size != live.size:
            raise ConsistencyError("physical block mapped by two logical pages")

    def check_conservation(self) -> None:
        live = self.live_entries().size
        if self.pool.live_count != live:
            raise ConsistencyError(
                f"pool live count {self.pool.live_count} != table live entries {live}")
        if self.pool.free_count + self.pool.live_count + 1 != self.pool.total_blocks:
            raise ConsistencyError("free + live + null != total blocks")

    def clone(self) -> "BlockTable":
        new = BlockTable.__new__(BlockTable)
        new.pool = self.pool.clone()
        new.L, new.H = self.L, self.H
        new._table = self._table.copy()
        new._shadow = self._shadow.copy()
        new._dirty = self._dirty.copy()
        new._n_pages = self._n_pages.copy()
        new._rows = dict(self._rows)
        new._free_rows = list(self._free_rows)
        return new

    def canonical_form(self) -> np.ndarray:
        """Table with physical ids relabelled in first-appearance order, for
        comparing states that differ only by block naming."""
        flat = self._table.reshape(-1)
        out = np.zeros_like(flat)
        mapping: dict[int, int] = {NULL_BLOCK: NULL_BLOCK}
        next_id = 1
        nonzero = np.flatnonzero(flat)
        for pos in nonzero:
            block = int(flat[pos])
            if block not in mapping:
                mapping[block] = next_id
                next_id += 1
            out[pos] = mapping[block]
        return out.reshape(self._table.shape)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("request,layer,head,logical,physical,dirty\n")
            for request_id in sorted(self._rows, key=str):
                row = self._rows[request_id]
                for l in range(self.L):
                    for h in range(self.H):
                        for n in range(int(self._n_pages[row, l, h])):
                            fh.write(f"{request_id},{l},{h},{n},"
                                     f"{int(self._table[row, l, h, n])},"
                                     f"{int(self._dirty[row, l, h, n])}\n")


def naive_reassign(table: BlockTable, request_id, head: HeadId, old_topk,
                   new_topk, slow_resident=None) -> list[tuple[int, int]]:
    """Reference policy: evict everything leaving the selection, then allocate
    fresh blocks for everything entering it.  Same external contract as
    :meth:`BlockTable.recycle`; used for differential testing."""
    old = np.unique(np.asarray(list(old_topk), dtype=np.int64))
    new = np.unique(np.asarray(list(new_topk), dtype=np.int64))
    evicted = np.setdiff1d(old, new, assume_unique=True)
    promoted = np.setdiff1d(new, old, assume_unique=True)
    if slow_resident is not None:
        missing = [int(p) for p in promoted if int(p) not in slow_resident]
        if missing:
            raise ConsistencyError(f"promoted pages {missing} have no slow-tier copy")
    for page in evicted:
        table.evict_to_null(request_id, head, int(page))
    copies = []
    for page in promoted:
        block = table.pool.allocate()
        row = table._row(request_id)
        table._table[row, head.layer, head.head, page] = block
        table._dirty[row, head.layer, head.head, page] = True
        copies.append((int(page), block))
    return copies
