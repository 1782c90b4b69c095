"""Two-tier page placement: slow-tier copies, the write-once offload ledger,
and transfer timing.

Stable heads keep complete page copies in the slow tier and only their
current selection in the fast tier; unstable heads never offload.  Every full
page is written to the slow tier exactly once — a large background copy after
prefill plus one incremental copy per page filled during decode — so later
evictions are free and promotions are pure reads.  Transfer cost is
``latency * chunks + bytes / bandwidth``; reloads carry pausing priority
because only the owning request waits on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config, HeadId
from .errors import AdmissionError, ConsistencyError

OFFLOAD = "offload"
RELOAD = "reload"
BACKGROUND = "background"
PAUSING = "pausing"


def transfer_time(n_bytes: int, cfg: Config, chunks: int = 1) -> float:
    """Link-crossing time for a transfer split into ``chunks`` pieces."""
    if n_bytes < 0:
        raise ValueError("n_bytes must be non-negative")
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    return cfg.link_latency_s * chunks + n_bytes / cfg.link_bandwidth_bytes_per_s


def chunks_for(n_bytes: int, cfg: Config) -> int:
    return max(1, math.ceil(n_bytes / cfg.transfer_chunk_bytes))


def promoted_delta(old_topk, new_topk) -> tuple[int, ...]:
    """Pages entering the selection, i.e. the ones that need a reload."""
    old = {int(p) for p in getattr(old_topk, "pages", old_topk)}
    new = {int(p) for p in getattr(new_topk, "pages", new_topk)}
    return tuple(sorted(new - old))


@dataclass(frozen=True)
class TransferEvent:
    direction: str            # "offload" | "reload"
    request_id: str
    heads: tuple[HeadId, ...]
    n_bytes: int
    issue_time_s: float
    completion_time_s: float
    priority: str             # "background" | "pausing"

    def __post_init__(self):
        if self.direction not in (OFFLOAD, RELOAD):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.priority not in (BACKGROUND, PAUSING):
            raise ValueError(f"unknown priority {self.priority!r}")
        if self.completion_time_s < self.issue_time_s:
            raise ValueError("transfer cannot complete before it is issued")


def write_transfer_log(events, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("direction,bytes,issue,completion,request,priority\n")
        for ev in events:
            fh.write(f"{ev.direction},{ev.n_bytes},{ev.issue_time_s:.9g},"
                     f"{ev.completion_time_s:.9g},{ev.request_id},{ev.priority}\n")


class TierStore:
    """Slow-tier residency sets and the per-page offload ledger."""

    def __init__(self, cfg: Config, profile):
        self.cfg = cfg
        self.profile = profile
        self._stable = tuple(sorted(profile.stable))
        self._slow: dict[tuple, set[int]] = {}
        self._counts: dict[tuple, dict[int, int]] = {}
        self.slow_bytes_used = 0
        # histogram of per-page offload counts over finished requests
        self.finished_count_hist: dict[int, int] = {}

    @property
    def stable_heads(self) -> tuple[HeadId, ...]:
        return self._stable

    def slow_pages(self, request_id, head: HeadId) -> set[int]:
        return self._slow.get((request_id, HeadId(*head)), set())

    def offload_counts(self, request_id, head: HeadId) -> dict[int, int]:
        return dict(self._counts.get((request_id, HeadId(*head)), {}))

    def _record(self, request_id, head: HeadId, pages) -> int:
        """Ledger the copy of ``pages``; returns the byte count."""
        key = (request_id, head)
        counts = self._counts.setdefault(key, {})
        resident = self._slow.setdefault(key, set())
        n_new = 0
        for page in pages:
            page = int(page)
            prev = counts.get(page, 0)
            if prev != 0:
                raise ConsistencyError(
                    f"page {page} of {head} offloaded twice for request {request_id!r}")
            counts[page] = 1
            resident.add(page)
            n_new += 1
        n_bytes = n_new * self.cfg.page_bytes
        if self.slow_bytes_used + n_bytes > self.cfg.slow_tier_capacity_bytes:
            raise AdmissionError(
                f"slow tier capacity exceeded: {self.slow_bytes_used + n_bytes} "
                f"> {self.cfg.slow_tier_capacity_bytes}")
        self.slow_bytes_used += n_bytes
        return n_bytes

    def offload_after_prefill(self, request_id, full_pages: int,
                              issue_time_s: float) -> TransferEvent:
        """One background copy of every full stable-head page of a request."""
        if full_pages < 0:
            raise ValueError("full_pages must be non-negative")
        for head in self._stable:
            if self._counts.get((request_id, head)):
                raise ConsistencyError(
                    f"request {request_id!r} already ran its post-prefill offload")
        total = 0
        for head in self._stable:
            total += self._record(request_id, head, range(full_pages))
        return TransferEvent(
            direction=OFFLOAD, request_id=str(request_id), heads=self._stable,
            n_bytes=total, issue_time_s=issue_time_s,
            completion_time_s=issue_time_s + transfer_time(
                total, self.cfg, chunks_for(total, self.cfg)),
            priority=BACKGROUND)

    def incremental_offload(self, request_id, head: HeadId, page: int,
                            issue_time_s: float, *,
                            page_full: bool = True) -> TransferEvent:
        """Copy one page that just became full during decode."""
        head = HeadId(*head)
        if self.profile.is_unstable(head):
            raise ConsistencyError(
                f"{head} is unstable; its pages are never offloaded")
        if not page_full:
            raise ConsistencyError(f"page {page} is not full; offload refused")
        n_bytes = self._record(request_id, head, [page])
        return TransferEvent(
            direction=OFFLOAD, request_id=str(request_id), heads=(head,),
            n_bytes=n_bytes, issue_time_s=issue_time_s,
            completion_time_s=issue_time_s + transfer_time(
                n_bytes, self.cfg, chunks_for(n_bytes, self.cfg)),
            priority=BACKGROUND)

    def reload_event(self, request_id, heads, total_pages: int,
                     issue_time_s: float) -> TransferEvent:
        """Pausing-priority reload of ``total_pages`` promoted pages."""
        heads = tuple(sorted(HeadId(*h) for h in heads))
        for head in heads:
            if self.profile.is_unstable(head):
                raise ConsistencyError(
                    f"{head} is unstable; it never reloads from the slow tier")
        n_bytes = total_pages * self.cfg.page_bytes
        return TransferEvent(
            direction=RELOAD, request_id=str(request_id), heads=heads,
            n_bytes=n_bytes, issue_time_s=issue_time_s,
            completion_time_s=issue_time_s + transfer_time(
                n_bytes, self.cfg, chunks_for(n_bytes, self.cfg)),
            priority=PAUSING)

    def release_request(self, request_id) -> None:
        """Drop a finished request's slow copies, folding its ledger into the
        count histogram so write-once can still be audited afterwards."""
        for head in self._stable:
            key = (request_id, head)
            counts = self._counts.pop(key, {})
            for c in counts.values():
                self.finished_count_hist[c] = self.finished_count_hist.get(c, 0) + 1
            pages = self._slow.pop(key, set())
            self.slow_bytes_used -= len(pages) * self.cfg.page_bytes
