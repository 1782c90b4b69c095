"""Batch serving simulator for dense and two-tier paged attention policies.

The engine advances a single compute timeline: admissions are greedy FCFS
under a commitment cap (no preemption), each admitted request runs one
prefill, and the decode batch then steps synchronously — one token per
un-paused request per step.  Per-step cost is a fixed overhead plus a linear
charge on the KV bytes the batch's attention touches, so batching amortises
the overhead and page-sparse attention shrinks the byte term.

Under the ``flexicache`` policy every stable head keeps only its current
page selection in fast memory: the full prompt is copied to the slow tier
right after prefill (background transfer; non-selected blocks are evicted at
completion), pages filled during decode are copied incrementally, and every
``rerank_period`` steps each stable head refreshes its selection, recycling
blocks from evicted pages to promoted ones.  Promoted pages reload from the
slow tier with pausing priority: only the owning request sits out decode
steps until the reload lands.  Unstable heads stay fully resident and re-rank
every step.  The ``dense`` policy keeps everything fast-resident and attends
to every page.

Selection dynamics are synthetic: at each re-rank a head retains every
member of its current set with probability ``sim_persistence`` per elapsed
step and refills uniformly, with the newest page always pinned.  This
reproduces the transfer volumes and pause cadence of selection drift without
storing any key material.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, fields

import numpy as np

from .blocktable import BlockTable, PhysicalPool
from .config import Config, HeadId, full_pages_for_tokens, pages_for_tokens
from .errors import AdmissionError, ConsistencyError
from .tiering import TierStore, TransferEvent
from .workload import Request, assign_poisson_arrivals

DENSE = "dense"
FLEXICACHE = "flexicache"
POLICIES = (DENSE, FLEXICACHE)

_SLACK_PAGES = 4  # headroom per head for pages appended between bookkeeping points


def memory_savings(seq_tokens: int, cfg: Config) -> float:
    """Fast-tier page savings of selection-based residency over full residency.

    With N total pages, unstable fraction u, and top-K budget K, the resident
    fraction is ``(u*N + (1-u)*min(K, N)) / N``; the currently-appended page
    is pinned inside the K-page budget.  Savings are 1 minus that fraction:
    0 until the sequence outgrows the budget, then rising toward ``1 - u``.
    """
    if seq_tokens < cfg.page_size_tokens:
        raise ValueError("sequence must span at least one full page")
    n = pages_for_tokens(seq_tokens, cfg.page_size_tokens)
    u = cfg.unstable_fraction
    resident = u * n + (1.0 - u) * min(cfg.topk_pages, n)
    return 1.0 - resident / n


@dataclass(frozen=True)
class CostModel:
    step_overhead_s: float
    attn_cost_per_byte_s: float
    prefill_cost_per_token_s: float

    def __post_init__(self):
        if min(self.step_overhead_s, self.attn_cost_per_byte_s,
               self.prefill_cost_per_token_s) <= 0:
            raise ValueError("cost constants must be strictly positive")

    @classmethod
    def from_config(cls, cfg: Config) -> "CostModel":
        return cls(cfg.step_overhead_s, cfg.attn_cost_per_byte_s,
                   cfg.prefill_cost_per_token_s)

    def decode_step_cost(self, touched_bytes: int) -> float:
        return self.step_overhead_s + self.attn_cost_per_byte_s * touched_bytes

    def prefill_cost(self, prompt_tokens: int) -> float:
        return self.prefill_cost_per_token_s * prompt_tokens


@dataclass
class Metrics:
    policy: str
    mode: str
    n_requests: int = 0
    finished: int = 0
    queued_at_end: int = 0
    total_tokens: int = 0
    output_tokens: int = 0
    sim_time_s: float = 0.0
    throughput_tokens_per_s: float = 0.0
    ttft_mean_s: float = 0.0
    ttft_p50_s: float = 0.0
    ttft_p95_s: float = 0.0
    ttft_p99_s: float = 0.0
    tpot_mean_s: float = 0.0
    tpot_p50_s: float = 0.0
    tpot_p95_s: float = 0.0
    tpot_p99_s: float = 0.0
    peak_batch: int = 0
    peak_fast_bytes: int = 0
    boundary_fast_bytes_max: int = 0
    offload_bytes: int = 0
    reload_bytes: int = 0
    offload_events: int = 0
    reload_events: int = 0
    pause_fraction: float = 0.0
    pause_steps: int = 0
    promoted_fraction: float = 0.0
    score_evals: int = 0
    score_evals_naive: int = 0
    prefill_selections: int = 0
    layer_scoring_skips: int = 0
    offload_once_ok: bool = True

    def to_text(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(f.name for f in fields(cls))

    def to_csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, f.name)) for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _pct(values, q) -> float:
    if not values:
        return 0.0
    return float(np.percentile(np.asarray(values, dtype=float), q))


@dataclass
class SimResult:
    metrics: Metrics
    transfers: list[TransferEvent] = field(default_factory=list)


class _ReqState:
    __slots__ = (
        "req", "row", "tokens_total", "emitted", "t", "prefill_end",
        "first_token_time", "last_token_time", "reload_until", "offloaded",
        "sels", "resident", "appended", "pending_offload", "commit",
        "slow_commit", "finished")

    def __init__(self, req: Request):
        self.req = req
        self.row = -1
        self.tokens_total = req.prompt_tokens
        self.emitted = 0
        self.t = 0                       # decode steps completed
        self.prefill_end = 0.0
        self.first_token_time = 0.0
        self.last_token_time = 0.0
        self.reload_until = 0.0
        self.offloaded = False
        self.sels: dict[HeadId, np.ndarray] = {}
        self.resident: dict[HeadId, np.ndarray] = {}
        self.appended: list[int] = []
        self.pending_offload: dict[int, float] = {}
        self.commit = 0
        self.slow_commit = 0
        self.finished = False


class _Engine:
    def __init__(self, requests, cfg: Config, profile, policy: str, *,
                 mode: str, max_sim_time_s: float | None = None,
                 check_invariants: bool = True):
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
        if not requests:
            raise ValueError("workload is empty")
        self.cfg = cfg
        self.profile = profile
        self.policy = policy
        self.mode = mode
        self.max_sim_time = max_sim_time_s
        self.check = check_invariants
        self.cost = CostModel.from_config(cfg)
        self.rng = np.random.default_rng(cfg.rng_seed)

        self.ps = cfg.page_size_tokens
        self.pb = cfg.page_bytes
        self.LH = cfg.n_heads
        if policy == FLEXICACHE:
            if profile is None:
                raise ValueError("flexicache policy needs a head profile")
            self.stable = tuple(sorted(profile.stable))
            self.n_stable = len(self.stable)
            self.n_unstable = self.LH - self.n_stable
            self.all_stable_layers = sum(
                1 for l in range(cfg.num_layers)
                if not any(profile.is_unstable(HeadId(l, h))
                           for h in range(cfg.kv_heads_per_layer)))
            n_blocks = cfg.fast_tier_capacity_bytes // self.pb
            if n_blocks < 1:
                raise AdmissionError("fast tier smaller than one page")
            self.pool = PhysicalPool(n_blocks + 1, tier="fast")
            self.table = BlockTable(self.pool, cfg.num_layers,
                                    cfg.kv_heads_per_layer,
                                    requests_cap=8, pages_cap=64)
            self.tier = TierStore(cfg, profile)
        else:
            self.stable = ()
            self.n_stable = 0
            self.n_unstable = self.LH
            self.all_stable_layers = 0
            self.pool = None
            self.table = None
            self.tier = None

        order = sorted(range(len(requests)),
                       key=lambda i: (requests[i].arrival_time_s, i))
        self.pending = [_ReqState(requests[i]) for i in order]
        self.pending.reverse()  # pop() yields earliest arrival
        self.ready: list[_ReqState] = []
        self.to_prefill: list[_ReqState] = []
        self.active: list[_ReqState] = []
        self.events: list = []
        self._event_seq = 0

        self.now = 0.0
        self.committed = 0
        self.slow_committed = 0
        self.dense_pages = 0

        self.transfers: list[TransferEvent] = []
        self.m = Metrics(policy=policy, mode=mode, n_requests=len(requests))
        self._ttft: list[float] = []
        self._tpot: list[float] = []
        self._pause_time = 0.0
        self._decode_time = 0.0
        self._promoted_pages = 0
        self._rerank_slots = 0
        self._inflight_reloads: list[float] = []  # completion-time heap

    # -- commitments -----------------------------------------------------------

    def _commit_bytes(self, req: Request) -> int:
        n_max = req.max_total_pages(self.ps)
        if self.policy == DENSE:
            return n_max * self.LH * self.pb
        steady = (self.n_unstable * n_max
                  + self.n_stable * (min(self.cfg.topk_pages, n_max) + _SLACK_PAGES))
        peak = (req.prompt_pages(self.ps) + _SLACK_PAGES) * self.LH
        return max(steady, peak) * self.pb

    def _steady_commit_bytes(self, req: Request) -> int:
        n_max = req.max_total_pages(self.ps)
        steady = (self.n_unstable * n_max
                  + self.n_stable * (min(self.cfg.topk_pages, n_max) + _SLACK_PAGES))
        return steady * self.pb

    def _slow_commit_bytes(self, req: Request) -> int:
        return self.n_stable * req.max_total_pages(self.ps) * self.pb

    def _admissible(self, st: _ReqState) -> bool:
        cap = self.cfg.fast_tier_capacity_bytes
        commit = self._commit_bytes(st.req)
        slow = self._slow_commit_bytes(st.req) if self.policy == FLEXICACHE else 0
        if commit > cap or slow > self.cfg.slow_tier_capacity_bytes:
            raise AdmissionError(
                f"request {st.req.id} cannot fit even alone: needs {commit} fast / "
                f"{slow} slow bytes")
        if self.committed + commit > cap:
            return False
        if self.policy == FLEXICACHE and \
                self.slow_committed + slow > self.cfg.slow_tier_capacity_bytes:
            return False
        return True

    # -- event plumbing ----------------------------------------------------------

    def _push_event(self, time: float, kind: str, payload) -> None:
        heapq.heappush(self.events, (time, self._event_seq, kind, payload))
        self._event_seq += 1

    def _drain_events(self) -> None:
        while self.events and self.events[0][0] <= self.now:
            _, _, kind, payload = heapq.heappop(self.events)
            if kind == "offload_done":
                self._finish_prefill_offload(payload)

    def _sample_fast(self) -> None:
        if self.policy == FLEXICACHE:
            used = self.pool.live_count * self.pb
        else:
            used = self.dense_pages * self.pb
        if used > self.m.peak_fast_bytes:
            self.m.peak_fast_bytes = used

    # -- lifecycle ----------------------------------------------------------------

    def run(self) -> SimResult:
        while True:
            if self.max_sim_time is not None and self.now >= self.max_sim_time:
                break
            self._drain_events()
            while self.pending and self.pending[-1].req.arrival_time_s <= self.now:
                self.ready.append(self.pending.pop())
            while self.ready and self._admissible(self.ready[0]):
                st = self.ready.pop(0)
                self._admit(st)
            if self.to_prefill:
                self._prefill(self.to_prefill.pop(0))
                continue
            if self.active:
                steppers = [r for r in self.active if r.reload_until <= self.now]
                if steppers:
                    self._decode_step(steppers)
                    continue
                # whole batch paused on reloads: jump to whatever unblocks first
                wake = min(r.reload_until for r in self.active)
                if self.pending:
                    wake = min(wake, self.pending[-1].req.arrival_time_s)
                if self.events:
                    wake = min(wake, self.events[0][0])
                self.now = max(self.now, wake)
                continue
            # idle: jump to the next arrival or event
            candidates = []
            if self.pending:
                candidates.append(self.pending[-1].req.arrival_time_s)
            if self.events:
                candidates.append(self.events[0][0])
            if not candidates:
                break
            self.now = max(self.now, min(candidates))
        return self._finalize()

    def _admit(self, st: _ReqState) -> None:
        st.commit = self._commit_bytes(st.req)
        self.committed += st.commit
        if self.policy == FLEXICACHE:
            st.slow_commit = self._slow_commit_bytes(st.req)
            self.slow_committed += st.slow_commit
        self.to_prefill.append(st)

    def _prefill(self, st: _ReqState) -> None:
        self.now += self.cost.prefill_cost(st.req.prompt_tokens)
        st.prefill_end = self.now
        st.first_token_time = self.now
        st.last_token_time = self.now
        st.emitted = 1
        self._ttft.append(self.now - st.req.arrival_time_s)
        pages = st.req.prompt_pages(self.ps)
        if self.policy == FLEXICACHE:
            st.row = self.table.add_request(st.req.id)
            for l in range(self.cfg.num_layers):
                for h in range(self.cfg.kv_heads_per_layer):
                    self.table.allocate_pages(st.req.id, HeadId(l, h), pages)
            # initial selection per stable head: uniform subset, newest page pinned
            target = min(self.cfg.topk_pages, pages)
            for head in self.stable:
                sel = self._evolve_selection(np.empty(0, dtype=np.int64),
                                             pages, target, pages - 1, 0.0)
                st.sels[head] = sel
                st.resident[head] = sel
            self.m.prefill_selections += self.LH
            full = full_pages_for_tokens(st.req.prompt_tokens, self.ps)
            ev = self.tier.offload_after_prefill(st.req.id, full, self.now)
            self.transfers.append(ev)
            self.m.offload_bytes += ev.n_bytes
            self.m.offload_events += 1
            self._push_event(ev.completion_time_s, "offload_done", st)
        else:
            self.dense_pages += pages * self.LH
        self.active.append(st)
        if len(self.active) > self.m.peak_batch:
            self.m.peak_batch = len(self.active)
        self._sample_fast()
        if st.req.max_output_tokens == 1:
            self._finish(st)

    def _finish_prefill_offload(self, st: _ReqState) -> None:
        if st.finished:
            return
        st.offloaded = True
        appended = np.asarray(st.appended, dtype=np.int64)
        in_flight = np.asarray(
            [p for p, t in st.pending_offload.items() if t > self.now],
            dtype=np.int64)
        for head in self.stable:
            keep = np.union1d(np.union1d(st.sels[head], appended), in_flight)
            all_pages = np.arange(self.table.n_pages(st.req.id, head))
            drop = np.setdiff1d(all_pages, keep, assume_unique=True)
            if drop.size:
                self.table.evict_many(st.req.id, head, drop)
            st.resident[head] = keep
        released = st.commit - self._steady_commit_bytes(st.req)
        if released > 0:
            self.committed -= released
            st.commit -= released
        self._sample_fast()

    def _decode_step(self, steppers) -> None:
        touched = 0
        for r in steppers:
            pages = pages_for_tokens(r.tokens_total, self.ps)
            if self.policy == DENSE:
                touched += pages * self.LH * self.pb
            else:
                unstable_pages = min(self.cfg.topk_pages, pages)
                stable_pages = sum(len(r.sels[h]) for h in self.stable) \
                    + self.n_stable * len(r.appended)
                touched += (self.n_unstable * unstable_pages + stable_pages) * self.pb
        cost = self.cost.decode_step_cost(touched)
        paused = len(self.active) - len(steppers)
        if paused and self.check:
            # paused requests must be covered by reloads still in flight,
            # counted independently from the issued transfer events
            while self._inflight_reloads and self._inflight_reloads[0] <= self.now:
                heapq.heappop(self._inflight_reloads)
            if paused > len(self._inflight_reloads):
                raise ConsistencyError(
                    f"{paused} paused requests but only "
                    f"{len(self._inflight_reloads)} reloads in flight")
        self._pause_time += paused / len(self.active) * cost
        self.m.pause_steps += paused
        self._decode_time += cost
        self.now += cost

        for r in list(steppers):
            t = r.t + 1
            if self.policy == FLEXICACHE and t % self.cfg.rerank_period == 0:
                self._rerank(r)
            else:
                if self.policy == FLEXICACHE:
                    self.m.score_evals += self.n_unstable
                    self.m.layer_scoring_skips += self.all_stable_layers
            if self.policy == FLEXICACHE:
                self.m.score_evals_naive += self.LH
            self._append_token(r)
            r.t = t
            r.emitted += 1
            r.last_token_time = self.now
            if r.emitted >= r.req.max_output_tokens:
                self._finish(r)
        self._sample_fast()

    def _append_token(self, r: _ReqState) -> None:
        r.tokens_total += 1
        if (r.tokens_total - 1) % self.ps == 0:
            # first token of a new page
            if self.policy == FLEXICACHE:
                page = self.table.allocate_page_all_heads(r.req.id)
                r.appended.append(page)
                for head in self.stable:
                    if r.resident.get(head) is not None:
                        r.resident[head] = np.union1d(r.resident[head], [page])
            else:
                self.dense_pages += self.LH
        if self.policy == FLEXICACHE and r.tokens_total % self.ps == 0:
            filled = r.tokens_total // self.ps - 1
            completion = self.now
            for head in self.stable:
                ev = self.tier.incremental_offload(r.req.id, head, filled,
                                                   self.now, page_full=True)
                self.transfers.append(ev)
                self.m.offload_bytes += ev.n_bytes
                self.m.offload_events += 1
                completion = max(completion, ev.completion_time_s)
            r.pending_offload[filled] = completion

    def _evolve_selection(self, base: np.ndarray, pool: int, target: int,
                          pinned: int, p_eff: float) -> np.ndarray:
        if base.size:
            kept = base[self.rng.random(base.size) < p_eff]
        else:
            kept = base
        if pinned not in kept:
            kept = np.append(kept, pinned)
        if kept.size > target:
            drop_from = kept[kept != pinned]
            drop = self.rng.choice(drop_from, size=kept.size - target,
                                   replace=False)
            kept = np.setdiff1d(kept, drop, assume_unique=False)
        elif kept.size < target:
            mask = np.ones(pool, dtype=bool)
            mask[kept] = False
            extra = self.rng.choice(np.flatnonzero(mask),
                                    size=target - kept.size, replace=False)
            kept = np.concatenate([kept, extra])
        return np.sort(kept.astype(np.int64))

    def _rerank(self, r: _ReqState) -> None:
        self.m.score_evals += self.LH
        pool = pages_for_tokens(r.tokens_total, self.ps)
        target = min(self.cfg.topk_pages, pool)
        pinned = pool - 1
        p_eff = self.cfg.sim_persistence ** self.cfg.rerank_period
        appended = np.asarray(r.appended, dtype=np.int64)
        # drop pending offloads that have landed
        for page in [p for p, t in r.pending_offload.items() if t <= self.now]:
            del r.pending_offload[page]
        promoted_total = 0
        for head in self.stable:
            base = np.union1d(r.resident[head], appended) if r.offloaded \
                else np.union1d(r.sels[head], appended)
            new_sel = self._evolve_selection(base, pool, target, pinned, p_eff)
            if r.offloaded:
                evict_candidates = np.setdiff1d(base, new_sel, assume_unique=True)
                deferred = np.asarray(
                    [p for p in evict_candidates if p in r.pending_offload],
                    dtype=np.int64)
                keep = np.union1d(new_sel, deferred)
                plan = self.table.recycle(
                    r.req.id, head, base, keep,
                    slow_resident=self.tier.slow_pages(r.req.id, head))
                promoted_total += len(plan.promoted)
                r.resident[head] = keep
                if self.check and deferred.size == 0:
                    got = self.table.resident_pages(r.req.id, head)
                    if not np.array_equal(got, new_sel):
                        raise ConsistencyError(
                            f"boundary residency mismatch for {head}: "
                            f"{got.tolist()} != {new_sel.tolist()}")
                self._rerank_slots += target
            r.sels[head] = new_sel
        r.appended = []
        if promoted_total:
            ev = self.tier.reload_event(r.req.id, self.stable, promoted_total,
                                        self.now)
            self.transfers.append(ev)
            self.m.reload_bytes += ev.n_bytes
            self.m.reload_events += 1
            self._promoted_pages += promoted_total
            r.reload_until = ev.completion_time_s
            heapq.heappush(self._inflight_reloads, ev.completion_time_s)
        if self.policy == FLEXICACHE:
            used = self.pool.live_count * self.pb
            if used > self.m.boundary_fast_bytes_max:
                self.m.boundary_fast_bytes_max = used

    def _finish(self, st: _ReqState) -> None:
        st.finished = True
        self.active.remove(st)
        self.m.finished += 1
        self.m.total_tokens += st.req.prompt_tokens + st.emitted
        self.m.output_tokens += st.emitted
        if st.emitted > 1:
            self._tpot.append((st.last_token_time - st.first_token_time)
                              / (st.emitted - 1))
        if self.policy == FLEXICACHE:
            if self.check:
                self._audit_offload_once(st)
            self.table.release_request(st.req.id)
            self.tier.release_request(st.req.id)
        else:
            self.dense_pages -= pages_for_tokens(st.tokens_total, self.ps) * self.LH
        self.committed -= st.commit
        if self.policy == FLEXICACHE:
            self.slow_committed -= st.slow_commit

    def _audit_offload_once(self, st: _ReqState) -> None:
        full = full_pages_for_tokens(st.tokens_total, self.ps)
        for head in self.stable:
            counts = self.tier.offload_counts(st.req.id, head)
            if sorted(counts) != list(range(full)) or \
                    any(c != 1 for c in counts.values()):
                self.m.offload_once_ok = False
                raise ConsistencyError(
                    f"offload ledger for {head} of {st.req.id} is not "
                    f"write-once over {full} full pages: {counts}")

    def _finalize(self) -> SimResult:
        m = self.m
        # tokens of requests still in flight at a cutoff
        for st in self.active:
            m.total_tokens += st.req.prompt_tokens + st.emitted
            m.output_tokens += st.emitted
        m.queued_at_end = len(self.pending) + len(self.ready) + len(self.to_prefill)
        m.sim_time_s = self.now
        m.throughput_tokens_per_s = (m.total_tokens / m.sim_time_s
                                     if m.sim_time_s > 0 else 0.0)
        m.ttft_mean_s = float(np.mean(self._ttft)) if self._ttft else 0.0
        m.ttft_p50_s = _pct(self._ttft, 50)
        m.ttft_p95_s = _pct(self._ttft, 95)
        m.ttft_p99_s = _pct(self._ttft, 99)
        m.tpot_mean_s = float(np.mean(self._tpot)) if self._tpot else 0.0
        m.tpot_p50_s = _pct(self._tpot, 50)
        m.tpot_p95_s = _pct(self._tpot, 95)
        m.tpot_p99_s = _pct(self._tpot, 99)
        m.pause_fraction = (self._pause_time / self._decode_time
                            if self._decode_time > 0 else 0.0)
        m.promoted_fraction = (self._promoted_pages / self._rerank_slots
                               if self._rerank_slots else 0.0)
        return SimResult(metrics=m, transfers=self.transfers)


def run_offline(requests, cfg: Config, profile, policy: str, *,
                check_invariants: bool = True) -> SimResult:
    """Simulate a fully backlogged batch: every request is available at t=0."""
    reqs = [r if r.arrival_time_s == 0.0 else
            Request(r.id, r.prompt_tokens, r.max_output_tokens, 0.0)
            for r in requests]
    eng = _Engine(reqs, cfg, profile, policy, mode="offline",
                  check_invariants=check_invariants)
    return eng.run()


def run_online(requests, rate_per_s: float, cfg: Config, profile, policy: str, *,
               max_sim_time_s: float | None = None,
               check_invariants: bool = True) -> SimResult:
    """Simulate Poisson arrivals at ``rate_per_s`` requests per second.
    Requests whose arrival times are all zero get arrivals drawn from the
    configured seed; explicit arrival times are respected."""
    if rate_per_s <= 0:
        raise ValueError("arrival rate must be positive")
    if all(r.arrival_time_s == 0.0 for r in requests):
        requests = assign_poisson_arrivals(requests, rate_per_s,
                                           seed=cfg.rng_seed ^ 0x9E3779B9)
    eng = _Engine(requests, cfg, profile, policy, mode="online",
                  max_sim_time_s=max_sim_time_s,
                  check_invariants=check_invariants)
    return eng.run()
