"""Data-independent rearrangement on the untrusted store.

Everything here touches cells in an order fixed by region lengths and
construction parameters, never by contents: a bitonic sorting network,
resumable (quota-pumped) execution, PRF-tag shuffling, duplicate
suppression, and padded bucket-table construction.

Work is organized as Phases with uniform per-item cell-op costs, chained
into PhasePlans that can be pumped a few cell-ops at a time; the rebuild
jobs of both ORAM families are PhasePlans. Each phase has a batch
executor (numpy over read_many/write_many) and the sort phase also has a
scalar executor that issues the canonical read(i), read(j), write(i),
write(j) sequence per comparator; both produce identical region contents
and identical per-step counts.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import DUMMY, REAL, PrfKey, SealEngine, prf_eval_batch
from .storage import TracedStore

# dummy serial namespace for sort padding; live structures stay below this
FILLER_SERIAL_BASE = 1 << 40


def next_pow2(x: int) -> int:
    if x < 1:
        raise ValueError("x must be positive")
    return 1 << (x - 1).bit_length()


class CompareExchange(NamedTuple):
    i: int
    j: int
    ascending: bool


def bitonic_passes(m: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Comparator passes (I, J, ascending) for a power-of-two bitonic network.

    The sequence depends only on m. Within one pass all index pairs are
    disjoint, so a pass may execute in any order or in parallel.
    """
    if m < 2 or m & (m - 1):
        raise ValueError(f"length must be a power of two >= 2, got {m}")
    idx = np.arange(m, dtype=np.int64)
    passes = []
    k = 2
    while k <= m:
        j = k >> 1
        while j >= 1:
            partner = idx ^ j
            mask = partner > idx
            i_arr = idx[mask]
            j_arr = partner[mask]
            asc = (i_arr & k) == 0
            passes.append((i_arr, j_arr, asc))
            j >>= 1
        k <<= 1
    return passes


def bitonic_schedule(m: int) -> list[CompareExchange]:
    """The comparator sequence as explicit (i, j, ascending) steps.

    Length is m*log2(m)*(log2(m)+1)/4; applying it in order sorts any input.
    """
    out = []
    for i_arr, j_arr, asc in bitonic_passes(m):
        out.extend(
            CompareExchange(int(i), int(j), bool(a)) for i, j, a in zip(i_arr, j_arr, asc)
        )
    return out


def comparator_count(m: int) -> int:
    lg = m.bit_length() - 1
    return m * lg * (lg + 1) // 4


class PrfTagCache:
    """Vectorized prf_eval over identity codes, memoized per (key, domain).

    Reals and dummies live in separate dense tables indexed by addr/serial,
    grown on demand.
    """

    def __init__(self, key: PrfKey, domain: bytes):
        self.key = key
        self.domain = domain
        self._real = np.empty(0, dtype=np.uint64)
        self._dummy = np.empty(0, dtype=np.uint64)

    def _grow(self, table: np.ndarray, upto: int, parity: int) -> np.ndarray:
        if upto <= len(table):
            return table
        new_vals = prf_eval_batch(
            self.key,
            self.domain,
            [(v << 1) | parity for v in range(len(table), upto)],
        )
        return np.concatenate([table, new_vals])

    def lookup(self, kind: np.ndarray, tag: np.ndarray) -> np.ndarray:
        reals = kind == REAL
        if reals.any():
            self._real = self._grow(self._real, int(tag[reals].max()) + 1, 0)
        if (~reals).any():
            self._dummy = self._grow(self._dummy, int(tag[~reals].max()) + 1, 1)
        out = np.empty(len(tag), dtype=np.uint64)
        out[reals] = self._real[tag[reals]]
        out[~reals] = self._dummy[tag[~reals]]
        return out


class ByPrfTag:
    """Sort key: (PRF tag of the block identity, identity). Realizes shuffles."""

    def __init__(self, key: PrfKey, domain: bytes = b"shf"):
        self.cache = PrfTagCache(key, domain)

    def columns(self, kind, tag, aux):
        identity = (tag << np.uint64(1)) | kind.astype(np.uint64)
        return (self.cache.lookup(kind, tag), identity)


class ByAddrThenPriority:
    """Sort key: reals by (addr, priority) first, dummies by serial after.

    Priority lives in the aux byte; lower value means fresher copy.
    """

    def columns(self, kind, tag, aux):
        return (kind.astype(np.uint64), tag, aux.astype(np.uint64))


class ByDestIndex:
    """Sort key: client-assigned destination index; discard-class items go last.

    dest_real[a] / dest_dummy[s] give target offsets; items with aux == 2
    have no destination and sort to the tail.
    """

    def __init__(self, dest_real: np.ndarray, dest_dummy: np.ndarray):
        self.dest_real = dest_real.astype(np.uint64)
        self.dest_dummy = dest_dummy.astype(np.uint64)

    def columns(self, kind, tag, aux):
        discard = (aux == 2).astype(np.uint64)
        idx_r = np.minimum(tag, np.uint64(max(len(self.dest_real) - 1, 0)))
        idx_d = np.minimum(tag, np.uint64(max(len(self.dest_dummy) - 1, 0)))
        dest = np.where(kind == REAL, self.dest_real[idx_r], self.dest_dummy[idx_d])
        identity = (tag << np.uint64(1)) | kind.astype(np.uint64)
        return (discard, np.where(discard == 1, np.uint64(0), dest), identity)


class ByBucket:
    """Bucket-table sort keys over (bucket, class) with two orderings.

    class is the aux byte: 0 real, 1 bucket-labeled pad, 2 discard.
    group phase:  (bucket, class, identity)  - gathers each bucket's
                  reals followed by its pads, discards at the tail.
    evict phase:  (discard, bucket, kind, identity) - after excess pads
                  are marked, pushes all discards past the table prefix.
    """

    def __init__(self, key: PrfKey, buckets: int, bucket_size: int, phase: str):
        self.buckets = buckets
        self.bucket_size = bucket_size
        self.phase = phase
        self.cache = PrfTagCache(key, b"bkt")

    def bucket_of(self, kind, tag, aux):
        out = np.full(len(tag), self.buckets, dtype=np.uint64)
        reals = kind == REAL
        pads = (kind == DUMMY) & (aux == 1)
        if reals.any():
            out[reals] = self.cache.lookup(kind[reals], tag[reals]) % np.uint64(self.buckets)
        out[pads] = tag[pads] // np.uint64(self.bucket_size)
        return out

    def columns(self, kind, tag, aux):
        bucket = self.bucket_of(kind, tag, aux)
        identity = (tag << np.uint64(1)) | kind.astype(np.uint64)
        if self.phase == "group":
            return (bucket, aux.astype(np.uint64), identity)
        discard = (aux == 2).astype(np.uint64)
        return (discard, bucket, kind.astype(np.uint64), identity)


def _lex_cmp(cols_i, cols_j):
    """(greater, less) masks for lexicographic column tuples."""
    n = len(cols_i[0])
    gt = np.zeros(n, dtype=bool)
    lt = np.zeros(n, dtype=bool)
    eq = np.ones(n, dtype=bool)
    for a, b in zip(cols_i, cols_j):
        gt |= eq & (a > b)
        lt |= eq & (a < b)
        eq &= a == b
    return gt, lt


# ---------------------------------------------------------------------------
# Phases


class Phase:
    """A run of uniform-cost items executed through the traced store."""

    cost: int = 1  # cell-ops per item
    total: int = 0
    done: int = 0

    @property
    def remaining(self) -> int:
        return self.total - self.done

    def run(self, count: int) -> None:
        raise NotImplementedError

    def cellops_total(self) -> int:
        return self.total * self.cost


class SortPhase(Phase):
    """Bitonic sort of a region under a sort-key kind; 4 cell-ops/comparator."""

    cost = 4

    def __init__(self, store: TracedStore, engine: SealEngine, region: int, m: int, key_kind, scalar: bool = False):
        self.store = store
        self.engine = engine
        self.region = region
        self.m = m
        self.key = key_kind
        self.scalar = scalar
        self.passes = bitonic_passes(m)
        self.total = comparator_count(m)
        self._pass_idx = 0
        self._pass_pos = 0

    def run(self, count: int) -> None:
        while count > 0:
            i_arr, j_arr, asc = self.passes[self._pass_idx]
            avail = len(i_arr) - self._pass_pos
            take = min(count, avail)
            lo, hi = self._pass_pos, self._pass_pos + take
            if self.scalar:
                self._run_scalar(i_arr[lo:hi], j_arr[lo:hi], asc[lo:hi])
            else:
                self._run_batch(i_arr[lo:hi], j_arr[lo:hi], asc[lo:hi])
            self._pass_pos += take
            self.done += take
            count -= take
            if self._pass_pos == len(i_arr):
                self._pass_idx += 1
                self._pass_pos = 0

    def _run_batch(self, i_arr, j_arr, asc) -> None:
        store, eng = self.store, self.engine
        q = len(i_arr)
        both = np.concatenate([i_arr, j_arr])
        kind, tag, payload, aux = eng.unseal_batch(store.read_many(self.region, both))
        cols = self.key.columns(kind, tag, aux)
        gt, lt = _lex_cmp(tuple(c[:q] for c in cols), tuple(c[q:] for c in cols))
        swap = np.where(asc, gt, lt)
        sw2 = np.concatenate([swap, swap])
        flip = np.where(sw2, np.concatenate([np.arange(q, 2 * q), np.arange(q)]), np.arange(2 * q))
        store.write_many(
            self.region,
            both,
            eng.seal_batch(kind[flip], tag[flip], payload[flip], aux[flip]),
        )

    def _run_scalar(self, i_arr, j_arr, asc) -> None:
        store, eng = self.store, self.engine
        for i, j, a in zip(i_arr, j_arr, asc):
            i, j = int(i), int(j)
            bi = eng.unseal(store.read(self.region, i))
            bj = eng.unseal(store.read(self.region, j))
            ki = np.array([bi.kind], np.uint8)
            ti = np.array([bi.tag], np.uint64)
            ai = np.array([bi.aux], np.uint8)
            kj = np.array([bj.kind], np.uint8)
            tj = np.array([bj.tag], np.uint64)
            aj = np.array([bj.aux], np.uint8)
            gt, lt = _lex_cmp(self.key.columns(ki, ti, ai), self.key.columns(kj, tj, aj))
            swap = bool(gt[0]) if a else bool(lt[0])
            lo, hi = (bj, bi) if swap else (bi, bj)
            store.write(self.region, i, eng.seal(lo))
            store.write(self.region, j, eng.seal(hi))


class CopyPhase(Phase):
    """Re-sealed sequential copy; optionally stamps aux or renumbers dummies."""

    cost = 2

    def __init__(
        self,
        store: TracedStore,
        engine: SealEngine,
        src: int,
        src_start: int,
        count: int,
        dst: int,
        dst_start: int,
        set_aux: int | None = None,
        class_aux: bool = False,
        aux_ramp: tuple[int, int] | None = None,
        renumber_dummies_from: int | None = None,
        chunk: int = 4096,
    ):
        self.store = store
        self.engine = engine
        self.src = src
        self.src_start = src_start
        self.dst = dst
        self.dst_start = dst_start
        self.total = count
        self.set_aux = set_aux
        self.class_aux = class_aux  # reals -> 0, dummies -> 2 (discard)
        self.aux_ramp = aux_ramp  # aux = base + step * position (priority ladder)
        self._serial = renumber_dummies_from
        self.chunk = chunk

    def run(self, count: int) -> None:
        while count > 0:
            take = min(count, self.chunk)
            src_off = np.arange(self.src_start + self.done, self.src_start + self.done + take)
            dst_off = np.arange(self.dst_start + self.done, self.dst_start + self.done + take)
            kind, tag, payload, aux = self.engine.unseal_batch(
                self.store.read_many(self.src, src_off)
            )
            if self.set_aux is not None:
                aux = np.full(take, self.set_aux, dtype=np.uint8)
            elif self.class_aux:
                aux = np.where(kind == REAL, 0, 2).astype(np.uint8)
            elif self.aux_ramp is not None:
                base, step = self.aux_ramp
                aux = (base + step * (self.done + np.arange(take))).astype(np.uint8)
            if self._serial is not None:
                dmask = kind == DUMMY
                nd = int(dmask.sum())
                tag = tag.copy()
                tag[dmask] = np.arange(self._serial, self._serial + nd, dtype=np.uint64)
                self._serial += nd
            self.store.write_many(self.dst, dst_off, self.engine.seal_batch(kind, tag, payload, aux))
            self.done += take
            count -= take


class PadPhase(Phase):
    """Writes a run of fresh dummy cells; 1 cell-op per item."""

    cost = 1

    def __init__(
        self,
        store: TracedStore,
        engine: SealEngine,
        dst: int,
        dst_start: int,
        count: int,
        serial_start: int,
        aux: int,
        chunk: int = 8192,
    ):
        self.store = store
        self.engine = engine
        self.dst = dst
        self.dst_start = dst_start
        self.total = count
        self.serial_start = serial_start
        self.aux = aux
        self.chunk = chunk

    def run(self, count: int) -> None:
        b = self.engine.payload_size
        while count > 0:
            take = min(count, self.chunk)
            off = np.arange(self.dst_start + self.done, self.dst_start + self.done + take)
            kind = np.full(take, DUMMY, dtype=np.uint8)
            tag = np.arange(
                self.serial_start + self.done, self.serial_start + self.done + take, dtype=np.uint64
            )
            payload = np.zeros((take, b), dtype=np.uint8)
            aux = np.full(take, self.aux, dtype=np.uint8)
            self.store.write_many(self.dst, off, self.engine.seal_batch(kind, tag, payload, aux))
            self.done += take
            count -= take


class DedupePhase(Phase):
    """Oblivious duplicate suppression over a region sorted ByAddrThenPriority.

    One linear read+rewrite pass; in every run of equal real addresses all
    but the first (freshest) copy become fresh dummies. The access pattern
    is the full scan regardless of contents.
    """

    cost = 2

    def __init__(
        self,
        store: TracedStore,
        engine: SealEngine,
        region: int,
        m: int,
        serial_start: int,
        chunk: int = 4096,
    ):
        self.store = store
        self.engine = engine
        self.region = region
        self.total = m
        self.serial = serial_start
        self._prev_real_tag: int | None = None
        self.converted = 0
        self.chunk = chunk

    def run(self, count: int) -> None:
        while count > 0:
            take = min(count, self.chunk)
            off = np.arange(self.done, self.done + take)
            kind, tag, payload, aux = self.engine.unseal_batch(
                self.store.read_many(self.region, off)
            )
            reals = kind == REAL
            stale = np.zeros(take, dtype=bool)
            if take > 1:
                stale[1:] = reals[1:] & reals[:-1] & (tag[1:] == tag[:-1])
            if self._prev_real_tag is not None and reals[0] and int(tag[0]) == self._prev_real_tag:
                stale[0] = True
            ns = int(stale.sum())
            orig_last_tag = int(tag[-1])
            kind = np.where(stale, DUMMY, kind).astype(np.uint8)
            tag = tag.copy()
            tag[stale] = np.arange(self.serial, self.serial + ns, dtype=np.uint64)
            payload = payload.copy()
            payload[stale] = 0
            self.serial += ns
            self.converted += ns
            # a converted copy keeps its addr-run alive: chain on the original tag
            self._prev_real_tag = orig_last_tag if reals[-1] else None
            self.store.write_many(self.region, off, self.engine.seal_batch(kind, tag, payload, aux))
            self.done += take
            count -= take


class RefreshDummiesPhase(Phase):
    """Renumbers dummies 0..D-1 in scan order, marking all past keep_count
    as discard (aux 2); reals are normalized to aux 0. Full linear pass."""

    cost = 2

    def __init__(
        self,
        store: TracedStore,
        engine: SealEngine,
        region: int,
        m: int,
        keep_count: int,
        chunk: int = 4096,
    ):
        self.store = store
        self.engine = engine
        self.region = region
        self.total = m
        self.keep = keep_count
        self._counter = 0
        self.chunk = chunk

    def run(self, count: int) -> None:
        while count > 0:
            take = min(count, self.chunk)
            off = np.arange(self.done, self.done + take)
            kind, tag, payload, aux = self.engine.unseal_batch(
                self.store.read_many(self.region, off)
            )
            dmask = kind == DUMMY
            nd = int(dmask.sum())
            serials = np.arange(self._counter, self._counter + nd, dtype=np.uint64)
            tag = tag.copy()
            tag[dmask] = serials
            aux = np.zeros(take, dtype=np.uint8)
            aux[dmask] = np.where(serials < self.keep, 0, 2).astype(np.uint8)
            self._counter += nd
            self.store.write_many(self.region, off, self.engine.seal_batch(kind, tag, payload, aux))
            self.done += take
            count -= take


class BucketOverflow(Exception):
    """A bucket received more than bucket_size real items; retry with a fresh key."""

    def __init__(self, bucket: int):
        super().__init__(f"bucket {bucket} overflow")
        self.bucket = bucket


class MarkBucketPhase(Phase):
    """Linear pass over a region sorted by ByBucket(group): keeps each
    bucket's reals plus exactly enough pads to reach bucket_size, marking
    excess pads as discard. Records overflowing buckets without changing
    the pass's access pattern."""

    cost = 2

    def __init__(
        self,
        store: TracedStore,
        engine: SealEngine,
        region: int,
        m: int,
        key: ByBucket,
        chunk: int = 4096,
    ):
        self.store = store
        self.engine = engine
        self.region = region
        self.total = m
        self.key = key
        self.b = key.bucket_size
        self._bucket = -1
        self._reals = 0
        self._pads = 0
        self.overflow: list[int] = []
        self.chunk = chunk

    def run(self, count: int) -> None:
        while count > 0:
            take = min(count, self.chunk)
            off = np.arange(self.done, self.done + take)
            kind, tag, payload, aux = self.engine.unseal_batch(
                self.store.read_many(self.region, off)
            )
            bucket = self.key.bucket_of(kind, tag, aux).astype(np.int64)
            is_real = aux == 0
            is_pad = aux == 1
            new_seg = np.empty(take, dtype=bool)
            new_seg[0] = bucket[0] != self._bucket
            new_seg[1:] = bucket[1:] != bucket[:-1]
            creal = np.cumsum(is_real)
            cpad = np.cumsum(is_pad)
            # per-position count just before the current segment started
            base_r = np.full(take, -self._reals, dtype=np.int64)
            base_p = np.full(take, -self._pads, dtype=np.int64)
            base_r[new_seg] = (creal - is_real)[new_seg]
            base_p[new_seg] = (cpad - is_pad)[new_seg]
            base_r = np.maximum.accumulate(base_r)
            base_p = np.maximum.accumulate(base_p)
            rank_r = creal - base_r  # 1-based rank among the bucket's reals
            rank_p = cpad - base_p
            real_over = is_real & (rank_r > self.b)
            pad_budget = self.b - np.minimum(rank_r, self.b)  # at pads: reals complete
            pad_over = is_pad & (rank_p > pad_budget)
            if real_over.any():
                for bkt in np.unique(bucket[real_over]):
                    self.overflow.append(int(bkt))
            aux = aux.copy()
            aux[real_over | pad_over] = 2
            self._bucket = int(bucket[-1])
            self._reals = int(rank_r[-1])
            self._pads = int(rank_p[-1])
            self.store.write_many(self.region, off, self.engine.seal_batch(kind, tag, payload, aux))
            self.done += take
            count -= take


class ReadBlocksPhase(Phase):
    """Sequential read-only scan collecting unsealed blocks client-side."""

    cost = 1

    def __init__(
        self,
        store: TracedStore,
        engine: SealEngine,
        region: int,
        start: int,
        count: int,
        sink: list,
        label=None,
        chunk: int = 8192,
    ):
        self.store = store
        self.engine = engine
        self.region = region
        self.start = start
        self.total = count
        self.sink = sink
        self.label = label
        self.chunk = chunk

    def run(self, count: int) -> None:
        while count > 0:
            take = min(count, self.chunk)
            off = np.arange(self.start + self.done, self.start + self.done + take)
            kind, tag, payload, aux = self.engine.unseal_batch(
                self.store.read_many(self.region, off)
            )
            self.sink.append((self.label, kind, tag, payload.copy(), aux))
            self.done += take
            count -= take


class WriteBlocksPhase(Phase):
    """Sequential writes of client-computed blocks, materialized lazily.

    blocks_fn() must return (kind, tag, payload, aux) arrays of the given
    length; it is called on first execution, after earlier phases ran.
    """

    cost = 1

    def __init__(self, store: TracedStore, engine: SealEngine, dst: int, start: int, count: int, blocks_fn, chunk: int = 8192):
        self.store = store
        self.engine = engine
        self.dst = dst
        self.start = start
        self.total = count
        self.blocks_fn = blocks_fn
        self._blocks = None
        self.chunk = chunk

    def run(self, count: int) -> None:
        if self._blocks is None:
            self._blocks = self.blocks_fn()
        kind, tag, payload, aux = self._blocks
        while count > 0:
            take = min(count, self.chunk)
            lo = self.done
            off = np.arange(self.start + lo, self.start + lo + take)
            cells = self.engine.seal_batch(
                kind[lo : lo + take], tag[lo : lo + take], payload[lo : lo + take], aux[lo : lo + take]
            )
            self.store.write_many(self.dst, off, cells)
            self.done += take
            count -= take


class PhasePlan:
    """A sequential pipeline of phases pumped by cell-op budgets.

    Each phase carries a gate tick; pumping never crosses a phase whose
    gate is in the future, so rebuild inputs are only read once available.
    """

    def __init__(self, phases: list[Phase], gates: list[int] | None = None):
        self.phases = phases
        self.gates = gates or [0] * len(phases)
        self.idx = 0

    def cellops_total(self) -> int:
        return sum(p.cellops_total() for p in self.phases)

    def remaining(self, tick: int | None = None) -> int:
        """Cell-ops left; with a tick, only phases whose gate has opened."""
        rem = 0
        for i in range(self.idx, len(self.phases)):
            if tick is not None and self.gates[i] > tick:
                break
            rem += self.phases[i].remaining * self.phases[i].cost
        return rem

    @property
    def finished(self) -> bool:
        return self.idx >= len(self.phases)

    def pump(self, budget: int, tick: int | None = None) -> int:
        """Executes up to budget cell-ops at item granularity; returns usage."""
        used = 0
        while self.idx < len(self.phases):
            if tick is not None and self.gates[self.idx] > tick:
                break
            ph = self.phases[self.idx]
            if ph.remaining == 0:
                self.idx += 1
                continue
            k = min(ph.remaining, (budget - used) // ph.cost)
            if k == 0:
                break
            ph.run(k)
            used += k * ph.cost
        return used

    def run_all(self) -> int:
        used = 0
        while not self.finished:
            got = self.pump(1 << 30)
            if got == 0 and not self.finished:
                raise AssertionError("plan stalled")
            used += got
        return used


# ---------------------------------------------------------------------------
# SortJob: the public resumable sort


class PumpResult(NamedTuple):
    finished: bool
    done: int


class SortJob:
    """A resumable bitonic sort of one region under a fixed key kind."""

    def __init__(self, store: TracedStore, engine: SealEngine, region: int, m: int, key_kind, scalar: bool = False):
        self.phase = SortPhase(store, engine, region, m, key_kind, scalar=scalar)
        self.region = region
        self.m = m
        self.total_work = self.phase.total

    @property
    def cursor(self) -> int:
        return self.phase.done

    def pump(self, quota: int) -> PumpResult:
        """Executes exactly min(quota, remaining) comparators."""
        if quota < 1:
            raise ValueError("quota must be at least 1")
        self.phase.run(min(quota, self.phase.remaining))
        return PumpResult(self.phase.remaining == 0, self.phase.done)


def pump(job: SortJob, quota: int) -> PumpResult:
    return job.pump(quota)


def oblivious_shuffle(store: TracedStore, engine: SealEngine, region: int, m: int, key: PrfKey, scalar: bool = False) -> None:
    """Permute a region by sorting on PRF tags of block identities.

    Deterministic per key; over random keys the induced permutation of
    distinct blocks is uniform. The access sequence depends only on m.
    """
    SortJob(store, engine, region, m, ByPrfTag(key, b"shf"), scalar=scalar).pump(1 << 62)


def suppress_duplicates(
    store: TracedStore, engine: SealEngine, region: int, m: int, serial_start: int
) -> int:
    """Run the dedupe pass to completion; returns converted-copy count."""
    ph = DedupePhase(store, engine, region, m, serial_start)
    ph.run(m)
    return ph.converted


def plan_bucket_table(
    store: TracedStore,
    engine: SealEngine,
    items_region: int,
    items_len: int,
    key: PrfKey,
    buckets: int,
    bucket_size: int,
    table_region: int,
    scratch_region: int,
) -> tuple[PhasePlan, MarkBucketPhase]:
    """Phases building a padded bucket table from an items region.

    Pipeline: copy items in (reals class 0, input dummies class 2), pad
    with buckets*bucket_size bucket-labeled dummies (class 1) plus filler
    to the next power of two, sort by (bucket, class), mark excess pads,
    sort discards to the tail, copy the table prefix out.
    """
    cb = buckets * bucket_size
    m = next_pow2(items_len + cb)
    group = ByBucket(key, buckets, bucket_size, "group")
    evict = ByBucket(key, buckets, bucket_size, "evict")
    evict.cache = group.cache
    mark = MarkBucketPhase(store, engine, scratch_region, m, group)
    phases: list[Phase] = [
        CopyPhase(store, engine, items_region, 0, items_len, scratch_region, 0, class_aux=True),
        PadPhase(store, engine, scratch_region, items_len, cb, 0, aux=1),
        PadPhase(store, engine, scratch_region, items_len + cb, m - items_len - cb,
                 FILLER_SERIAL_BASE, aux=2),
        SortPhase(store, engine, scratch_region, m, group),
        mark,
        SortPhase(store, engine, scratch_region, m, evict),
        CopyPhase(store, engine, scratch_region, 0, cb, table_region, 0, set_aux=0),
    ]
    return PhasePlan(phases), mark


def build_bucket_table(
    store: TracedStore,
    engine: SealEngine,
    items_region: int,
    items_len: int,
    key: PrfKey,
    buckets: int,
    bucket_size: int,
    role: str = "bucket_table",
) -> int:
    """One build attempt; raises BucketOverflow for the caller to retry.

    Real items land in bucket prf_eval(key, "bkt", identity) mod buckets;
    every bucket is padded to exactly bucket_size cells.
    """
    cb = buckets * bucket_size
    m = next_pow2(items_len + cb)
    scratch = store.alloc(m, role=f"{role}.scratch")
    table = store.alloc(cb, role=role)
    plan, mark = plan_bucket_table(
        store, engine, items_region, items_len, key, buckets, bucket_size, table, scratch
    )
    plan.run_all()
    store.free(scratch)
    if mark.overflow:
        store.free(table)
        raise BucketOverflow(mark.overflow[0])
    return table


def build_bucket_table_retry(
    store: TracedStore,
    engine: SealEngine,
    items_region: int,
    items_len: int,
    key_fn,
    buckets: int,
    bucket_size: int,
    max_retries: int = 16,
    role: str = "bucket_table",
) -> tuple[int, PrfKey, int]:
    """Geometric retry wrapper: fresh key per attempt, up to max_retries.

    Returns (table_region, key, attempts_used).
    """
    for attempt in range(max_retries):
        key = key_fn(attempt)
        try:
            return build_bucket_table(
                store, engine, items_region, items_len, key, buckets, bucket_size, role=role
            ), key, attempt + 1
        except BucketOverflow:
            continue
    raise RuntimeError(f"bucket table build failed {max_retries} times")
