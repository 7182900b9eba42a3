"""Square-root ORAM: permuted main memory plus a small fully-scanned shelter.

Amortized mode reshuffles inline every k = ceil(sqrt(n)) accesses, so the
boundary access costs a full rebuild (the Omega(n) worst-case spike).
De-amortized mode pipelines the next epoch's rebuild through a fixed
per-access work quota: while epoch j serves from main memory M_j, the
frozen previous shelter, and the live shelter, a background job assembles
M_{j+1} from (M_j, previous shelter), finishing exactly at the epoch
boundary. Worst-case per-access work then matches the amortized average.

The client holds the position map (addr -> offset) and the dummy offset
list for the current permutation; both are recomputed from PRF tag ranks
at each epoch, with no extra server traffic.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_PAYLOAD,
    OP_WRITE,
    Block,
    DetRng,
    LogicalOp,
    PrfKey,
    SealEngine,
    prf_eval_batch,
)
from .obliv_sort import (
    ByAddrThenPriority,
    ByDestIndex,
    CopyPhase,
    DedupePhase,
    PadPhase,
    PhasePlan,
    RefreshDummiesPhase,
    SortPhase,
    next_pow2,
    oblivious_shuffle,
)
from .storage import TracedStore

MODE_AMORTIZED = "amortized"
MODE_DEAMORTIZED = "deamortized"

_SHELTER_SERIAL_BASE = 1 << 41
_FILL_SERIAL_BASE = 1 << 42
_DEDUPE_SERIAL_BASE = 1 << 43


@dataclass
class SqrtConfig:
    n: int
    payload_size: int = DEFAULT_PAYLOAD
    mode: str = MODE_DEAMORTIZED
    seed: bytes = b"\x00" * 16

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("n must be at least 4")
        if self.mode not in (MODE_AMORTIZED, MODE_DEAMORTIZED):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.k = math.isqrt(self.n)
        if self.k * self.k < self.n:
            self.k += 1
        if self.k > 254:
            raise ValueError("epoch length above 254 exceeds the priority byte")
        self.main_len = next_pow2(self.n + 2 * self.k)
        assert self.k * self.k >= self.n


def _perm_ranks(key: PrfKey, n: int, n_dummies: int):
    """Offsets of reals 0..n-1 and dummies 0..n_dummies-1 under the epoch
    permutation: the rank of each identity's PRF tag, ties on identity.

    Matches the (tag, identity) order the oblivious sorts use, so the map
    is computed client-side without touching the server.
    """
    ids = np.empty(n + n_dummies, dtype=np.uint64)
    ids[:n] = np.arange(n, dtype=np.uint64) << np.uint64(1)
    ids[n:] = (np.arange(n_dummies, dtype=np.uint64) << np.uint64(1)) | np.uint64(1)
    tags = prf_eval_batch(key, b"shf", ids.tolist())
    order = np.lexsort((ids, tags))
    ranks = np.empty(n + n_dummies, dtype=np.int64)
    ranks[order] = np.arange(n + n_dummies)
    return ranks[:n], ranks[n:]


@dataclass
class _RebuildJob:
    plan: PhasePlan
    scratch: int
    new_main: int
    pos: np.ndarray
    dummy_pos: np.ndarray
    total_work: int


class SqrtOram:
    """One square-root ORAM instance over a traced store."""

    def __init__(self, config: SqrtConfig, store: TracedStore, leak_probe_choice: bool = False):
        self.cfg = config
        self.store = store
        self.leak_probe_choice = leak_probe_choice
        self.rng = DetRng(config.seed)
        self.engine = SealEngine(self.rng.derive_key(b"seal"), config.payload_size)
        self.t_global = 0  # logical step; 0 is setup
        self.t_epoch = 0
        self.epoch = 0
        self.d = 0  # dummies consumed this epoch
        self._epoch_probed: set[int] = set()
        self.probe_history: list[list[int]] = []  # per-epoch main-probe offsets
        self._shelter_serial = _SHELTER_SERIAL_BASE
        n, k, ml = config.n, config.k, config.main_len

        store.set_step(0)
        key0 = self._epoch_key(0)
        self.main = store.alloc(ml, role="sqrt.main")
        self._populate_main(key0)
        self.pos, self.dummy_pos = _perm_ranks(key0, n, ml - n)

        self.s_cur = self._fresh_shelter()
        self.s_prev = self._fresh_shelter() if config.mode == MODE_DEAMORTIZED else None
        self.job: _RebuildJob | None = None
        if config.mode == MODE_DEAMORTIZED:
            self.job = self._make_rebuild_job()

    # -- construction helpers ----------------------------------------------

    def _epoch_key(self, epoch: int) -> PrfKey:
        return PrfKey(
            hashlib.blake2b(
                b"epoch" + epoch.to_bytes(8, "little"), key=self.rng.seed, digest_size=16
            ).digest()
        )

    def _populate_main(self, key0: PrfKey) -> None:
        """Write n zero blocks + dummies sequentially, then shuffle under key0."""
        n, ml, b = self.cfg.n, self.cfg.main_len, self.cfg.payload_size
        kind = np.empty(ml, dtype=np.uint8)
        tag = np.empty(ml, dtype=np.uint64)
        kind[:n] = 0
        kind[n:] = 1
        tag[:n] = np.arange(n)
        tag[n:] = np.arange(ml - n)
        payload = np.zeros((ml, b), dtype=np.uint8)
        aux = np.zeros(ml, dtype=np.uint8)
        cells = self.engine.seal_batch(kind, tag, payload, aux)
        self.store.write_many(self.main, np.arange(ml), cells)
        oblivious_shuffle(self.store, self.engine, self.main, ml, key0)

    def _fresh_shelter(self) -> int:
        k = self.cfg.k
        region = self.store.alloc(k, role="sqrt.shelter")
        kind = np.ones(k, dtype=np.uint8)
        tag = np.arange(self._shelter_serial, self._shelter_serial + k, dtype=np.uint64)
        self._shelter_serial += k
        payload = np.zeros((k, self.cfg.payload_size), dtype=np.uint8)
        self.store.write_many(
            region,
            np.arange(k),
            self.engine.seal_batch(kind, tag, payload, np.zeros(k, dtype=np.uint8)),
        )
        return region

    def _make_rebuild_job(self) -> _RebuildJob:
        """Plans the oblivious rebuild of (main, frozen shelter) -> next main.

        Pipeline: copy both into scratch (shelter copies fresher), sort by
        (addr, priority), suppress duplicates, refresh the dummy population
        to exactly main_len - n survivors, then distribute by the next
        epoch's permutation ranks and truncate into the new main region.
        """
        cfg, store, eng = self.cfg, self.store, self.engine
        n, k, ml = cfg.n, cfg.k, cfg.main_len
        shelter = self.s_prev if cfg.mode == MODE_DEAMORTIZED else self.s_cur
        scratch_len = next_pow2(ml + k)
        scratch = store.alloc(scratch_len, role="sqrt.scratch")
        new_main = store.alloc(ml, role="sqrt.main")
        key_next = self._epoch_key(self.epoch + 1)
        pos, dummy_pos = _perm_ranks(key_next, n, ml - n)
        # shelter priorities: later slot = fresher copy = smaller aux;
        # main copies stale behind every shelter copy
        phases = [
            CopyPhase(store, eng, self.main, 0, ml, scratch, 0, set_aux=k),
            CopyPhase(store, eng, shelter, 0, k, scratch, ml, aux_ramp=(k - 1, -1)),
            PadPhase(store, eng, scratch, ml + k, scratch_len - ml - k, _FILL_SERIAL_BASE, aux=2),
            SortPhase(store, eng, scratch, scratch_len, ByAddrThenPriority()),
            DedupePhase(store, eng, scratch, scratch_len, _DEDUPE_SERIAL_BASE),
            RefreshDummiesPhase(store, eng, scratch, scratch_len, keep_count=ml - n),
            SortPhase(
                store, eng, scratch, scratch_len, ByDestIndex(pos.astype(np.uint64), dummy_pos.astype(np.uint64))
            ),
            CopyPhase(store, eng, scratch, 0, ml, new_main, 0, set_aux=0),
        ]
        plan = PhasePlan(phases)
        return _RebuildJob(plan, scratch, new_main, pos, dummy_pos, plan.cellops_total())

    # -- the access protocol ------------------------------------------------

    def _scan_shelter(self, region: int, addr: int) -> bytes | None:
        """Full scan; returns the freshest (last) matching payload, if any."""
        k = self.cfg.k
        kind, tag, payload, _ = self.engine.unseal_batch(
            self.store.read_many(region, np.arange(k))
        )
        hits = np.flatnonzero((kind == 0) & (tag == addr))
        if len(hits) == 0:
            return None
        return payload[hits[-1]].tobytes()

    def access(self, op: LogicalOp) -> bytes:
        cfg = self.cfg
        if not 0 <= op.addr < cfg.n:
            raise ValueError(f"address {op.addr} out of range")
        self.t_global += 1
        self.store.set_step(self.t_global)

        # 1. scan shelters: frozen previous first, then the live one
        found = None
        if self.s_prev is not None:
            found = self._scan_shelter(self.s_prev, op.addr)
        cur_hit = self._scan_shelter(self.s_cur, op.addr)
        if cur_hit is not None:
            found = cur_hit

        # 2. probe exactly one offset of main memory
        if found is None:
            off = int(self.pos[op.addr])
        else:
            off = int(self.dummy_pos[self.d])
            self.d += 1
        if not (self.leak_probe_choice and found is not None):
            if off in self._epoch_probed:
                raise AssertionError(f"double probe of main offset {off} within epoch")
            self._epoch_probed.add(off)
            blk = self.engine.unseal(self.store.read(self.main, off))
            if found is None:
                if not (blk.is_real and blk.tag == op.addr):
                    raise AssertionError("position map pointed at the wrong block")
                current = blk.payload
            else:
                current = found
            self.store.write(
                self.main, off, self.engine.seal(Block(blk.kind, blk.tag, blk.payload, 0))
            )
        else:
            current = found  # leaky debug variant: dummy probe skipped

        # 3. write the (updated) block into the live shelter slot
        new_payload = op.value if op.op == OP_WRITE else current
        self.store.write(
            self.s_cur, self.t_epoch, self.engine.seal(Block.real(op.addr, new_payload))
        )

        # 4. background rebuild quota, then epoch bookkeeping
        if self.job is not None:
            remaining_accesses = cfg.k - self.t_epoch
            budget = -(-self.job.plan.remaining() // remaining_accesses)
            if budget:
                self.job.plan.pump(budget)
        if self.t_epoch == cfg.k - 1:
            self._epoch_boundary()
        else:
            self.t_epoch += 1
        return current

    def _epoch_boundary(self) -> None:
        cfg, store = self.cfg, self.store
        self.probe_history.append(sorted(self._epoch_probed))
        if cfg.mode == MODE_DEAMORTIZED:
            job = self.job
            assert job is not None and job.plan.finished, "rebuild missed the epoch boundary"
            store.free(self.main)
            store.free(job.scratch)
            assert self.s_prev is not None
            store.free(self.s_prev)
            self.main = job.new_main
            self.pos, self.dummy_pos = job.pos, job.dummy_pos
            self.s_prev = self.s_cur
            self.s_cur = self._fresh_shelter()
        else:
            job = self._make_rebuild_job()
            job.plan.run_all()
            store.free(self.main)
            store.free(job.scratch)
            store.free(self.s_cur)
            self.main = job.new_main
            self.pos, self.dummy_pos = job.pos, job.dummy_pos
            self.s_cur = self._fresh_shelter()
        self.epoch += 1
        self.t_epoch = 0
        self.d = 0
        self._epoch_probed = set()
        if cfg.mode == MODE_DEAMORTIZED:
            self.job = self._make_rebuild_job()


def sqrt_new(config: SqrtConfig, store: TracedStore, **kwargs) -> SqrtOram:
    return SqrtOram(config, store, **kwargs)


def sqrt_access(state: SqrtOram, op: LogicalOp) -> bytes:
    return state.access(op)
