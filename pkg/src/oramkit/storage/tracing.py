"""The traced store: a backend wrapper that records the adversary's view.

The recorder sits server-side of the trust boundary (wrapping the backend)
and is always on. Three recording modes trade detail for memory:

  events   - full per-event trace (small runs, exports, exact checks)
  counts   - per-step cell-op totals only (large benchmark runs)
  skeleton - per-step fingerprints of (role, kind, count) runs, offsets
             erased (obliviousness comparisons on long runs)

Per-step counts are maintained in every mode. Region roles are labels fixed
at alloc time ("sqrt.main", "hier.lvl5", ...) naming the structural family a
region belongs to, so skeletons are comparable across rebuilds and runs.
"""

from __future__ import annotations

import numpy as np

from .backends import Backend, StorageError
from .trace import KIND_READ, KIND_WRITE, Trace, digest_step_runs

MODE_EVENTS = "events"
MODE_COUNTS = "counts"
MODE_SKELETON = "skeleton"


class TracedStore:
    """Backend wrapper: bounds/size enforcement, trace recording, region roles."""

    def __init__(self, backend: Backend, mode: str = MODE_EVENTS):
        if mode not in (MODE_EVENTS, MODE_COUNTS, MODE_SKELETON):
            raise ValueError(f"unknown trace mode {mode!r}")
        self.backend = backend
        self.cell_size = backend.cell_size
        self.mode = mode
        self.step = 0
        self.roles: dict[int, str] = {}
        self._role_ids: dict[str, int] = {}
        self._lengths: dict[int, int] = {}
        self._counts: list[int] = [0]
        self.reads = 0
        self.writes = 0
        self._events: list[tuple[int, int, int, int]] = []
        self._step_runs: list[tuple[int, int, int]] = []  # (role_id, kind, count)
        self._digests: list[bytes] = []

    # -- bookkeeping ------------------------------------------------------

    def _role_id(self, role: str) -> int:
        rid = self._role_ids.get(role)
        if rid is None:
            rid = len(self._role_ids)
            if rid > 0xFFFF:
                raise StorageError("too many distinct region roles")
            self._role_ids[role] = rid
        return rid

    def _note(self, kind: int, region: int, offset: int, count: int = 1) -> None:
        self._counts[-1] += count
        if kind == KIND_READ:
            self.reads += count
        else:
            self.writes += count
        if self.mode == MODE_EVENTS:
            step = self.step
            if count == 1:
                self._events.append((step, kind, region, offset))
            else:
                raise AssertionError("scalar note with count != 1")
        elif self.mode == MODE_SKELETON:
            rid = self._role_id(self.roles[region])
            runs = self._step_runs
            if runs and runs[-1][0] == rid and runs[-1][1] == kind:
                runs[-1] = (rid, kind, runs[-1][2] + count)
            else:
                runs.append((rid, kind, count))

    def _note_batch(self, kind: int, region: int, offsets: np.ndarray) -> None:
        count = len(offsets)
        if count == 0:
            return
        self._counts[-1] += count
        if kind == KIND_READ:
            self.reads += count
        else:
            self.writes += count
        if self.mode == MODE_EVENTS:
            step = self.step
            self._events.extend((step, kind, region, int(off)) for off in offsets)
        elif self.mode == MODE_SKELETON:
            rid = self._role_id(self.roles[region])
            runs = self._step_runs
            if runs and runs[-1][0] == rid and runs[-1][1] == kind:
                runs[-1] = (rid, kind, runs[-1][2] + count)
            else:
                runs.append((rid, kind, count))

    def _flush_step(self) -> None:
        if self.mode == MODE_SKELETON:
            self._digests.append(digest_step_runs(self._step_runs))
            self._step_runs = []

    # -- storage api ------------------------------------------------------

    def alloc(self, length: int, role: str = "anon") -> int:
        region = self.backend.alloc(length)
        self.roles[region] = role
        self._lengths[region] = length
        return region

    def length(self, region: int) -> int:
        return self._lengths[region]

    def set_step(self, step: int) -> None:
        if step < self.step:
            raise StorageError(f"step regression: {step} < {self.step}")
        if step == self.step:
            return
        self.backend.set_step(step)
        while self.step < step:
            self._flush_step()
            self._counts.append(0)
            self.step += 1

    def _check(self, region: int, offset: int) -> None:
        try:
            length = self._lengths[region]
        except KeyError:
            raise StorageError(f"region {region} is not live") from None
        if not 0 <= offset < length:
            raise StorageError(f"offset {offset} out of bounds for region {region}")

    def read(self, region: int, offset: int) -> bytes:
        self._check(region, offset)
        cell = self.backend.read(region, offset)
        self._note(KIND_READ, region, offset)
        return cell

    def write(self, region: int, offset: int, cell: bytes) -> None:
        self._check(region, offset)
        if len(cell) != self.cell_size:
            raise StorageError(f"cell size mismatch: {len(cell)} != {self.cell_size}")
        self.backend.write(region, offset, cell)
        self._note(KIND_WRITE, region, offset)

    def read_many(self, region: int, offsets: np.ndarray) -> np.ndarray:
        if len(offsets):
            self._check(region, int(offsets.max()))
            self._check(region, int(offsets.min()))
        out = self.backend.read_many(region, offsets)
        self._note_batch(KIND_READ, region, offsets)
        return out

    def write_many(self, region: int, offsets: np.ndarray, cells: np.ndarray) -> None:
        if len(offsets):
            self._check(region, int(offsets.max()))
            self._check(region, int(offsets.min()))
        if cells.shape[1] != self.cell_size:
            raise StorageError("cell size mismatch")
        self.backend.write_many(region, offsets, cells)
        self._note_batch(KIND_WRITE, region, offsets)

    def free(self, region: int) -> None:
        if region not in self._lengths:
            raise StorageError(f"region {region} is not live")
        self.backend.free(region)
        del self._lengths[region]
        # role mapping is kept: freed regions still appear in old trace events

    # -- views ------------------------------------------------------------

    @property
    def event_total(self) -> int:
        return self.reads + self.writes

    def per_step_counts(self) -> np.ndarray:
        return np.array(self._counts, dtype=np.int64)

    def trace(self, n: int = 0, variant: str = "") -> Trace:
        if self.mode != MODE_EVENTS:
            raise StorageError("full trace only available in events mode")
        t = Trace(n=n, variant=variant, roles=self.roles)
        t.raw = list(self._events)
        return t

    def skeleton_digests(self) -> list[bytes]:
        """Per-step fingerprints, including the current unfinished step."""
        if self.mode != MODE_SKELETON:
            raise StorageError("skeleton digests only available in skeleton mode")
        return self._digests + [digest_step_runs(self._step_runs)]
