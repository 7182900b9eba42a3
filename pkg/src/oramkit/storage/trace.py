"""Trace objects: the adversary's view of the physical access sequence.

Every backend read/write is one TraceEvent (step, kind, region, offset).
Traces export to CSV (header step,kind,region,offset) and JSON Lines.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from typing import Iterator, NamedTuple

import numpy as np

KIND_READ = 0
KIND_WRITE = 1
KIND_NAMES = {KIND_READ: "read", KIND_WRITE: "write"}
KIND_CODES = {"read": KIND_READ, "write": KIND_WRITE}


class TraceEvent(NamedTuple):
    step: int
    kind: str
    region: int
    offset: int


class Trace:
    """An append-only physical access log plus run metadata.

    Events are stored as int tuples (step, kind-code, region, offset);
    `events()` yields them as TraceEvent records.
    """

    def __init__(self, n: int = 0, variant: str = "", roles: dict[int, str] | None = None):
        self.n = n
        self.variant = variant
        self.roles = dict(roles or {})
        self.raw: list[tuple[int, int, int, int]] = []

    def append(self, step: int, kind: int, region: int, offset: int) -> None:
        self.raw.append((step, kind, region, offset))

    def __len__(self) -> int:
        return len(self.raw)

    def events(self) -> Iterator[TraceEvent]:
        for step, kind, region, offset in self.raw:
            yield TraceEvent(step, KIND_NAMES[kind], region, offset)

    def per_step_counts(self) -> np.ndarray:
        if not self.raw:
            return np.zeros(0, dtype=np.int64)
        steps = np.fromiter((e[0] for e in self.raw), dtype=np.int64, count=len(self.raw))
        out = np.zeros(int(steps.max()) + 1, dtype=np.int64)
        np.add.at(out, steps, 1)
        return out

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "kind", "region", "offset"])
            for step, kind, region, offset in self.raw:
                w.writerow([step, KIND_NAMES[kind], region, offset])

    def to_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            for step, kind, region, offset in self.raw:
                f.write(
                    json.dumps(
                        {"step": step, "kind": KIND_NAMES[kind], "region": region, "offset": offset}
                    )
                )
                f.write("\n")

    @classmethod
    def from_csv(cls, path: str) -> "Trace":
        t = cls()
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header != ["step", "kind", "region", "offset"]:
                raise ValueError(f"unexpected trace CSV header: {header}")
            for step, kind, region, offset in r:
                t.append(int(step), KIND_CODES[kind], int(region), int(offset))
        return t

    @classmethod
    def from_jsonl(cls, path: str) -> "Trace":
        t = cls()
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                t.append(d["step"], KIND_CODES[d["kind"]], d["region"], d["offset"])
        return t


_RUN = struct.Struct("<HBq")


def digest_step_runs(runs: list[tuple[int, int, int]]) -> bytes:
    """16-byte fingerprint of one step's ordered (role-id, kind, count) runs.

    Used by both the streaming skeleton recorder and offline skeletonize so
    the two construction paths agree bit for bit.
    """
    h = hashlib.blake2b(digest_size=16)
    for role_id, kind, count in runs:
        h.update(_RUN.pack(role_id, kind, count))
    return h.digest()
