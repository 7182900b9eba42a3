"""Untrusted block-store backends: in-memory and file-backed.

A backend stores fixed-size cells in numbered regions. Regions are never
resized or reused; reading a never-written slot yields the canonical
all-zero cell. Backends know nothing about tracing; the recorder wraps
them (see tracing.py).
"""

from __future__ import annotations

import os
import struct
import threading

import numpy as np


class StorageError(Exception):
    """Backend precondition violation or remote failure."""


FILE_MAGIC = b"ORKT"
FILE_VERSION = 1
FILE_HEADER = struct.Struct("<4sHIQ")  # magic, version u16, cell size u32, length u64


class Backend:
    """Interface shared by all backends; batch ops default to loops."""

    cell_size: int

    def alloc(self, length: int) -> int:
        raise NotImplementedError

    def read(self, region: int, offset: int) -> bytes:
        raise NotImplementedError

    def write(self, region: int, offset: int, cell: bytes) -> None:
        raise NotImplementedError

    def free(self, region: int) -> None:
        raise NotImplementedError

    def set_step(self, step: int) -> None:
        """Step attribution is a tracing concern; remote backends forward it."""

    def close(self) -> None:
        pass

    def read_many(self, region: int, offsets: np.ndarray) -> np.ndarray:
        out = np.empty((len(offsets), self.cell_size), dtype=np.uint8)
        for i, off in enumerate(offsets):
            out[i] = np.frombuffer(self.read(region, int(off)), dtype=np.uint8)
        return out

    def write_many(self, region: int, offsets: np.ndarray, cells: np.ndarray) -> None:
        for i, off in enumerate(offsets):
            self.write(region, int(off), cells[i].tobytes())


class MemBackend(Backend):
    """Regions as zeroed numpy matrices; the default backend."""

    def __init__(self, cell_size: int):
        if cell_size < 1:
            raise StorageError("cell size must be positive")
        self.cell_size = cell_size
        self._regions: dict[int, np.ndarray] = {}
        self._next = 0
        self._lock = threading.Lock()

    def _region(self, region: int) -> np.ndarray:
        try:
            return self._regions[region]
        except KeyError:
            raise StorageError(f"region {region} is not live") from None

    def alloc(self, length: int) -> int:
        if length < 1:
            raise StorageError("region length must be at least 1")
        with self._lock:
            rid = self._next
            self._next += 1
            self._regions[rid] = np.zeros((length, self.cell_size), dtype=np.uint8)
        return rid

    def read(self, region: int, offset: int) -> bytes:
        arr = self._region(region)
        if not 0 <= offset < arr.shape[0]:
            raise StorageError(f"offset {offset} out of bounds for region {region}")
        return arr[offset].tobytes()

    def write(self, region: int, offset: int, cell: bytes) -> None:
        arr = self._region(region)
        if not 0 <= offset < arr.shape[0]:
            raise StorageError(f"offset {offset} out of bounds for region {region}")
        if len(cell) != self.cell_size:
            raise StorageError(f"cell size mismatch: {len(cell)} != {self.cell_size}")
        arr[offset] = np.frombuffer(cell, dtype=np.uint8)

    def free(self, region: int) -> None:
        with self._lock:
            if region not in self._regions:
                raise StorageError(f"region {region} is not live")
            del self._regions[region]

    def read_many(self, region: int, offsets: np.ndarray) -> np.ndarray:
        arr = self._region(region)
        if len(offsets) and (offsets.min() < 0 or offsets.max() >= arr.shape[0]):
            raise StorageError(f"offset out of bounds for region {region}")
        return arr[offsets]

    def write_many(self, region: int, offsets: np.ndarray, cells: np.ndarray) -> None:
        arr = self._region(region)
        if len(offsets) and (offsets.min() < 0 or offsets.max() >= arr.shape[0]):
            raise StorageError(f"offset out of bounds for region {region}")
        if cells.shape[1] != self.cell_size:
            raise StorageError("cell size mismatch")
        arr[offsets] = cells


class FileBackend(Backend):
    """One file per region: little-endian header, then fixed-stride cells."""

    def __init__(self, directory: str, cell_size: int):
        if cell_size < 1:
            raise StorageError("cell size must be positive")
        self.cell_size = cell_size
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._files: dict[int, tuple[object, int]] = {}  # id -> (handle, length)
        self._next = 0
        self._lock = threading.Lock()

    def _path(self, region: int) -> str:
        return os.path.join(self.directory, f"region_{region:08d}.orkt")

    def _entry(self, region: int):
        try:
            return self._files[region]
        except KeyError:
            raise StorageError(f"region {region} is not live") from None

    def alloc(self, length: int) -> int:
        if length < 1:
            raise StorageError("region length must be at least 1")
        with self._lock:
            rid = self._next
            self._next += 1
            f = open(self._path(rid), "w+b")
            f.write(FILE_HEADER.pack(FILE_MAGIC, FILE_VERSION, self.cell_size, length))
            f.truncate(FILE_HEADER.size + length * self.cell_size)
            self._files[rid] = (f, length)
        return rid

    def read(self, region: int, offset: int) -> bytes:
        f, length = self._entry(region)
        if not 0 <= offset < length:
            raise StorageError(f"offset {offset} out of bounds for region {region}")
        f.seek(FILE_HEADER.size + offset * self.cell_size)
        return f.read(self.cell_size)

    def write(self, region: int, offset: int, cell: bytes) -> None:
        f, length = self._entry(region)
        if not 0 <= offset < length:
            raise StorageError(f"offset {offset} out of bounds for region {region}")
        if len(cell) != self.cell_size:
            raise StorageError(f"cell size mismatch: {len(cell)} != {self.cell_size}")
        f.seek(FILE_HEADER.size + offset * self.cell_size)
        f.write(cell)

    def free(self, region: int) -> None:
        with self._lock:
            f, _ = self._entry(region)
            f.close()
            del self._files[region]
            os.unlink(self._path(region))

    def close(self) -> None:
        with self._lock:
            for f, _ in self._files.values():
                f.close()
            self._files.clear()
