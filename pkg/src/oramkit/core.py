"""Core primitives: blocks, sealed cells, keyed PRF, deterministic RNG, plain-RAM oracle.

A Block is the logical unit the client reasons about: either a real item
bound to a logical address or a numbered dummy. A Cell is its fixed-size
sealed (re-randomized) server-side encoding. Sealing is a keystream mask
with an explicit nonce; the threat model is an honest-but-curious server
watching access patterns, so there is no integrity protection by design.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

REAL = 0
DUMMY = 1

DEFAULT_PAYLOAD = 16  # bytes per block payload (B)
NONCE_LEN = 8
BODY_EXTRA = 10  # kind(1) + tag(8) + aux(1)
CELL_OVERHEAD = NONCE_LEN + BODY_EXTRA  # cell size = B + 18

KEY_LEN = 16
SEED_LEN = 16


class PrfKey(NamedTuple):
    """A 16-byte key for the keyed PRF and for cell sealing."""

    key: bytes

    @classmethod
    def of(cls, raw: bytes) -> "PrfKey":
        if len(raw) != KEY_LEN:
            raise ValueError(f"key must be {KEY_LEN} bytes, got {len(raw)}")
        return cls(raw)


class Block(NamedTuple):
    """Logical block: Real(addr) or Dummy(serial) plus a fixed-size payload.

    aux is a one-byte scratch annotation used by oblivious rebuild passes
    (source priority / eviction class); it is 0 for blocks at rest.
    """

    kind: int
    tag: int
    payload: bytes
    aux: int = 0

    @classmethod
    def real(cls, addr: int, payload: bytes, aux: int = 0) -> "Block":
        return cls(REAL, addr, payload, aux)

    @classmethod
    def dummy(cls, serial: int, payload_size: int = DEFAULT_PAYLOAD, aux: int = 0) -> "Block":
        return cls(DUMMY, serial, bytes(payload_size), aux)

    @property
    def is_real(self) -> bool:
        return self.kind == REAL

    @property
    def identity(self) -> int:
        """Injective u64 code: 2*addr for reals, 2*serial+1 for dummies."""
        return (self.tag << 1) | self.kind


def prf_eval(key: PrfKey, domain: bytes, x: int) -> int:
    """Keyed PRF to 64 bits: BLAKE2b(key, person=domain) over the input.

    domain must be at most 16 bytes; output is uniform over u64 for a
    random key (checked statistically by the analysis suite, never by
    asserting concrete output values).
    """
    if len(domain) > 16:
        raise ValueError("domain must be at most 16 bytes")
    h = hashlib.blake2b(
        (x & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"),
        key=key.key,
        person=domain.ljust(16, b"\0"),
        digest_size=8,
    )
    return int.from_bytes(h.digest(), "little")


def prf_eval_batch(key: PrfKey, domain: bytes, xs) -> np.ndarray:
    """prf_eval over an iterable of inputs, as a uint64 array."""
    person = domain.ljust(16, b"\0")
    k = key.key
    out = np.empty(len(xs), dtype=np.uint64)
    for i, x in enumerate(xs):
        h = hashlib.blake2b(int(x).to_bytes(8, "little"), key=k, person=person, digest_size=8)
        out[i] = int.from_bytes(h.digest(), "little")
    return out


class DetRng:
    """Deterministic RNG: a (seed, counter) pair expanded with BLAKE2b.

    Identical (seed, counter) always yields an identical stream, so every
    experiment replays from its config. Never shared mutably across
    instances; advanced explicitly by the single owner.
    """

    def __init__(self, seed: bytes, counter: int = 0):
        if len(seed) != SEED_LEN:
            raise ValueError(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
        self.seed = seed
        self.counter = counter
        self._buf = b""

    def _refill(self) -> None:
        self._buf += hashlib.blake2b(
            self.counter.to_bytes(16, "little"), key=self.seed, digest_size=64
        ).digest()
        self.counter += 1

    def next_bytes(self, n: int) -> bytes:
        while len(self._buf) < n:
            self._refill()
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def next_u64(self) -> int:
        return int.from_bytes(self.next_bytes(8), "little")

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def shuffle(self, xs: list) -> None:
        for i in range(len(xs) - 1, 0, -1):
            j = self.randrange(i + 1)
            xs[i], xs[j] = xs[j], xs[i]

    def derive_key(self, label: bytes, index: int = 0) -> PrfKey:
        raw = hashlib.blake2b(
            label + index.to_bytes(8, "little"), key=self.seed, digest_size=KEY_LEN
        ).digest()
        # mix in the counter so repeated derivations with the same label differ
        raw = hashlib.blake2b(
            raw + self.next_bytes(8), key=self.seed, digest_size=KEY_LEN
        ).digest()
        return PrfKey(raw)


class SealEngine:
    """Seals/unseals blocks under one key with a monotone nonce counter.

    The keystream for nonce c is AES-128-ECB over counter blocks
    (nonce || block-index || zeros), which makes batch sealing of cell
    vectors a single cipher call. Scalar and batch paths share the exact
    keystream definition, so their outputs are bit-identical.
    """

    def __init__(self, key: PrfKey, payload_size: int = DEFAULT_PAYLOAD, nonce_start: int = 0):
        self.key = key
        self.payload_size = payload_size
        self.body_len = payload_size + BODY_EXTRA
        self.cell_len = self.body_len + NONCE_LEN
        self.nblocks = (self.body_len + 15) // 16
        self._enc = Cipher(algorithms.AES(key.key), modes.ECB()).encryptor()
        self._nonce = nonce_start
        self._aux_off = 9 + payload_size
        self._cap = 0
        self._blocks_buf: np.ndarray | None = None
        self._ks_buf: bytearray | None = None

    def take_nonces(self, count: int) -> np.ndarray:
        start = self._nonce
        self._nonce += count
        return np.arange(start, start + count, dtype=np.uint64)

    def _ensure_capacity(self, q: int) -> None:
        if q <= self._cap:
            return
        cap = max(q, 4096)
        self._blocks_buf = np.zeros((cap, self.nblocks, 16), dtype=np.uint8)
        self._blocks_buf[:, :, 8] = np.arange(self.nblocks, dtype=np.uint8)[None, :]
        self._ks_buf = bytearray(cap * self.nblocks * 16 + 16)  # update_into slack
        self._cap = cap

    def keystream(self, nonces: np.ndarray) -> np.ndarray:
        """Keystream rows (one per nonce), each body_len bytes.

        Returns a view into a shared buffer, valid until the next call.
        """
        q = len(nonces)
        self._ensure_capacity(q)
        blocks = self._blocks_buf[:q]
        nb = np.ascontiguousarray(nonces, dtype="<u8").view(np.uint8).reshape(q, 8)
        blocks[:, :, :8] = nb[:, None, :]
        need = q * self.nblocks * 16
        self._enc.update_into(blocks.reshape(-1), memoryview(self._ks_buf))
        return np.frombuffer(self._ks_buf, dtype=np.uint8, count=need).reshape(
            q, self.nblocks * 16
        )[:, : self.body_len]

    def seal_batch(
        self,
        kind: np.ndarray,
        tag: np.ndarray,
        payload: np.ndarray,
        aux: np.ndarray,
        nonces: np.ndarray | None = None,
    ) -> np.ndarray:
        """Seal component vectors into a (q, cell_len) uint8 matrix."""
        q = len(kind)
        if nonces is None:
            nonces = self.take_nonces(q)
        b = self.payload_size
        plain = np.empty((q, self.body_len), dtype=np.uint8)
        plain[:, 0] = kind
        plain[:, 1:9] = np.ascontiguousarray(tag, dtype="<u8").view(np.uint8).reshape(q, 8)
        plain[:, 9 : 9 + b] = payload
        plain[:, 9 + b] = aux
        cells = np.empty((q, self.cell_len), dtype=np.uint8)
        cells[:, :NONCE_LEN] = (
            np.ascontiguousarray(nonces, dtype="<u8").view(np.uint8).reshape(q, 8)
        )
        cells[:, NONCE_LEN:] = plain ^ self.keystream(nonces)
        return cells

    def unseal_batch(self, cells: np.ndarray):
        """Split a (q, cell_len) matrix into (kind, tag, payload, aux) vectors."""
        if cells.shape[1] != self.cell_len:
            raise ValueError("cell size mismatch")
        q = cells.shape[0]
        nonces = np.ascontiguousarray(cells[:, :NONCE_LEN]).view("<u8").reshape(q)
        plain = cells[:, NONCE_LEN:] ^ self.keystream(nonces)
        kind = plain[:, 0]
        tag = np.ascontiguousarray(plain[:, 1:9]).view("<u8").reshape(q)
        payload = plain[:, 9 : 9 + self.payload_size]
        aux = plain[:, 9 + self.payload_size]
        return kind, tag, payload, aux

    def seal(self, block: Block, nonce: int | None = None) -> bytes:
        if len(block.payload) != self.payload_size:
            raise ValueError(
                f"payload must be {self.payload_size} bytes, got {len(block.payload)}"
            )
        if nonce is None:
            nonce = self._nonce
            self._nonce += 1
        cells = self.seal_batch(
            np.array([block.kind], dtype=np.uint8),
            np.array([block.tag], dtype=np.uint64),
            np.frombuffer(block.payload, dtype=np.uint8).reshape(1, -1),
            np.array([block.aux], dtype=np.uint8),
            np.array([nonce], dtype=np.uint64),
        )
        return cells[0].tobytes()

    def unseal(self, cell: bytes) -> Block:
        if len(cell) != self.cell_len:
            raise ValueError("cell size mismatch")
        arr = np.frombuffer(cell, dtype=np.uint8).reshape(1, -1)
        kind, tag, payload, aux = self.unseal_batch(arr)
        return Block(int(kind[0]), int(tag[0]), payload[0].tobytes(), int(aux[0]))


def seal(key: PrfKey, rng: DetRng, block: Block) -> bytes:
    """Seal one block, drawing the nonce from the caller's RNG stream."""
    eng = SealEngine(key, len(block.payload))
    return eng.seal(block, nonce=rng.next_u64())


def unseal(key: PrfKey, cell: bytes, payload_size: int = DEFAULT_PAYLOAD) -> Block:
    if len(cell) != payload_size + CELL_OVERHEAD:
        raise ValueError("cell size mismatch")
    return SealEngine(key, payload_size).unseal(cell)


OP_READ = "read"
OP_WRITE = "write"


@dataclass(frozen=True)
class LogicalOp:
    """One request against the simulated RAM."""

    op: str
    addr: int
    value: bytes | None = None

    @classmethod
    def read(cls, addr: int) -> "LogicalOp":
        return cls(OP_READ, addr)

    @classmethod
    def write(cls, addr: int, value: bytes) -> "LogicalOp":
        return cls(OP_WRITE, addr, value)


class PlainRam:
    """The zero-initialized RAM the simulation must reproduce (correctness oracle).

    read returns the current payload; write stores the new payload and
    returns the previous one.
    """

    def __init__(self, n: int, payload_size: int = DEFAULT_PAYLOAD):
        self.n = n
        self.payload_size = payload_size
        self.state = [bytes(payload_size)] * n

    def apply(self, op: LogicalOp) -> bytes:
        if not 0 <= op.addr < self.n:
            raise ValueError(f"address {op.addr} out of range [0, {self.n})")
        prev = self.state[op.addr]
        if op.op == OP_WRITE:
            if op.value is None or len(op.value) != self.payload_size:
                raise ValueError("write value must match payload size")
            self.state[op.addr] = op.value
        return prev
