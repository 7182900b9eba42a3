"""Length-prefixed TCP wire protocol for the remote block store.

Frame layout, all integers little-endian:
    [len: u32, excluding itself][opcode: u8][body]

Opcodes: 0x01 ALLOC(length u64) -> 0x81 ALLOCR(region u32);
0x02 READ(region u32, offset u64) -> 0x82 READR(cell bytes);
0x03 WRITE(region u32, offset u64, cell) -> 0x83 OK;
0x04 FREE(region u32) -> 0x83 OK; 0x05 SETSTEP(step u64) -> 0x83 OK;
any failure -> 0xFF ERR(utf8 message).
"""

from __future__ import annotations

import socket
import struct

from .backends import Backend, StorageError

OP_ALLOC = 0x01
OP_READ = 0x02
OP_WRITE = 0x03
OP_FREE = 0x04
OP_SETSTEP = 0x05
RESP_ALLOCR = 0x81
RESP_READR = 0x82
RESP_OK = 0x83
RESP_ERR = 0xFF

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_REGION_OFF = struct.Struct("<IQ")


def send_frame(sock: socket.socket, opcode: int, body: bytes = b"") -> None:
    sock.sendall(_U32.pack(1 + len(body)) + bytes([opcode]) + body)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = recv_exact(sock, 4)
    (length,) = _U32.unpack(header)
    if length < 1 or length > (1 << 24):
        raise ConnectionError(f"bad frame length {length}")
    payload = recv_exact(sock, length)
    return payload[0], payload[1:]


class TcpBackend(Backend):
    """Client side of the wire protocol; one logical session per connection."""

    def __init__(self, host: str, port: int, cell_size: int, timeout: float = 30.0):
        self.cell_size = cell_size
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _call(self, opcode: int, body: bytes) -> tuple[int, bytes]:
        send_frame(self._sock, opcode, body)
        op, resp = recv_frame(self._sock)
        if op == RESP_ERR:
            raise StorageError(resp.decode("utf-8", "replace"))
        return op, resp

    def alloc(self, length: int) -> int:
        op, resp = self._call(OP_ALLOC, _U64.pack(length))
        if op != RESP_ALLOCR:
            raise StorageError(f"unexpected response opcode {op:#x}")
        return _U32.unpack(resp)[0]

    def read(self, region: int, offset: int) -> bytes:
        op, resp = self._call(OP_READ, _REGION_OFF.pack(region, offset))
        if op != RESP_READR:
            raise StorageError(f"unexpected response opcode {op:#x}")
        if len(resp) != self.cell_size:
            raise StorageError(f"cell size mismatch: {len(resp)} != {self.cell_size}")
        return resp

    def write(self, region: int, offset: int, cell: bytes) -> None:
        if len(cell) != self.cell_size:
            raise StorageError(f"cell size mismatch: {len(cell)} != {self.cell_size}")
        op, _ = self._call(OP_WRITE, _REGION_OFF.pack(region, offset) + cell)
        if op != RESP_OK:
            raise StorageError(f"unexpected response opcode {op:#x}")

    def free(self, region: int) -> None:
        op, _ = self._call(OP_FREE, _U32.pack(region))
        if op != RESP_OK:
            raise StorageError(f"unexpected response opcode {op:#x}")

    def set_step(self, step: int) -> None:
        op, _ = self._call(OP_SETSTEP, _U64.pack(step))
        if op != RESP_OK:
            raise StorageError(f"unexpected response opcode {op:#x}")

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
