"""TCP block-store server: the untrusted party, recording its own trace."""

from __future__ import annotations

import logging
import socketserver
import struct
import threading

from .backends import Backend, StorageError
from .tracing import MODE_COUNTS, TracedStore
from .wire import (
    OP_ALLOC,
    OP_FREE,
    OP_READ,
    OP_SETSTEP,
    OP_WRITE,
    RESP_ALLOCR,
    RESP_ERR,
    RESP_OK,
    RESP_READR,
    recv_frame,
    send_frame,
)

log = logging.getLogger("oramkit.server")

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_REGION_OFF = struct.Struct("<IQ")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        store: TracedStore = self.server.store  # type: ignore[attr-defined]
        lock: threading.Lock = self.server.store_lock  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                opcode, body = recv_frame(sock)
            except (ConnectionError, OSError):
                return
            try:
                with lock:
                    resp_op, resp = self._dispatch(store, opcode, body)
            except StorageError as exc:
                try:
                    send_frame(sock, RESP_ERR, str(exc).encode())
                finally:
                    return
            except Exception as exc:  # malformed body, unknown opcode
                log.warning("session error: %s", exc)
                try:
                    send_frame(sock, RESP_ERR, str(exc).encode())
                finally:
                    return
            try:
                send_frame(sock, resp_op, resp)
            except OSError:
                return

    @staticmethod
    def _dispatch(store: TracedStore, opcode: int, body: bytes) -> tuple[int, bytes]:
        if opcode == OP_ALLOC:
            (length,) = _U64.unpack(body)
            return RESP_ALLOCR, _U32.pack(store.alloc(length))
        if opcode == OP_READ:
            region, offset = _REGION_OFF.unpack(body)
            return RESP_READR, store.read(region, offset)
        if opcode == OP_WRITE:
            region, offset = _REGION_OFF.unpack(body[: _REGION_OFF.size])
            store.write(region, offset, body[_REGION_OFF.size :])
            return RESP_OK, b""
        if opcode == OP_FREE:
            (region,) = _U32.unpack(body)
            store.free(region)
            return RESP_OK, b""
        if opcode == OP_SETSTEP:
            (step,) = _U64.unpack(body)
            store.set_step(step)
            return RESP_OK, b""
        raise ValueError(f"unknown opcode {opcode:#x}")


class BlockStoreServer:
    """Threaded server wrapping a backend in its own server-side trace."""

    def __init__(self, bind: tuple[str, int], backend: Backend, trace_mode: str = MODE_COUNTS):
        self.store = TracedStore(backend, mode=trace_mode)
        self._tcp = socketserver.ThreadingTCPServer(bind, _Handler, bind_and_activate=True)
        self._tcp.daemon_threads = True
        self._tcp.allow_reuse_address = True
        self._tcp.store = self.store  # type: ignore[attr-defined]
        self._tcp.store_lock = threading.Lock()  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        log.info("block store listening on %s:%d", *self.address)
        self._tcp.serve_forever()

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve_tcp(bind: tuple[str, int], backend: Backend) -> None:
    """Run the store until interrupted (SIGINT)."""
    server = BlockStoreServer(bind, backend)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
