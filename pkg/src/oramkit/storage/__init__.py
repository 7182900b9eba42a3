"""Untrusted block-store layer: backends, trace recording, wire protocol."""

from .backends import Backend, FileBackend, MemBackend, StorageError
from .server import BlockStoreServer, serve_tcp
from .trace import KIND_READ, KIND_WRITE, Trace, TraceEvent, digest_step_runs
from .tracing import MODE_COUNTS, MODE_EVENTS, MODE_SKELETON, TracedStore
from .wire import TcpBackend

__all__ = [
    "Backend",
    "BlockStoreServer",
    "FileBackend",
    "KIND_READ",
    "KIND_WRITE",
    "MODE_COUNTS",
    "MODE_EVENTS",
    "MODE_SKELETON",
    "MemBackend",
    "StorageError",
    "TcpBackend",
    "Trace",
    "TraceEvent",
    "TracedStore",
    "digest_step_runs",
    "serve_tcp",
]
