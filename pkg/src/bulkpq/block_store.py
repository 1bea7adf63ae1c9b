"""File-backed block storage with asynchronous reads and writes.

Blocks are fixed-size, headerless byte ranges striped round-robin over the
backing files. All I/O runs on a small thread pool; every request returns a
:class:`PendingIo` that can be waited on (and, for reads, canceled).
"""
from __future__ import annotations

import mmap
import os
import threading
from collections import deque
from concurrent.futures import CancelledError, Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

from .core import BulkPQError, Config, Counters

CANCELED = "canceled"
ALREADY_COMPLETED = "already_completed"


class BlockStoreError(BulkPQError, OSError):
    pass


class AllocationError(BlockStoreError):
    """No space left for another block."""


class BlockId(NamedTuple):
    file_index: int
    offset: int


@dataclass(eq=False)
class PendingIo:
    block: BlockId
    kind: str
    future: Future = field(repr=False)
    canceled: bool = False

    def done(self) -> bool:
        return self.future.done()

    def wait(self):
        """Block until the request finishes; returns the bytes for reads."""
        if self.canceled:
            raise BlockStoreError(f"{self.kind} of {self.block} was canceled")
        return self.future.result()


class BlockStore:
    def __init__(self, config: Config, counters: Counters | None = None):
        self.block_size = config.block_size
        self.counters = counters if counters is not None else Counters()
        self.direct_io = config.direct_io
        self.capacity = config.disk_capacity_bytes
        self.paths = []
        for p in config.paths:
            if os.path.isdir(p):
                p = os.path.join(p, f"bulkpq.{len(self.paths)}.dat")
            self.paths.append(p)
        self._fds: list[int | None] = [None] * len(self.paths)
        self._next_offset = [0] * len(self.paths)
        self._free: list[deque] = [deque() for _ in self.paths]
        self._rr = 0
        self._written: set[BlockId] = set()
        self._pending: dict[BlockId, PendingIo] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=config.io_threads, thread_name_prefix="bulkpq-io")
        self._closed = False

    # -- space management ------------------------------------------------

    def _fd(self, index: int) -> int:
        fd = self._fds[index]
        if fd is None:
            flags = os.O_RDWR | os.O_CREAT | os.O_TRUNC
            if self.direct_io:
                flags |= getattr(os, "O_DIRECT", 0)
            fd = os.open(self.paths[index], flags, 0o600)
            self._fds[index] = fd
        return fd

    def allocate_block(self) -> BlockId:
        """Reserve a block, round-robin over the backing files.

        Freed blocks of the chosen file are reused before the file grows.
        """
        with self._lock:
            n = len(self.paths)
            for attempt in range(n):
                index = (self._rr + attempt) % n
                if self._free[index]:
                    offset = self._free[index].popleft()
                elif self.capacity is None or self._next_offset[index] + self.block_size <= self.capacity:
                    offset = self._next_offset[index]
                    self._next_offset[index] += self.block_size
                else:
                    continue
                self._rr = (index + 1) % n
                self._fd(index)
                return BlockId(index, offset)
        raise AllocationError(f"all {n} backing files are full")

    def free_block(self, block: BlockId) -> None:
        with self._lock:
            if block in self._pending:
                raise BlockStoreError(f"cannot free {block} with I/O in flight")
            self._written.discard(block)
            self._free[block.file_index].append(block.offset)

    def blocks_in_use(self) -> int:
        with self._lock:
            total = sum(self._next_offset) // self.block_size
            return total - sum(len(f) for f in self._free)

    # -- I/O -----------------------------------------------------------------

    def _submit(self, block: BlockId, kind: str, fn) -> PendingIo:
        with self._lock:
            if self._closed:
                raise BlockStoreError("block store is closed")
            if block in self._pending:
                raise BlockStoreError(f"{block} already has a pending {self._pending[block].kind}")
            if kind == "read" and block not in self._written:
                raise BlockStoreError(f"read of never-written block {block}")
            # The future is created before the task can run so the task may
            # deregister itself; waiters then never observe a stale entry.
            pending = PendingIo(block, kind, Future())
            self._pending[block] = pending

        def task():
            try:
                return fn()
            finally:
                with self._lock:
                    if self._pending.get(block) is pending:
                        del self._pending[block]

        inner = self._pool.submit(task)
        pending.future = inner
        return pending

    def write_block_async(self, block: BlockId, data) -> PendingIo:
        data = memoryview(data).cast("B")
        if len(data) != self.block_size:
            raise BlockStoreError(f"write of {len(data)} bytes, block size is {self.block_size}")
        fd = self._fd(block.file_index)
        if self.direct_io:
            buf = mmap.mmap(-1, self.block_size)
            buf[:] = data
            data = buf

        def do_write():
            view = memoryview(data)
            done = 0
            while done < len(view):
                done += os.pwrite(fd, view[done:], block.offset + done)
            with self._lock:
                self._written.add(block)
            self.counters.add("blocks_written")

        return self._submit(block, "write", do_write)

    def read_block_async(self, block: BlockId) -> PendingIo:
        fd = self._fd(block.file_index)
        size = self.block_size

        def do_read():
            buf = mmap.mmap(-1, size) if self.direct_io else bytearray(size)
            view = memoryview(buf)
            done = 0
            while done < size:
                got = os.preadv(fd, [view[done:]], block.offset + done)
                if got == 0:
                    raise BlockStoreError(f"short read at {block}")
                done += got
            self.counters.add("blocks_read")
            return bytes(buf) if self.direct_io else buf

        return self._submit(block, "read", do_read)

    def cancel_read(self, pending: PendingIo) -> str:
        """Drop a read that has not started yet.

        Returns ``"canceled"`` or ``"already_completed"``; in the latter case
        the request is allowed to finish and its data stays available.
        """
        if pending.kind != "read":
            raise BlockStoreError("only reads can be canceled")
        if pending.canceled:
            return CANCELED
        if pending.future.cancel():
            pending.canceled = True
            with self._lock:
                if self._pending.get(pending.block) is pending:
                    del self._pending[pending.block]
            self.counters.add("hints_canceled")
            return CANCELED
        try:
            pending.future.result()
        except CancelledError:  # pragma: no cover - cancel() above would have won
            pass
        return ALREADY_COMPLETED

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self._pool.shutdown(wait=True, cancel_futures=True)
        for i, fd in enumerate(self._fds):
            if fd is not None:
                os.close(fd)
                self._fds[i] = None
                try:
                    os.unlink(self.paths[i])
                except FileNotFoundError:
                    pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
