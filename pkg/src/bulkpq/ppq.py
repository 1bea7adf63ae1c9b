"""The bulk-parallel external-memory priority queue."""
from __future__ import annotations

import heapq
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .block_store import BlockStore
from .core import (MAX_FIRST, MAX_KEY, SENTINEL, Config, ContractError, Counters, EmptyQueueError,
                   Item, SessionError, keys_of)
from .external import ExternalMemory
from .heaps import ARRAYS, HEAPS, REFILL, HeapLayer, InternalArray
from .merge import SequenceSlice, parallel_multiway_merge

IDLE = "idle"
SMALL_EXTRACT = 64
BULK = "bulk_push"
LIMIT = "limit"


class BulkSession:
    """Handle returned by :meth:`ParallelPriorityQueue.bulk_push_begin`.

    ``push``/``push_many`` may be called concurrently as long as every
    caller uses its own thread index.
    """

    def __init__(self, pq: "ParallelPriorityQueue", estimate: int):
        self.pq = pq
        self.estimate = estimate
        self.open = True

    def push(self, thread: int, key: int, payload: bytes | None = None) -> None:
        if not self.open:
            raise SessionError("bulk_push on a closed session")
        self.pq._append(thread, key, payload)

    def push_many(self, thread: int, keys, payloads=None) -> None:
        if not self.open:
            raise SessionError("bulk_push on a closed session")
        self.pq._append_many(thread, keys, payloads)

    def end(self) -> None:
        if not self.open:
            raise SessionError("bulk session already ended")
        self.pq._end_bulk(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.open:
            self.end()


class ParallelPriorityQueue:
    """External-memory priority queue with bulk and limit interfaces.

    Classic ``push``/``top``/``pop`` are single-caller operations. Inside a
    bulk session (``bulk_push_begin`` ... ``bulk_push_end``) pushes from
    distinct thread indices may run concurrently. Inside a limit session
    (``limit_begin(L)`` ... ``limit_end``) extraction of items below ``L`` is
    decoupled from insertions, which must all be ``>= L``.

    Keys are unsigned 64-bit integers; "smaller" follows
    ``config.order_direction``.
    """

    def __init__(self, config: Config | None = None, **overrides):
        if config is None:
            config = Config(**overrides)
        elif overrides:
            config = config.replace(**overrides)
        self.config = config
        self.counters = Counters()
        self.p = config.num_threads
        self.item_size = config.item_size
        self.plain = config.payload_size == 0
        self.reverse = config.order_direction == MAX_FIRST
        self.executor = ThreadPoolExecutor(self.p, thread_name_prefix="bulkpq-merge") if self.p > 1 else None
        self.store = BlockStore(config, self.counters)
        self.external = ExternalMemory(config, self.store, self.counters, self.executor)
        self.extract = self.external.extract
        self.ram = HeapLayer(config, self.extract, self.executor)
        self.lock = threading.RLock()
        self.ram.lock = self.lock
        self.phase = IDLE
        self._session: BulkSession | None = None
        self._size = 0
        self._session_pushed = [0] * self.p
        self._allowance = config.insertion_heap_capacity
        self._limit_cap = 0
        self._limit_chunk = 1
        self._limit_run = np.empty(0, dtype=config.dtype)
        self._limit_pos = 0
        self._refresh_external()

    # -- housekeeping ---------------------------------------------------------

    def close(self) -> None:
        self.store.close()
        if self.executor is not None:
            self.executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def size(self) -> int:
        return self._size + sum(self._session_pushed)

    __len__ = size

    def empty(self) -> bool:
        return self.size() == 0

    def accounted_bytes(self) -> int:
        """Item bytes held in RAM plus reserved write and read buffers."""
        return self._ram_items() * self.item_size + self._reserved_bytes()

    def _reserved_bytes(self) -> int:
        c = self.config
        return c.write_buffer_blocks * c.block_size + self.external.read_buffer_bytes()

    def _ram_items(self) -> int:
        return self.size() - self._ext_items

    def _refresh_external(self) -> None:
        self._ext_items = self.external.item_count()
        self._floor = self.external.floor_key()
        self._capacity = (self.config.mem_budget - self._reserved_bytes()) // self.item_size

    def stats(self) -> dict:
        s = self.counters.snapshot()
        ext = self.external.stats
        s.update(external_arrays=len(self.external.arrays), internal_arrays=len(self.ram.arrays),
                 arrays_created=ext.arrays_created, flushes=ext.flushes, level_merges=ext.level_merges,
                 refills=ext.refills, max_external_arrays=ext.max_arrays)
        return s

    # -- key encoding ---------------------------------------------------------

    def _encode(self, key) -> int:
        if not 0 <= key <= MAX_KEY:
            raise ContractError(f"key {key} is not an unsigned 64-bit integer")
        return MAX_KEY - key if self.reverse else int(key)

    def _entry(self, key: int, payload):
        k = self._encode(key)
        if self.plain:
            return k
        return (k, next(self.ram.seq), self._payload(payload))

    def _payload(self, payload) -> bytes:
        size = self.config.payload_size
        if payload is None:
            return bytes(size)
        payload = bytes(payload)
        if len(payload) != size:
            raise ContractError(f"payload must be exactly {size} bytes")
        return payload

    def _encode_array(self, keys, payloads=None) -> np.ndarray:
        keys = np.asarray(keys)
        if keys.dtype.kind not in "ui":
            raise ContractError("keys must be integers")
        if keys.dtype.kind == "i" and len(keys) and keys.min() < 0:
            raise ContractError("keys must be non-negative")
        k = keys.astype(np.uint64, copy=True)
        if self.reverse:
            np.invert(k, out=k)
        if self.plain:
            return k
        arr = np.zeros(len(k), dtype=self.config.dtype)
        arr["key"] = k
        if payloads is not None:
            arr["payload"] = np.asarray(payloads, dtype=arr.dtype["payload"])
        return arr

    def _decode_array(self, arr: np.ndarray) -> np.ndarray:
        if not self.reverse:
            return arr
        if self.plain:
            return ~arr
        out = arr.copy()
        out["key"] = ~out["key"]
        return out

    def _item(self, k: int, payload=b"") -> Item:
        return Item(MAX_KEY - k if self.reverse else k, payload)

    def _item_from_entry(self, entry) -> Item:
        if type(entry) is int:
            return self._item(entry)
        return self._item(entry[0], entry[2])

    def _item_from_row(self, arr: np.ndarray, i: int) -> Item:
        if self.plain:
            return self._item(int(arr[i]))
        row = arr[i]
        return self._item(int(row["key"]), bytes(row["payload"]))

    # -- phase checks ----------------------------------------------------------

    def _require(self, phase: str, op: str) -> None:
        if self.phase != phase:
            raise SessionError(f"{op} is not allowed in phase {self.phase!r}")

    def _check_thread(self, thread: int) -> None:
        if not 0 <= thread < self.p:
            raise ContractError(f"thread index {thread} outside [0, {self.p})")

    # -- classic interface -----------------------------------------------------

    def push(self, key: int, payload: bytes | None = None) -> None:
        self._require(IDLE, "push")
        entry = self._entry(key, payload)
        arr = self.ram.push(0, entry)
        self._size += 1
        self.counters.add("items_pushed")
        if arr is not None:
            self._merge_internal()
        self._flush_if_over_budget()

    def top(self) -> Item:
        self._require(IDLE, "top")
        return self._peek_main()

    def pop(self) -> Item:
        self._require(IDLE, "pop")
        return self._pop_main()

    def _winner(self):
        """In-RAM winner, refilling the extract buffer first whenever the
        winner might lie above an item still held by an external array."""
        while True:
            found = self.ram.peek_global_min(self._floor if self._ext_items else SENTINEL)
            if found is REFILL:
                self._refill(self.config.extract_buffer_max)
                continue
            if found is None:
                raise EmptyQueueError("priority queue is empty")
            return found

    def _peek_main(self) -> Item:
        src, idx, _ = self._winner()
        if src == HEAPS:
            return self._item_from_entry(self.ram.heaps[idx].items[0])
        if src == ARRAYS:
            a = self.ram.arrays[idx]
            return self._item_from_row(a.data, a.pos)
        return self._item_from_row(self.extract.data, self.extract.pos)

    def _take(self, src: int, idx: int):
        """Remove the winner found at (src, idx); returns ``(key, payload)``
        in internal key space."""
        hier = self.ram.hierarchy
        if src == HEAPS:
            entry = heapq.heappop(self.ram.heaps[idx].items)
            hier.heap_changed(idx)
            return (entry, b"") if type(entry) is int else (entry[0], entry[2])
        if src == ARRAYS:
            a = self.ram.arrays[idx]
            data, pos = a.data, a.pos
            a.pos += 1
            hier.array_advanced(idx)
        else:
            data, pos = self.extract.data, self.extract.pos
            self.extract.pos += 1
            hier.extract_changed()
        if self.plain:
            return int(data[pos]), b""
        row = data[pos]
        return int(row["key"]), bytes(row["payload"])

    def _pop_main(self) -> Item:
        key, payload = self._take(*self._winner()[:2])
        self._size -= 1
        self.counters.add("items_popped")
        return self._item(key, payload)

    def _refill(self, max_items: int, cap: int | None = None) -> int:
        n = self.external.refill_extract_buffer(max_items, cap)
        self.ram.hierarchy.extract_changed()
        self._refresh_external()
        return n

    # -- bulk extraction -------------------------------------------------------

    def bulk_pop(self, k: int) -> np.ndarray:
        """Remove and return the ``min(k, size)`` smallest items, sorted."""
        self._require(IDLE, "bulk_pop")
        out = self._extract(k, None)
        self._size -= len(out)
        self.counters.add("items_popped", len(out))
        return self._decode_array(out)

    def bulk_pop_limit(self, limit: int, k: int):
        """Remove up to `k` items strictly smaller than `limit`.

        Returns ``(items, more)`` where `more` tells whether items smaller than
        `limit` remain in the queue.
        """
        self._require(IDLE, "bulk_pop_limit")
        cap = self._limit_key(limit)
        out = self._extract(k, cap)
        self._size -= len(out)
        self.counters.add("items_popped", len(out))
        return self._decode_array(out), self._more_below(cap)

    def _limit_key(self, limit: int) -> int:
        if not 0 <= limit <= MAX_KEY:
            raise ContractError(f"limit {limit} is not an unsigned 64-bit integer")
        # Internal keys strictly below the returned value are before `limit`.
        return MAX_KEY - limit if self.reverse else limit

    def _more_below(self, cap: int) -> bool:
        _, _, key = self.ram.hierarchy.winner()
        return min(key, self._floor if self._ext_items else SENTINEL) < cap

    def _extract(self, k: int, cap: int | None) -> np.ndarray:
        """Merge out up to `k` smallest items (keys below `cap`) from RAM and,
        via the extract buffer, from external arrays. Does not touch size."""
        if k <= SMALL_EXTRACT:
            return self._extract_small(k, cap)
        chunks = []
        remaining = max(0, min(k, self.size()))
        while remaining > 0:
            limit = cap
            if self._ext_items:
                bound = self._floor + 1
                limit = bound if limit is None else min(limit, bound)
            slices = self.ram.sources(remaining)
            slices.append(SequenceSlice(self.extract.data, self.extract.pos))
            chunk = parallel_multiway_merge(slices, remaining, value_limit=limit, p=self.p,
                                            executor=self.executor)
            self.extract.pos = slices[-1].begin
            self.ram.consume(slices[:-1])
            if len(chunk):
                chunks.append(chunk)
                remaining -= len(chunk)
            elif self._ext_items and (cap is None or self._floor < cap):
                self._refill(remaining, cap)
            else:
                break
        if not chunks:
            return np.empty(0, dtype=self.config.dtype)
        return chunks[0] if len(chunks) == 1 else np.concatenate(chunks)

    def _extract_small(self, k: int, cap: int | None) -> np.ndarray:
        # A few tournament pops beat sorting every insertion heap.
        out = np.empty(max(0, min(k, self.size())), dtype=self.config.dtype)
        n = 0
        while n < len(out):
            try:
                src, idx, key = self._winner()
            except EmptyQueueError:
                break
            if cap is not None and key >= cap:
                break
            key, payload = self._take(src, idx)
            out[n] = key if self.plain else (key, payload)
            n += 1
        return out[:n]

    # -- bulk insertion --------------------------------------------------------

    def bulk_push_begin(self, estimate: int = 0) -> BulkSession:
        """Open a bulk insertion session; `estimate` is the expected bulk size."""
        self._require(IDLE, "bulk_push_begin")
        self.phase = BULK
        self._session = BulkSession(self, estimate)
        self.external.suppress_hints()
        self.ram.deferred = True
        cap = self.config.insertion_heap_capacity
        self._allowance = cap
        if estimate // self.p > cap:
            free = max(0, self._capacity - self._ram_items())
            self._allowance = max(cap, free // self.p)
        return self._session

    def bulk_push(self, thread: int, key: int, payload: bytes | None = None) -> None:
        self._require(BULK, "bulk_push")
        self._session.push(thread, key, payload)

    def bulk_push_many(self, thread: int, keys, payloads=None) -> None:
        """Vectorized ``bulk_push`` of a whole array of keys."""
        self._require(BULK, "bulk_push")
        self._session.push_many(thread, keys, payloads)

    def bulk_push_end(self) -> None:
        self._require(BULK, "bulk_push_end")
        self._session.end()

    def _append(self, thread: int, key: int, payload) -> None:
        self._check_thread(thread)
        heap = self.ram.heaps[thread]
        heap.append(self._entry(key, payload))
        self._session_pushed[thread] += 1
        if heap.pending_count >= self._allowance:
            self._overflow_pending(thread)
        elif self._ram_items() > self._capacity:
            self._overflow_pending(thread)

    def _append_many(self, thread: int, keys, payloads) -> None:
        self._check_thread(thread)
        arr = self._encode_array(keys, payloads)
        heap = self.ram.heaps[thread]
        step = self._allowance
        for i in range(0, len(arr), step):
            part = arr[i:i + step]
            heap.append_array(part)
            self._session_pushed[thread] += len(part)
            if heap.pending_count >= self._allowance or self._ram_items() > self._capacity:
                self._overflow_pending(thread)

    def _overflow_pending(self, thread: int) -> None:
        self.ram.register_pending(thread)
        with self.lock:
            if self._ram_items() > self._capacity:
                self._flush()

    def _end_bulk(self, session: BulkSession) -> None:
        session.open = False
        self._session = None
        self._close_append_mode()
        self.external.resume_hints()
        self._refresh_external()
        self.phase = IDLE

    def _close_append_mode(self) -> None:
        self.ram.finish_bulk()
        self.ram.deferred = False
        self.ram.hierarchy.rebuild()
        pushed = sum(self._session_pushed)
        self._session_pushed = [0] * self.p
        self._size += pushed
        self.counters.add("items_pushed", pushed)
        self._merge_internal()
        self._flush_if_over_budget()

    # -- limit interface ---------------------------------------------------------

    def limit_begin(self, limit: int, bulk_size: int = 1 << 14) -> None:
        self._require(IDLE, "limit_begin")
        if bulk_size < 1:
            raise ContractError("bulk_size must be >= 1")
        self._limit_cap = self._limit_key(limit)
        self._limit_chunk = bulk_size
        self._limit_run = self._limit_run[:0]
        self._limit_pos = 0
        self._allowance = self.config.insertion_heap_capacity
        self.phase = LIMIT

    def _limit_fill(self) -> bool:
        if self._limit_pos < len(self._limit_run):
            return True
        run = self._extract(self._limit_chunk, self._limit_cap)
        self._limit_run = run
        self._limit_pos = 0
        return len(run) > 0

    def limit_top(self) -> Item:
        """Smallest item; may be ``>= L`` once everything below L is gone."""
        self._require(LIMIT, "limit_top")
        if self._limit_fill():
            return self._item_from_row(self._limit_run, self._limit_pos)
        main, pend = self._limit_candidates()
        if pend is not None and (main is None or pend[0] < main):
            return self._item_from_entry(pend[1])
        if main is None:
            raise EmptyQueueError("priority queue is empty")
        return self._peek_main()

    def limit_pop(self) -> Item:
        self._require(LIMIT, "limit_pop")
        if self._limit_fill():
            item = self._item_from_row(self._limit_run, self._limit_pos)
            self._limit_pos += 1
            self._size -= 1
            self.counters.add("items_popped")
            return item
        main, pend = self._limit_candidates()
        if pend is not None and (main is None or pend[0] < main):
            return self._take_pending(pend)
        if main is None:
            raise EmptyQueueError("priority queue is empty")
        return self._pop_main()

    def limit_push(self, key: int, payload: bytes | None = None, thread: int = 0) -> None:
        self._require(LIMIT, "limit_push")
        if self._encode(key) < self._limit_cap:
            raise ContractError(f"limit_push of {key} below the session limit")
        self._append(thread, key, payload)

    def limit_end(self) -> None:
        self._require(LIMIT, "limit_end")
        rest = self._limit_run[self._limit_pos:]
        if len(rest):
            self.ram.register(InternalArray(rest.copy(), 0))
        self._limit_run = self._limit_run[:0]
        self._limit_pos = 0
        self._close_append_mode()
        self._refresh_external()
        self.phase = IDLE

    def _limit_candidates(self):
        """(smallest key of the main structure or None, smallest pending entry
        as ``(key, entry, thread, where)`` or None)."""
        try:
            _, _, main = self._winner()
        except EmptyQueueError:
            main = None
        best = None
        for t, heap in enumerate(self.ram.heaps):
            for i, e in enumerate(heap.pending):
                k = e if type(e) is int else e[0]
                if best is None or k < best[0]:
                    best = (k, e, t, ("list", i))
            for ai, arr in enumerate(heap.pending_arrays):
                if len(arr):
                    i = int(np.argmin(keys_of(arr)))
                    k = int(keys_of(arr)[i])
                    if best is None or k < best[0]:
                        e = k if self.plain else (k, 0, bytes(arr[i]["payload"]))
                        best = (k, e, t, ("array", ai, i))
        return main, best

    def _take_pending(self, pend) -> Item:
        _, entry, t, where = pend
        heap = self.ram.heaps[t]
        if where[0] == "list":
            del heap.pending[where[1]]
        else:
            _, ai, i = where
            heap.pending_arrays[ai] = np.delete(heap.pending_arrays[ai], i)
        heap.pending_count -= 1
        self._session_pushed[t] -= 1
        self.counters.add("items_pushed", 1)
        self.counters.add("items_popped", 1)
        return self._item_from_entry(entry)

    # -- memory management -------------------------------------------------------

    def _merge_internal(self) -> None:
        free = max(0, self._capacity - self._ram_items())
        if not self.ram.merge_all_levels(free):
            # No room to merge in RAM: move everything to an external array.
            with self.lock:
                self._flush()

    def _flush_if_over_budget(self) -> None:
        if self._ram_items() > self._capacity:
            with self.lock:
                self._flush()

    def flush(self) -> None:
        """Force all in-RAM items (except open bulk appends) to disk."""
        self._require(IDLE, "flush")
        with self.lock:
            self._flush()

    def _flush(self) -> None:
        slices = self.ram.sources()
        slices.append(SequenceSlice(self.extract.data, self.extract.pos))
        if not any(len(s) for s in slices):
            return
        self.external.create_external_array(slices)
        self.ram.clear()
        self.extract.clear()
        self.ram.hierarchy.rebuild()
        self.external.merge_levels()
        self.external.relieve_pressure(self.config.mem_budget // 2)
        self._refresh_external()

    # -- introspection for tests ---------------------------------------------------

    def check(self) -> None:
        """Raise AssertionError if an internal invariant is broken (slow)."""
        ram = self.ram
        for a in ram.arrays:
            k = keys_of(a.remaining())
            assert np.all(k[:-1] <= k[1:]), "internal array not sorted"
        for h in ram.heaps:
            items = h.items
            for i in range(1, len(items)):
                assert not items[i] < items[(i - 1) // 2], "heap property violated"
        counted = ram.item_count() + len(self.extract) + self.external.item_count()
        counted += len(self._limit_run) - self._limit_pos
        assert counted == self.size(), f"conservation: {counted} stored vs size {self.size()}"
        snap = self.counters.snapshot()
        assert snap["items_pushed"] + sum(self._session_pushed) - snap["items_popped"] == self.size()
        if self.phase == IDLE:
            candidates = [h.min_key() for h in ram.heaps] + [a.head_key() for a in ram.arrays]
            candidates.append(self.extract.head_key())
            assert ram.hierarchy.winner()[2] == min(candidates), "minima hierarchy is stale"
            assert self.accounted_bytes() <= self.config.mem_budget, "memory budget exceeded"
        for arr in self.external.arrays:
            order = {"Finished": 0, "Loaded": 1, "Hinted": 2, "External": 3}
            states = [order[s] for s in arr.states()]
            assert states == sorted(states), f"block states out of order: {arr.states()}"
