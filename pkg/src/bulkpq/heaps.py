"""Insertion heaps, internal arrays and the in-RAM minima hierarchy.

Heap entries are plain ints (internal keys) for 8-byte items, or
``(key, seq, payload)`` tuples when items carry a payload; ``seq`` is a
push counter so that payloads never take part in comparisons.
"""
from __future__ import annotations

import heapq
import itertools
import threading
from dataclasses import dataclass

import numpy as np

from .core import SENTINEL, Config, keys_of
from .merge import SequenceSlice, TournamentTree, parallel_multiway_merge

HEAPS, ARRAYS, EXTRACT = 0, 1, 2
REFILL = "refill"


def entries_to_array(entries, dtype: np.dtype, presorted: bool = False) -> np.ndarray:
    """Turn heap entries into a sorted item array."""
    if dtype.names is None:
        arr = np.array(entries, dtype=dtype)
        if not presorted:
            arr.sort()
        return arr
    if not presorted:
        entries = sorted(entries)
    arr = np.empty(len(entries), dtype=dtype)
    if entries:
        arr["key"] = [e[0] for e in entries]
        arr["payload"] = [e[2] for e in entries]
    return arr


def sort_items(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.names is None:
        arr.sort()
        return arr
    return arr[np.argsort(arr["key"], kind="stable")]


class InsertionHeap:
    """Binary heap owned by one thread, plus an unordered bulk-append area."""

    __slots__ = ("owner", "capacity", "items", "pending", "pending_arrays", "pending_count")

    def __init__(self, owner: int, capacity: int):
        self.owner = owner
        self.capacity = capacity
        self.items: list = []
        self.pending: list = []
        self.pending_arrays: list[np.ndarray] = []
        self.pending_count = 0

    def __len__(self) -> int:
        return len(self.items) + self.pending_count

    def min_key(self) -> int:
        if not self.items:
            return SENTINEL
        top = self.items[0]
        return top if type(top) is int else top[0]

    def push(self, entry) -> bool:
        """Heap-ordered insert; returns True when the minimum changed."""
        items = self.items
        heapq.heappush(items, entry)
        return items[0] is entry

    def append(self, entry) -> None:
        self.pending.append(entry)
        self.pending_count += 1

    def append_array(self, arr: np.ndarray) -> None:
        if len(arr):
            self.pending_arrays.append(arr)
            self.pending_count += len(arr)

    def take_pending(self, dtype: np.dtype) -> np.ndarray:
        """Remove the bulk-append area and return it as one sorted array."""
        parts = list(self.pending_arrays)
        if self.pending:
            parts.append(entries_to_array(self.pending, dtype))
        self.pending = []
        self.pending_arrays = []
        self.pending_count = 0
        if not parts:
            return np.empty(0, dtype=dtype)
        return sort_items(np.concatenate(parts) if len(parts) > 1 else parts[0].copy())

    def pending_entries(self, dtype: np.dtype, seq) -> list:
        """Return and clear the append area as heap entries (small-bulk path)."""
        out = list(self.pending)
        for arr in self.pending_arrays:
            if dtype.names is None:
                out.extend(arr.tolist())
            else:
                out.extend((int(k), next(seq), bytes(p)) for k, p in zip(arr["key"], arr["payload"]))
        self.pending = []
        self.pending_arrays = []
        self.pending_count = 0
        return out


@dataclass(eq=False)
class InternalArray:
    data: np.ndarray
    level: int = 0
    pos: int = 0

    def __len__(self) -> int:
        return len(self.data) - self.pos

    def head_key(self) -> int:
        if self.pos >= len(self.data):
            return SENTINEL
        return int(keys_of(self.data)[self.pos])

    def remaining(self) -> np.ndarray:
        return self.data[self.pos:]


class MinimaHierarchy:
    """Three-level tournament: heap minima, internal-array heads, and a top
    tree over those two winners and the extract-buffer head.

    Keeping the trees separate makes replays after pops from a heap or the
    extract buffer cheaper than after pops from internal arrays.
    """

    def __init__(self, heaps, arrays, extract):
        self.heaps = heaps
        self.arrays = arrays
        self.extract = extract
        self.heap_tree = TournamentTree([h.min_key() for h in heaps])
        self.array_tree = TournamentTree([a.head_key() for a in arrays])
        self.top = TournamentTree([self.heap_tree.winner_key, self.array_tree.winner_key,
                                   extract.head_key()])

    def rebuild(self) -> None:
        self.heap_tree = TournamentTree([h.min_key() for h in self.heaps])
        self.rebuild_arrays()
        self.top.update(HEAPS, self.heap_tree.winner_key)
        self.top.update(EXTRACT, self.extract.head_key())

    def rebuild_arrays(self) -> None:
        self.array_tree = TournamentTree([a.head_key() for a in self.arrays])
        self.top.update(ARRAYS, self.array_tree.winner_key)

    def heap_changed(self, i: int) -> None:
        self.heap_tree.update(i, self.heaps[i].min_key())
        self.top.update(HEAPS, self.heap_tree.winner_key)

    def array_advanced(self, j: int) -> None:
        self.array_tree.update(j, self.arrays[j].head_key())
        self.top.update(ARRAYS, self.array_tree.winner_key)

    def extract_changed(self) -> None:
        self.top.update(EXTRACT, self.extract.head_key())

    def winner(self):
        """``(source, index, key)`` of the smallest in-RAM item; key is
        ``SENTINEL`` when everything is empty."""
        top = self.top
        src = top.winner
        key = top.winner_key
        if src == HEAPS:
            return src, self.heap_tree.winner, key
        if src == ARRAYS:
            return src, self.array_tree.winner, key
        return src, 0, key


class HeapLayer:
    """Owns the p insertion heaps and the leveled internal arrays."""

    def __init__(self, config: Config, extract, executor=None):
        self.config = config
        self.dtype = config.dtype
        self.plain = config.payload_size == 0
        self.p = config.num_threads
        self.executor = executor
        self.heaps = [InsertionHeap(i, config.insertion_heap_capacity) for i in range(self.p)]
        self.arrays: list[InternalArray] = []
        self.lock = threading.Lock()
        self.hierarchy = MinimaHierarchy(self.heaps, self.arrays, extract)
        self.deferred = False
        self.seq = itertools.count()
        self._taken: list = []

    # -- counts -------------------------------------------------------------

    def item_count(self) -> int:
        return sum(len(h) for h in self.heaps) + sum(len(a) for a in self.arrays)

    def level_counts(self) -> dict:
        counts: dict = {}
        for a in self.arrays:
            counts[a.level] = counts.get(a.level, 0) + 1
        return counts

    # -- insertion ----------------------------------------------------------

    def push(self, thread: int, entry) -> InternalArray | None:
        """Heap-ordered push. Returns the new level-0 array if the heap overflowed."""
        heap = self.heaps[thread]
        if heap.push(entry):
            self.hierarchy.heap_changed(thread)
        if len(heap.items) >= heap.capacity:
            return self.overflow_to_internal_array(thread)
        return None

    heap_push = push

    def peek_global_min(self, merge_limit: int = SENTINEL):
        """``(source, index, key)`` of the smallest in-RAM item.

        Returns None when RAM holds nothing and no external item is left, and
        ``REFILL`` when the winner lies above `merge_limit` (the smallest item
        that may still sit outside RAM), i.e. the extract buffer must be
        refilled before the answer can be trusted.
        """
        src, idx, key = self.hierarchy.winner()
        if merge_limit != SENTINEL and key > merge_limit:
            return REFILL
        if key == SENTINEL:
            return None
        return src, idx, key

    def overflow_to_internal_array(self, thread: int) -> InternalArray | None:
        heap = self.heaps[thread]
        if not heap.items:
            return None
        data = entries_to_array(heap.items, self.dtype)
        heap.items = []
        arr = InternalArray(data, 0)
        self.register(arr)
        self.hierarchy.heap_changed(thread)
        return arr

    def register(self, arr: InternalArray) -> None:
        with self.lock:
            self.arrays.append(arr)
            if not self.deferred:
                self.hierarchy.rebuild_arrays()

    def register_pending(self, thread: int) -> InternalArray | None:
        """Sort one thread's bulk-append area into a level-0 internal array."""
        data = self.heaps[thread].take_pending(self.dtype)
        if not len(data):
            return None
        arr = InternalArray(data, 0)
        self.register(arr)
        return arr

    def finish_bulk(self) -> None:
        """Close bulk-append mode: small areas rejoin their heaps, large ones
        become internal arrays; then the hierarchy is replayed once."""
        for i, heap in enumerate(self.heaps):
            if not heap.pending_count:
                continue
            if len(heap) > heap.capacity:
                # Overflow: the heap joins its append area in one sorted array.
                heap.pending.extend(heap.items)
                heap.pending_count += len(heap.items)
                heap.items = []
                self.register_pending(i)
            else:
                entries = heap.pending_entries(self.dtype, self.seq)
                if len(entries) * 8 < len(heap.items):
                    for entry in entries:
                        heapq.heappush(heap.items, entry)
                else:
                    heap.items.extend(entries)
                    heapq.heapify(heap.items)
        self.drop_exhausted()
        self.hierarchy.rebuild()

    # -- level merging ------------------------------------------------------

    def drop_exhausted(self) -> None:
        if any(len(a) == 0 for a in self.arrays):
            with self.lock:
                self.arrays[:] = [a for a in self.arrays if len(a)]

    def maybe_merge_internal_level(self, level: int, free_items: int | None = None) -> InternalArray | None:
        """Merge all arrays of `level` into one at ``level + 1`` once the level
        holds more than ``max_arrays_per_level`` arrays; cascades upward.

        `free_items` is the RAM headroom in items; the merge is skipped when
        its output would not fit.
        """
        members = [a for a in self.arrays if a.level == level]
        if len(members) <= self.config.max_arrays_per_level:
            return None
        total = sum(len(a) for a in members)
        if free_items is not None and total > free_items:
            return None
        slices = [SequenceSlice(a.data, a.pos) for a in members]
        data = parallel_multiway_merge(slices, p=self.p, executor=self.executor)
        merged = InternalArray(data, level + 1)
        with self.lock:
            keep = [a for a in self.arrays if a.level != level]
            self.arrays[:] = keep + [merged]
        if not self.deferred:
            self.hierarchy.rebuild_arrays()
        self.maybe_merge_internal_level(level + 1, free_items)
        return merged

    def merge_all_levels(self, free_items: int | None = None) -> bool:
        """Merge every overfull level; False if some level stays overfull
        because its merge would not fit into `free_items`."""
        level = 0
        while level <= max((a.level for a in self.arrays), default=-1):
            self.maybe_merge_internal_level(level, free_items)
            level += 1
        limit = self.config.max_arrays_per_level
        return all(c <= limit for c in self.level_counts().values())

    # -- extraction ---------------------------------------------------------

    def sources(self, max_items: int | None = None) -> list[SequenceSlice]:
        """Sorted views of every heap and internal array, for bulk merging.

        Heaps are sorted in place (a sorted list is still a valid heap). With
        `max_items`, a heap much larger than that only contributes its
        `max_items` smallest entries, popped off the heap; :meth:`consume`
        pushes back whatever the merge did not use.
        """
        out = []
        self._taken = []
        for heap in self.heaps:
            if max_items is not None and len(heap.items) > 4 * max_items:
                taken = [heapq.heappop(heap.items) for _ in range(max_items)]
                self._taken.append(taken)
            else:
                heap.items.sort()
                taken = heap.items
                self._taken.append(None)
            out.append(SequenceSlice(entries_to_array(taken, self.dtype, presorted=True)))
        for a in self.arrays:
            out.append(SequenceSlice(a.data, a.pos))
        return out

    def consume(self, slices: list[SequenceSlice]) -> None:
        """Apply the advances recorded in slices returned by :meth:`sources`."""
        for heap, s, taken in zip(self.heaps, slices, self._taken):
            if taken is not None:
                for entry in taken[s.begin:]:
                    heapq.heappush(heap.items, entry)
            elif s.begin:
                del heap.items[:s.begin]
        for a, s in zip(self.arrays, slices[len(self.heaps):]):
            a.pos = s.begin
        self.drop_exhausted()
        self.hierarchy.rebuild()

    def clear(self) -> None:
        """Forget every heap item and internal array (after a flush)."""
        for heap in self.heaps:
            heap.items = []
        with self.lock:
            self.arrays.clear()
        self.hierarchy.rebuild()
