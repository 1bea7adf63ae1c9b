import threading

import numpy as np
import pytest

from bulkpq.core import SENTINEL, Config, KiB, MiB
from bulkpq.external import ExtractBuffer
from bulkpq.heaps import (ARRAYS, EXTRACT, HEAPS, REFILL, HeapLayer, InsertionHeap, InternalArray,
                          entries_to_array)


def layer(p=2, cap=16, max_per_level=64, item_size=8):
    c = Config(num_threads=p, insertion_heap_capacity=cap, max_arrays_per_level=max_per_level,
               mem_budget=64 * MiB, block_size=64 * KiB, item_size=item_size)
    return HeapLayer(c, ExtractBuffer(c.dtype))


def u64(*xs):
    return np.array(xs, dtype=np.uint64)


def brute_min(ram):
    vals = [min(h.items) if h.items else SENTINEL for h in ram.heaps]
    vals += [int(a.data[a.pos]) for a in ram.arrays if len(a)]
    vals.append(ram.hierarchy.extract.head_key())
    return min(vals)


def test_push_into_empty_heap():
    ram = layer()
    ram.heap_push(0, 5)
    assert ram.heaps[0].min_key() == 5
    assert ram.hierarchy.winner() == (HEAPS, 0, 5)


def test_push_new_minimum_updates_hierarchy():
    ram = layer()
    for k in (2, 7):
        ram.heap_push(1, k)
    ram.heap_push(1, 1)
    assert ram.heaps[1].min_key() == 1
    assert ram.hierarchy.winner() == (HEAPS, 1, 1)


def test_bulk_append_keeps_insertion_order():
    h = InsertionHeap(0, 16)
    for k in (9, 1, 5):
        h.append(k)
    assert h.pending == [9, 1, 5]
    assert h.items == [] and len(h) == 3


def test_overflow_sorts_into_level_zero_array():
    ram = layer(cap=3)
    arr = None
    for k in (9, 1, 5):
        arr = ram.heap_push(0, k)
    assert list(arr.data) == [1, 5, 9] and arr.level == 0
    assert ram.heaps[0].items == []
    assert ram.hierarchy.winner() == (ARRAYS, 0, 1)


def test_overflow_single_item():
    ram = layer(cap=1)
    arr = ram.heap_push(0, 1)
    assert list(arr.data) == [1]


def test_overflow_of_empty_heap_is_noop():
    assert layer().overflow_to_internal_array(0) is None


def test_concurrent_overflow_registers_all():
    ram = layer(p=8, cap=1 << 10)
    ram.deferred = True
    start = threading.Barrier(8)

    def work(t):
        h = ram.heaps[t]
        start.wait()
        for rnd in range(50):
            h.append_array(u64(t, rnd))
            ram.register_pending(t)

    threads = [threading.Thread(target=work, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ram.arrays) == 400


def test_level_merge_over_threshold():
    ram = layer(max_per_level=2)
    for a in ([1, 4], [2, 5], [3, 6]):
        ram.register(InternalArray(u64(*a), 0))
    merged = ram.maybe_merge_internal_level(0)
    assert list(merged.data) == [1, 2, 3, 4, 5, 6] and merged.level == 1
    assert ram.arrays == [merged]
    assert ram.hierarchy.winner() == (ARRAYS, 0, 1)


def test_level_merge_at_threshold_is_noop():
    ram = layer(max_per_level=2)
    ram.register(InternalArray(u64(1), 0))
    ram.register(InternalArray(u64(2), 0))
    assert ram.maybe_merge_internal_level(0) is None
    assert len(ram.arrays) == 2


def test_level_merge_uses_unconsumed_suffixes():
    ram = layer(max_per_level=1)
    ram.register(InternalArray(u64(1, 4), 0, pos=1))
    ram.register(InternalArray(u64(2), 0))
    assert list(ram.maybe_merge_internal_level(0).data) == [2, 4]


def test_level_merge_respects_ram_headroom():
    ram = layer(max_per_level=1)
    ram.register(InternalArray(u64(1, 4), 0))
    ram.register(InternalArray(u64(2), 0))
    assert ram.maybe_merge_internal_level(0, free_items=2) is None


def test_level_merge_cascades():
    ram = layer(max_per_level=1)
    ram.register(InternalArray(u64(10), 1))
    ram.register(InternalArray(u64(1), 0))
    ram.register(InternalArray(u64(2), 0))
    ram.maybe_merge_internal_level(0)
    assert [(a.level, list(a.data)) for a in ram.arrays] == [(2, [1, 2, 10])]


def test_peek_global_min_picks_array():
    ram = layer()
    ram.heap_push(0, 7)
    ram.register(InternalArray(u64(3, 8), 0))
    ram.hierarchy.extract.append(u64(5))
    ram.hierarchy.extract_changed()
    assert ram.peek_global_min() == (ARRAYS, 0, 3)


def test_peek_global_min_empty():
    assert layer().peek_global_min() is None


def test_peek_global_min_signals_refill():
    ram = layer()
    ram.heap_push(0, 9)
    assert ram.peek_global_min(merge_limit=4) is REFILL
    assert ram.peek_global_min(merge_limit=9) == (HEAPS, 0, 9)
    # Nothing in RAM but items remain outside: also a refill.
    assert layer().peek_global_min(merge_limit=4) is REFILL


def test_extract_source_wins_when_smallest():
    ram = layer()
    ram.heap_push(0, 7)
    ram.hierarchy.extract.append(u64(2))
    ram.hierarchy.extract_changed()
    assert ram.peek_global_min()[0] == EXTRACT


def test_hierarchy_tracks_brute_force_minimum(rng):
    ram = layer(p=3, cap=8, max_per_level=2)
    total = 0
    for step in range(2000):
        r = rng.random()
        if r < 0.6 or total == 0:
            ram.heap_push(int(rng.integers(0, 3)), int(rng.integers(0, 1000)))
            total += 1
        else:
            src, idx, _ = ram.hierarchy.winner()
            if src == HEAPS:
                import heapq
                heapq.heappop(ram.heaps[idx].items)
                ram.hierarchy.heap_changed(idx)
            else:
                ram.arrays[idx].pos += 1
                ram.hierarchy.array_advanced(idx)
            total -= 1
        if step % 50 == 0:
            ram.merge_all_levels()
        assert ram.hierarchy.winner()[2] == brute_min(ram)
        assert ram.item_count() == total
    for a in ram.arrays:
        assert np.all(a.data[1:] >= a.data[:-1])


def test_finish_bulk_small_and_large():
    ram = layer(cap=4)
    ram.deferred = True
    for k in (9, 1, 5):
        ram.heaps[0].append(k)
    ram.heaps[1].append_array(u64(8, 3, 6, 7, 2))
    ram.finish_bulk()
    assert sorted(ram.heaps[0].items) == [1, 5, 9] and ram.heaps[0].items[0] == 1
    assert [list(a.data) for a in ram.arrays] == [[2, 3, 6, 7, 8]]
    assert ram.hierarchy.winner()[2] == 1


def test_sources_and_consume():
    ram = layer()
    for k in (4, 2, 6):
        ram.heap_push(0, k)
    ram.register(InternalArray(u64(1, 3, 5), 0))
    slices = ram.sources()
    slices[0].begin = 2
    slices[2].begin = 3
    ram.consume(slices)
    assert ram.heaps[0].items == [6] and ram.arrays == []
    assert ram.hierarchy.winner()[2] == 6


def test_payload_entries_roundtrip():
    ram = layer(item_size=24)
    entries = [(5, 1, b"e" * 16), (2, 0, b"b" * 16)]
    arr = entries_to_array(entries, ram.dtype)
    assert list(arr["key"]) == [2, 5]
    assert bytes(arr["payload"][0]) == b"b" * 16
