import threading

import numpy as np
import pytest

from bulkpq import (MAX_FIRST, ContractError, EmptyQueueError, Item, OracleQueue,
                    ParallelPriorityQueue, SessionError)
from bulkpq.core import KiB, MiB


def keys(arr):
    return [int(x) for x in (arr["key"] if arr.dtype.names else arr)]


# -- classic interface ---------------------------------------------------------------

def test_push_pop_sorted(make_queue):
    pq = make_queue()
    for k in (3, 1, 2):
        pq.push(k)
    assert [pq.pop().key for _ in range(3)] == [1, 2, 3]
    assert pq.empty()


def test_pop_and_top_on_empty(make_queue):
    pq = make_queue()
    with pytest.raises(EmptyQueueError):
        pq.pop()
    with pytest.raises(EmptyQueueError):
        pq.top()


def test_top_does_not_remove(make_queue):
    pq = make_queue()
    pq.push(4)
    assert pq.top() == Item(4) and pq.size() == 1


def test_key_range_is_checked(make_queue):
    pq = make_queue()
    with pytest.raises(ContractError):
        pq.push(-1)
    with pytest.raises(ContractError):
        pq.push(1 << 64)


def test_classic_push_through_disk(make_queue, rng):
    pq = make_queue(mem_budget=1 * MiB)
    data = rng.integers(0, 1 << 64, 1 << 18, dtype=np.uint64)
    for k in data.tolist():
        pq.push(k)
    assert pq.stats()["flushes"] >= 2
    assert pq.counters.blocks_written > 0
    assert pq.accounted_bytes() <= pq.config.mem_budget
    pq.check()
    out = [pq.pop().key for _ in range(len(data))]
    assert out == sorted(data.tolist())
    assert pq.empty()


def test_interleaved_push_pop_matches_heapq(make_queue, rng):
    pq = make_queue(mem_budget=1 * MiB)
    oracle = OracleQueue(2)
    for step in range(60000):
        if rng.random() < 0.55:
            k = int(rng.integers(0, 5000))
            pq.push(k)
            oracle.push(k)
        elif oracle.size():
            assert pq.pop().key == oracle.pop()
        assert pq.size() == oracle.size()
        if step % 5000 == 0:
            pq.check()


# -- bulk insertion ---------------------------------------------------------------------

def test_bulk_session_small(make_queue):
    pq = make_queue()
    s = pq.bulk_push_begin(3)
    for k in (9, 1, 5):
        s.push(0, k)
    s.end()
    assert [pq.pop().key for _ in range(3)] == [1, 5, 9]


def test_bulk_heaps_grow_beyond_capacity(make_queue):
    pq = make_queue()
    cap = pq.config.insertion_heap_capacity
    s = pq.bulk_push_begin(10 ** 6)
    for k in range(20 * cap):
        s.push(0, 20 * cap - k)
    assert pq.ram.arrays == [] and pq.ram.heaps[0].pending_count == 20 * cap
    s.end()
    assert pq.top().key == 1
    pq.check()


def test_bulk_small_estimate_overflows_at_capacity(make_queue):
    pq = make_queue()
    cap = pq.config.insertion_heap_capacity
    with pq.bulk_push_begin(10) as s:
        s.push_many(0, np.arange(3 * cap))
        assert len(pq.ram.arrays) == 3
    assert keys(pq.bulk_pop(5)) == [0, 1, 2, 3, 4]


def test_bulk_concurrent_threads(make_queue, rng):
    pq = make_queue(num_threads=4, mem_budget=1 * MiB)
    parts = [np.arange(t, 200000, 4, dtype=np.uint64) for t in range(4)]
    with pq.bulk_push_begin(200000) as s:
        def work(t):
            for chunk in np.array_split(parts[t], 50):
                s.push_many(t, chunk)
            for k in range(100):
                s.push(t, int(parts[t][k]))
        threads = [threading.Thread(target=work, args=(t,)) for t in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert pq.size() == 200400
    pq.check()
    expect = np.sort(np.concatenate(parts + [p[:100] for p in parts]))
    assert np.array_equal(pq.bulk_pop(1 << 20), expect)


def test_bulk_push_after_end(make_queue):
    pq = make_queue()
    s = pq.bulk_push_begin(1)
    s.end()
    with pytest.raises(SessionError):
        s.push(0, 1)
    with pytest.raises(SessionError):
        s.end()
    with pytest.raises(SessionError):
        pq.bulk_push(0, 1)


def test_bulk_thread_index_checked(make_queue):
    pq = make_queue()
    with pq.bulk_push_begin(1) as s:
        with pytest.raises(ContractError):
            s.push(2, 1)


def test_hints_suppressed_during_bulk(make_queue):
    pq = make_queue(mem_budget=1 * MiB)
    pq.bulk_push_begin()
    before = pq.counters.hints_issued
    pq.bulk_push_many(0, np.arange(300000))
    assert pq.stats()["flushes"] >= 1
    assert pq.counters.hints_issued == before
    pq.bulk_push_end()
    assert pq.counters.hints_issued > before


# -- bulk extraction --------------------------------------------------------------------

def test_bulk_pop_examples(make_queue):
    pq = make_queue()
    for k in (5, 1, 3):
        pq.push(k)
    assert keys(pq.bulk_pop(2)) == [1, 3]
    assert keys(pq.bulk_pop(10)) == [5]
    assert pq.empty() and len(pq.bulk_pop(3)) == 0


def test_bulk_pop_across_disk(make_queue, rng):
    pq = make_queue(mem_budget=1 * MiB)
    data = rng.integers(0, 1 << 40, 400000, dtype=np.uint64)
    with pq.bulk_push_begin(len(data)) as s:
        s.push_many(0, data[:200000])
        s.push_many(1, data[200000:])
    assert pq.external.item_count() > 0
    expect = np.sort(data)
    got = np.concatenate([pq.bulk_pop(int(k)) for k in (1, 70000, 3, 250000, 1 << 20)])
    assert np.array_equal(got, expect)


def test_bulk_pop_limit_examples(make_queue):
    pq = make_queue()
    for k in (1, 2, 5):
        pq.push(k)
    got, more = pq.bulk_pop_limit(3, 1)
    assert (keys(got), more) == ([1], True)
    got, more = pq.bulk_pop_limit(3, 10)
    assert (keys(got), more) == ([2], False)
    assert keys(pq.bulk_pop(10)) == [5]


def test_bulk_pop_limit_zero(make_queue):
    pq = make_queue()
    pq.push(0)
    got, more = pq.bulk_pop_limit(0, 5)
    assert (len(got), more) == (0, False)


def test_bulk_pop_limit_disk_median(make_queue, rng):
    pq = make_queue(mem_budget=1 * MiB)
    data = rng.integers(0, 1 << 32, 300000, dtype=np.uint64)
    with pq.bulk_push_begin(len(data)) as s:
        s.push_many(0, data)
    median = int(np.median(data))
    got, more = pq.bulk_pop_limit(median, len(data))
    assert not more
    assert np.array_equal(got, np.sort(data[data < median]))
    assert pq.size() == int(np.sum(data >= median))


# -- limit sessions -----------------------------------------------------------------------

def test_limit_session_trace(make_queue):
    pq = make_queue()
    pq.push(1)
    pq.push(4)
    pq.limit_begin(3, 8)
    assert pq.limit_top().key == 1
    assert pq.limit_pop().key == 1
    pq.limit_push(7)
    assert pq.limit_top().key == 4
    pq.limit_end()
    assert keys(pq.bulk_pop(5)) == [4, 7]


def test_limit_push_below_limit(make_queue):
    pq = make_queue()
    pq.limit_begin(3)
    with pytest.raises(ContractError):
        pq.limit_push(2)
    pq.limit_push(3)
    pq.limit_end()
    assert pq.size() == 1


def test_limit_nested_session(make_queue):
    pq = make_queue()
    pq.limit_begin(3)
    with pytest.raises(SessionError):
        pq.limit_begin(4)
    with pytest.raises(SessionError):
        pq.bulk_push_begin()
    pq.limit_end()


def test_limit_top_includes_session_pushes(make_queue):
    pq = make_queue()
    pq.limit_begin(10)
    with pytest.raises(EmptyQueueError):
        pq.limit_top()
    pq.limit_push(12)
    pq.limit_push(11)
    assert pq.limit_top().key == 11
    assert pq.limit_pop().key == 11
    pq.limit_end()
    assert pq.size() == 1


def test_limit_end_returns_unpopped_run(make_queue):
    pq = make_queue()
    for k in range(10):
        pq.push(k)
    pq.limit_begin(100, 64)
    assert pq.limit_pop().key == 0
    pq.limit_end()
    assert pq.size() == 9
    pq.check()
    assert keys(pq.bulk_pop(20)) == list(range(1, 10))


def _key(item):
    return item.key if isinstance(item, Item) else item


def time_forward(queue, n, rng_seed):
    """Layered DAG relaxation: each popped node emits successors in later layers."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for k in rng.integers(0, 100, 200).tolist():
        queue.push(k)
    produced = 200
    layer = 100
    while queue.size():
        queue.limit_begin(layer, 50)
        while queue.size() and _key(queue.limit_top()) < layer:
            out.append(_key(queue.limit_pop()))
            if produced < n:
                for succ in rng.integers(1, 300, int(rng.integers(0, 3))).tolist():
                    queue.limit_push(layer + succ)
                    produced += 1
        queue.limit_end()
        layer += 100
    return out


def test_time_forward_processing_matches_oracle(make_queue):
    pq = make_queue(mem_budget=1 * MiB)
    got = time_forward(pq, 100000, 7)
    want = time_forward(OracleQueue(2), 100000, 7)
    assert got == want and len(got) > 50000


# -- memory accounting and flushing ----------------------------------------------------

def test_flush_keeps_accounting_under_budget(make_queue, rng):
    pq = make_queue(mem_budget=1 * MiB)
    for k in rng.integers(0, 1 << 30, 2 * MiB // 8).tolist():
        pq.push(k)
        assert pq.accounted_bytes() <= pq.config.mem_budget
    assert len(pq.external.arrays) >= 1


def test_under_budget_no_flush(make_queue):
    pq = make_queue()
    for k in range(1000):
        pq.push(k)
    assert pq.stats()["flushes"] == 0 and pq.counters.blocks_written == 0


def test_levels_appear_after_third_flush(make_queue):
    pq = make_queue(max_arrays_per_level=2)
    for i in range(3):
        for k in range(100):
            pq.push(i * 100 + k)
        pq.flush()
        levels = sorted(a.level for a in pq.external.arrays)
        assert levels == ([0] * (i + 1) if i < 2 else [1])
    assert keys(pq.bulk_pop(1000)) == list(range(300))


def test_io_bound_push_all_pop_all(make_queue):
    B = 64 * KiB
    pq = make_queue(mem_budget=1 * MiB, max_arrays_per_level=4)
    n = 1 << 20
    with pq.bulk_push_begin(n) as s:
        for chunk in np.array_split(np.arange(n, dtype=np.uint64)[::-1], 64):
            s.push_many(0, chunk)
    assert np.array_equal(pq.bulk_pop(n), np.arange(n))
    data_blocks = -(-n * 8 // B)
    import math
    levels = math.ceil(math.log(n * 8 / pq.config.mem_budget, 4))
    assert pq.counters.blocks_written <= (levels + 1) * data_blocks


def test_size_counts_disk_items(make_queue):
    pq = make_queue(mem_budget=1 * MiB)
    pq.bulk_push_begin()
    pq.bulk_push_many(0, np.arange(300000))
    assert pq.size() == 300000
    pq.bulk_push_end()
    assert pq.size() == 300000 and pq.external.item_count() > 0
    pq.pop()
    assert pq.size() == 299999


# -- item variants -------------------------------------------------------------------------

def test_payloads_travel_with_keys(make_queue, rng):
    pq = make_queue(item_size=24, mem_budget=1 * MiB)
    ks = rng.permutation(120000)
    payload = {int(k): int(k).to_bytes(16, "little") for k in ks[:50]}
    for k in ks[:50]:
        pq.push(int(k), payload[int(k)])
    with pq.bulk_push_begin() as s:
        pl = np.array([int(k).to_bytes(16, "little") for k in ks[50:]], dtype="V16")
        s.push_many(1, ks[50:], pl)
    first = [pq.pop() for _ in range(30)]
    assert [it.key for it in first] == list(range(30))
    assert all(it.payload == it.key.to_bytes(16, "little") for it in first)
    rest = pq.bulk_pop(1 << 20)
    assert list(rest["key"]) == list(range(30, 120000))
    assert all(bytes(p) == int(k).to_bytes(16, "little") for k, p in zip(rest["key"][::997], rest["payload"][::997]))


def test_payload_size_checked(make_queue):
    pq = make_queue(item_size=24)
    with pytest.raises(ContractError):
        pq.push(1, b"short")


def test_max_first(make_queue, rng):
    pq = make_queue(order_direction=MAX_FIRST, mem_budget=1 * MiB)
    data = rng.integers(0, 1 << 64, 200000, dtype=np.uint64)
    with pq.bulk_push_begin() as s:
        s.push_many(0, data)
    assert pq.top().key == int(data.max())
    got, more = pq.bulk_pop_limit(1 << 63, 10 ** 6)
    assert np.array_equal(got, np.sort(data[data > (1 << 63)])[::-1])
    assert not more


def test_single_thread_config(make_queue, rng):
    pq = make_queue(num_threads=1, mem_budget=1 * MiB)
    data = rng.integers(0, 1000, 200000, dtype=np.uint64)
    with pq.bulk_push_begin() as s:
        s.push_many(0, data)
    assert np.array_equal(pq.bulk_pop(1 << 20), np.sort(data))


def test_context_manager_removes_files(small_config, scratch_dir):
    with ParallelPriorityQueue(small_config.replace(mem_budget=1 * MiB)) as pq:
        pq.bulk_push_begin()
        pq.bulk_push_many(0, np.arange(300000))
        pq.bulk_push_end()
        assert any(scratch_dir.glob("bulkpq.*.dat"))
    assert not any(scratch_dir.glob("bulkpq.*.dat"))


# -- phases ----------------------------------------------------------------------------------

@pytest.mark.parametrize("call", [
    lambda q: q.push(1), lambda q: q.pop(), lambda q: q.top(), lambda q: q.bulk_pop(1),
    lambda q: q.bulk_pop_limit(5, 1), lambda q: q.bulk_push_begin(), lambda q: q.limit_begin(1),
    lambda q: q.limit_pop(), lambda q: q.limit_push(5), lambda q: q.limit_end(), lambda q: q.flush(),
])
def test_calls_illegal_in_bulk_session(make_queue, call):
    pq = make_queue()
    pq.bulk_push_begin()
    with pytest.raises(SessionError):
        call(pq)


@pytest.mark.parametrize("call", [
    lambda q: q.bulk_push(0, 1), lambda q: q.bulk_push_end(), lambda q: q.limit_top(),
    lambda q: q.limit_pop(), lambda q: q.limit_push(1), lambda q: q.limit_end(),
])
def test_calls_illegal_when_idle(make_queue, call):
    with pytest.raises(SessionError):
        call(make_queue())
