"""In-RAM oracle queue and a randomized differential driver.

The oracle exposes the same public methods and error types as
:class:`bulkpq.ParallelPriorityQueue`, computed by the most direct means
(a binary heap plus scans). Scripts are lists of :class:`Op` and can be
written to and read from a line-oriented text format for reproduction.
"""
from __future__ import annotations

import heapq
import random
import threading
from typing import NamedTuple

import numpy as np

from .core import MAX_FIRST, MAX_KEY, MIN_FIRST, BulkPQError, ContractError, EmptyQueueError, SessionError

IDLE, BULK, LIMIT = "idle", "bulk_push", "limit"
PROFILES = ("mixed", "bulk-heavy", "limit-heavy", "flush-forcing")


class _OracleSession:
    def __init__(self, q: "OracleQueue"):
        self.q = q
        self.open = True

    def push(self, thread, key, payload=None):
        if not self.open:
            raise SessionError("bulk_push on a closed session")
        self.q._append(thread, key)

    def push_many(self, thread, keys, payloads=None):
        if not self.open:
            raise SessionError("bulk_push on a closed session")
        keys = np.asarray(keys)
        if keys.dtype.kind not in "ui" or (keys.dtype.kind == "i" and len(keys) and keys.min() < 0):
            raise ContractError("keys must be unsigned 64-bit integers")
        self.q._append_many(thread, keys)

    def end(self):
        if not self.open:
            raise SessionError("bulk session already ended")
        self.open = False
        self.q._flush_pending()
        self.q.phase = IDLE

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.open:
            self.end()


class OracleQueue:
    """Trusted priority queue over keys only (payloads are ignored)."""

    def __init__(self, num_threads: int = 4, order_direction: str = MIN_FIRST):
        self.p = num_threads
        self.reverse = order_direction == MAX_FIRST
        self.heap: list[int] = []
        self.pending: list[int] = []
        self.phase = IDLE
        self.session: _OracleSession | None = None
        self.limit = 0

    # internal keys are flipped for max-first so the heap is always a min-heap
    def _enc(self, key) -> int:
        if not isinstance(key, (int, np.integer)) or not 0 <= key <= MAX_KEY:
            raise ContractError(f"key {key!r} is not an unsigned 64-bit integer")
        return MAX_KEY - int(key) if self.reverse else int(key)

    def _dec(self, k: int) -> int:
        return MAX_KEY - k if self.reverse else k

    def _require(self, phase, op):
        if self.phase != phase:
            raise SessionError(f"{op} is not allowed in phase {self.phase!r}")

    def size(self) -> int:
        return len(self.heap) + len(self.pending)

    __len__ = size

    def empty(self) -> bool:
        return self.size() == 0

    def push(self, key, payload=None):
        self._require(IDLE, "push")
        heapq.heappush(self.heap, self._enc(key))

    def top(self) -> int:
        self._require(IDLE, "top")
        if not self.heap:
            raise EmptyQueueError("priority queue is empty")
        return self._dec(self.heap[0])

    def pop(self) -> int:
        self._require(IDLE, "pop")
        if not self.heap:
            raise EmptyQueueError("priority queue is empty")
        return self._dec(heapq.heappop(self.heap))

    def flush(self):
        self._require(IDLE, "flush")

    def bulk_pop(self, k: int) -> list[int]:
        self._require(IDLE, "bulk_pop")
        n = max(0, min(k, len(self.heap)))
        return [self._dec(heapq.heappop(self.heap)) for _ in range(n)]

    def bulk_pop_limit(self, limit, k: int):
        self._require(IDLE, "bulk_pop_limit")
        cap = self._enc(limit)
        out = []
        while len(out) < k and self.heap and self.heap[0] < cap:
            out.append(self._dec(heapq.heappop(self.heap)))
        return out, bool(self.heap and self.heap[0] < cap)

    def bulk_push_begin(self, estimate: int = 0) -> _OracleSession:
        self._require(IDLE, "bulk_push_begin")
        self.phase = BULK
        self.session = _OracleSession(self)
        return self.session

    def bulk_push(self, thread, key, payload=None):
        self._require(BULK, "bulk_push")
        self.session.push(thread, key)

    def bulk_push_many(self, thread, keys, payloads=None):
        self._require(BULK, "bulk_push")
        self.session.push_many(thread, keys)

    def bulk_push_end(self):
        self._require(BULK, "bulk_push_end")
        self.session.end()
        self.session = None

    def _append(self, thread, key):
        if not 0 <= thread < self.p:
            raise ContractError(f"thread index {thread} outside [0, {self.p})")
        self.pending.append(self._enc(key))

    def _append_many(self, thread, keys: np.ndarray):
        if not 0 <= thread < self.p:
            raise ContractError(f"thread index {thread} outside [0, {self.p})")
        keys = keys.astype(np.uint64)
        self.pending.extend((~keys if self.reverse else keys).tolist())

    def _flush_pending(self):
        if len(self.pending) > len(self.heap):
            self.heap.extend(self.pending)
            heapq.heapify(self.heap)
        else:
            for k in self.pending:
                heapq.heappush(self.heap, k)
        self.pending = []

    def limit_begin(self, limit, bulk_size: int = 1 << 14):
        self._require(IDLE, "limit_begin")
        if bulk_size < 1:
            raise ContractError("bulk_size must be >= 1")
        self.limit = self._enc(limit)
        self.phase = LIMIT

    def _limit_min(self):
        best = self.heap[0] if self.heap else None
        if self.pending:
            m = min(self.pending)
            if best is None or m < best:
                return m, True
        if best is None:
            raise EmptyQueueError("priority queue is empty")
        return best, False

    def limit_top(self) -> int:
        self._require(LIMIT, "limit_top")
        return self._dec(self._limit_min()[0])

    def limit_pop(self) -> int:
        self._require(LIMIT, "limit_pop")
        k, pending = self._limit_min()
        if pending:
            self.pending.remove(k)
        else:
            heapq.heappop(self.heap)
        return self._dec(k)

    def limit_push(self, key, payload=None, thread: int = 0):
        self._require(LIMIT, "limit_push")
        k = self._enc(key)
        if k < self.limit:
            raise ContractError(f"limit_push of {key} below the session limit")
        self._append(thread, key)

    def limit_end(self):
        self._require(LIMIT, "limit_end")
        self._flush_pending()
        self.phase = IDLE

    def close(self):
        pass


# -- scripts -------------------------------------------------------------------


class Op(NamedTuple):
    name: str
    args: tuple = ()


def _keys(result) -> tuple:
    if isinstance(result, np.ndarray):
        if result.dtype.names:
            result = result["key"]
        return tuple(result.tolist())
    return tuple(int(x) for x in result)


def apply_op(queue, op: Op):
    """Run one op; the result is a plain, comparable value."""
    name, args = op
    try:
        if name in ("top", "pop", "limit_top", "limit_pop"):
            r = getattr(queue, name)()
            return int(r[0]) if isinstance(r, tuple) else int(r)
        if name == "bulk_pop":
            return _keys(queue.bulk_pop(*args))
        if name == "bulk_pop_limit":
            keys, more = queue.bulk_pop_limit(*args)
            return _keys(keys), bool(more)
        if name == "size":
            return queue.size()
        if name == "limit_push":
            key, thread = args
            queue.limit_push(key, thread=thread)
            return None
        if name == "bulk_push_many":
            thread, keys = args
            queue.bulk_push_many(thread, np.asarray(keys, dtype=np.uint64))
            return None
        getattr(queue, name)(*args)
        return None
    except BulkPQError as e:
        return ("error", type(e).__name__)


def replay_script(queue, ops, concurrent: bool = False) -> list:
    """Apply `ops` to `queue` and return the transcript (one entry per op).

    With `concurrent`, the pushes of every bulk session are grouped by thread
    index and issued from real threads; their transcript entries are None.
    """
    out: list = []
    i = 0
    while i < len(ops):
        op = ops[i]
        if concurrent and op.name == "bulk_push_begin":
            j = i + 1
            while j < len(ops) and ops[j].name in ("bulk_push", "bulk_push_many"):
                j += 1
            out.append(apply_op(queue, op))
            if out[-1] is None:
                _concurrent_pushes(queue, ops[i + 1:j])
                out.extend([None] * (j - i - 1))
                i = j
                continue
        else:
            out.append(apply_op(queue, op))
        i += 1
    return out


def _concurrent_pushes(queue, ops) -> None:
    by_thread: dict = {}
    for op in ops:
        by_thread.setdefault(op.args[0], []).append(op)
    errors = []

    def work(batch):
        try:
            for op in batch:
                apply_op(queue, op)
        except Exception as e:  # pragma: no cover - surfaced below
            errors.append(e)

    threads = [threading.Thread(target=work, args=(b,)) for b in by_thread.values()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def first_divergence(a: list, b: list):
    """Index of the first differing transcript entry, or None."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


# Per profile: weights for idle-phase actions and typical batch sizes.
_WEIGHTS = {
    "mixed": dict(push=30, pop=20, top=8, size=3, bulk_pop=6, bulk_pop_limit=5, bulk=6, limit=4, empty_pop=1),
    "bulk-heavy": dict(push=5, pop=4, top=2, size=2, bulk_pop=20, bulk_pop_limit=10, bulk=25, limit=3, empty_pop=1),
    "limit-heavy": dict(push=8, pop=4, top=2, size=2, bulk_pop=3, bulk_pop_limit=8, bulk=6, limit=25, empty_pop=1),
    "flush-forcing": dict(push=10, pop=4, top=2, size=1, bulk_pop=8, bulk_pop_limit=4, bulk=20, limit=3),
}


class _Generator:
    def __init__(self, seed, length, profile, num_threads, direction, big_batch, flood):
        self.flood = flood
        self.rng = random.Random(seed)
        self.length = length
        self.profile = profile
        self.p = num_threads
        self.big = big_batch
        self.model = OracleQueue(num_threads, direction)
        self.reverse = direction == MAX_FIRST
        self.ops: list[Op] = []
        self.key_bits = self.rng.choice([6, 16, 32, 64])

    def key(self) -> int:
        return self.rng.getrandbits(self.key_bits)

    def keys(self, n: int) -> np.ndarray:
        gen = np.random.default_rng(self.rng.getrandbits(64))
        if self.key_bits == 64:
            return gen.integers(0, MAX_KEY, n, dtype=np.uint64, endpoint=True)
        return gen.integers(0, 1 << self.key_bits, n, dtype=np.uint64)

    def emit(self, name, *args):
        op = Op(name, tuple(args))
        apply_op(self.model, op)
        self.ops.append(op)

    def batch(self, big: bool = False) -> int:
        if big and self.profile == "flush-forcing":
            return self.rng.randint(self.big // 4, self.big)
        return int(self.rng.choice([1, 4, 30, 200, 1000, 5000]) * self.rng.uniform(0.5, 1.5)) + 1

    def run(self) -> list[Op]:
        weights = _WEIGHTS[self.profile]
        actions, w = zip(*weights.items())
        if self.profile == "flush-forcing":
            # Front-load enough items to overflow the budget at least once.
            self.emit("bulk_push_begin", self.flood)
            for i in range(8):
                self.emit("bulk_push_many", i % self.p, self.keys(self.flood // 8))
            self.emit("bulk_push_end")
        while len(self.ops) < self.length:
            getattr(self, "do_" + self.rng.choices(actions, w)[0])()
        return self.ops

    def do_push(self):
        self.emit("push", self.key())

    def do_pop(self):
        if self.model.size():
            self.emit("pop")

    def do_empty_pop(self):
        if not self.model.size():
            self.emit(self.rng.choice(["pop", "top"]))

    def do_top(self):
        if self.model.size():
            self.emit("top")

    def do_size(self):
        self.emit("size")

    def do_bulk_pop(self):
        self.emit("bulk_pop", self.batch())

    def do_bulk_pop_limit(self):
        self.emit("bulk_pop_limit", self.key(), self.batch())

    def do_bulk(self):
        self.emit("bulk_push_begin", self.rng.choice([0, self.batch(), 1 << 20]))
        for _ in range(self.rng.randint(1, 8)):
            t = self.rng.randrange(self.p)
            if self.rng.random() < 0.5:
                self.emit("bulk_push", t, self.key())
            else:
                self.emit("bulk_push_many", t, self.keys(self.batch(True)))
        self.emit("bulk_push_end")

    def do_limit(self):
        # Time-forward style: the limit steps upward, items below it are
        # popped and each may spawn successors at or above the limit.
        model = self.model
        if model.size():
            base = model._dec(model.heap[0]) if model.heap else self.key()
        else:
            base = self.key()
        span = 1 << max(1, self.key_bits - 4)
        if self.reverse:
            limit = max(0, base - self.rng.randrange(span))
        else:
            limit = min(MAX_KEY, base + self.rng.randrange(span))
        self.emit("limit_begin", limit, self.rng.choice([1, 7, 64, 4096]))
        budget = self.rng.randint(1, 2000)
        while budget > 0 and len(self.ops) < self.length + 4000:
            budget -= 1
            if not model.size():
                break
            self.emit("limit_top")
            if model._limit_min()[0] >= model.limit:
                break
            self.emit("limit_pop")
            for _ in range(self.rng.choice([0, 0, 1, 1, 2])):
                self.emit("limit_push", self._at_least(limit), self.rng.randrange(self.p))
        self.emit("limit_end")

    def _at_least(self, limit) -> int:
        step = self.rng.getrandbits(min(self.key_bits, 20))
        return max(0, limit - step) if self.reverse else min(MAX_KEY, limit + step)


def generate_op_script(seed: int, length: int, profile: str = "mixed", num_threads: int = 4,
                       order_direction: str = MIN_FIRST, big_batch: int = 1 << 16,
                       flood_items: int = 5 << 18) -> list[Op]:
    """Deterministic, precondition-respecting random op sequence.

    `big_batch` bounds the bulk-push size of the flush-forcing profile, which
    also starts with one session of `flood_items` pushes (by default more
    8-byte items than fit into an 8 MiB budget).
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    return _Generator(seed, length, profile, num_threads, order_direction, big_batch, flood_items).run()


def dump_script(ops, header: str = "") -> str:
    lines = [f"# {header}"] if header else []
    for name, args in ops:
        parts = [name]
        for a in args:
            if isinstance(a, (tuple, list, np.ndarray)):
                parts.append(",".join(map(str, np.asarray(a).tolist())))
            else:
                parts.append(str(a))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_script(text: str) -> list[Op]:
    ops = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, *rest = line.split(" ")
        if name == "bulk_push_many":
            keys = np.array([int(x) for x in rest[1].split(",")] if len(rest) > 1 and rest[1] else [],
                            dtype=np.uint64)
            ops.append(Op(name, (int(rest[0]), keys)))
        else:
            ops.append(Op(name, tuple(int(x) for x in rest)))
    return ops
