"""Benchmark harness: queue workloads and the multiway-merge microbenchmark.

Every run checks its output (sortedness, exact sequences or conservation)
before a row is reported.

    bench --experiment push-rand-pop --log2-n 20 --out results.csv
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import MiB, Config, parse_size
from .merge import SequenceSlice, parallel_multiway_merge
from .ppq import ParallelPriorityQueue

log = logging.getLogger(__name__)

EXPERIMENTS = ("push-rand-pop", "push-asc-pop", "asc-rbulk-rewrite", "bulk-rewrite", "merge-micro")
HEADER = ["experiment", "n", "v", "item_size", "threads", "mem_budget", "block_size", "seconds",
          "mitems_per_s", "mib_per_s", "blocks_read", "blocks_written", "hints_issued", "hints_canceled"]


class BenchmarkError(AssertionError):
    """A workload produced wrong results."""


@dataclass
class ExperimentSpec:
    name: str
    n: int
    v: int = 1 << 14
    item_size: int = 8
    seed: int = 1
    config: Config = field(default_factory=Config)
    seq_bytes: int = 2 * MiB
    repetitions: int = 15

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}")
        if self.n < 1 or self.v < 1:
            raise ValueError("n and v must be >= 1")
        if self.config.item_size != self.item_size:
            self.config = self.config.replace(item_size=self.item_size)


@dataclass
class ResultRow:
    experiment: str
    n: int
    v: int
    item_size: int
    threads: int
    mem_budget: int
    block_size: int
    seconds: float
    counters: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def mitems_per_s(self) -> float:
        return self.n / self.seconds / 1e6 if self.seconds > 0 else float("inf")

    @property
    def mib_per_s(self) -> float:
        # Each item is written once and read once.
        return 2 * self.n * self.item_size / MiB / self.seconds if self.seconds > 0 else float("inf")

    @property
    def ns_per_item(self) -> float:
        return self.seconds / self.n * 1e9

    def as_csv(self) -> list:
        c = self.counters
        return [self.experiment, self.n, self.v, self.item_size, self.threads, self.mem_budget,
                self.block_size, f"{self.seconds:.6f}", f"{self.mitems_per_s:.4f}", f"{self.mib_per_s:.4f}",
                c.get("blocks_read", 0), c.get("blocks_written", 0), c.get("hints_issued", 0),
                c.get("hints_canceled", 0)]


def _row(spec: ExperimentSpec, seconds: float, counters=None, **extra) -> ResultRow:
    c = spec.config
    return ResultRow(spec.name, spec.n, spec.v, spec.item_size, c.num_threads, c.mem_budget,
                     c.block_size, seconds, dict(counters or {}), extra)


# -- workload helpers -----------------------------------------------------------


def _bulk_push(pq: ParallelPriorityQueue, keys: np.ndarray, pool: ThreadPoolExecutor | None) -> None:
    p = pq.p
    with pq.bulk_push_begin(len(keys)) as session:
        parts = np.array_split(keys, p)
        if pool is None or p == 1:
            for t, part in enumerate(parts):
                session.push_many(t, part)
        else:
            for f in [pool.submit(session.push_many, t, part) for t, part in enumerate(parts)]:
                f.result()


def _pop_all(pq: ParallelPriorityQueue, n: int, chunk: int):
    """Pop `n` items in bulks of `chunk`, yielding the key arrays."""
    left = n
    while left:
        got = pq.bulk_pop(min(chunk, left))
        if not len(got):
            raise BenchmarkError(f"queue ran dry with {left} items still expected")
        left -= len(got)
        yield got["key"] if got.dtype.names else got


def _queue(spec: ExperimentSpec) -> ParallelPriorityQueue:
    return ParallelPriorityQueue(spec.config)


def _workers(spec: ExperimentSpec):
    p = spec.config.num_threads
    return ThreadPoolExecutor(p, thread_name_prefix="bench") if p > 1 else None


# -- experiments ------------------------------------------------------------------


def run_push_rand_pop(spec: ExperimentSpec) -> ResultRow:
    rng = np.random.default_rng(spec.seed)
    keys = rng.integers(0, np.iinfo(np.uint64).max, spec.n, dtype=np.uint64, endpoint=True)
    pool = _workers(spec)
    with _queue(spec) as pq:
        t0 = time.perf_counter()
        for i in range(0, spec.n, spec.v):
            _bulk_push(pq, keys[i:i + spec.v], pool)
        last = 0
        popped = 0
        for got in _pop_all(pq, spec.n, spec.v):
            if got[0] < last or np.any(got[1:] < got[:-1]):
                raise BenchmarkError(f"pop order violated near item {popped}")
            last = got[-1]
            popped += len(got)
        seconds = time.perf_counter() - t0
        counters = pq.stats()
    if pool:
        pool.shutdown()
    return _row(spec, seconds, counters)


def run_push_asc_pop(spec: ExperimentSpec) -> ResultRow:
    keys = np.arange(spec.n, dtype=np.uint64)
    pool = _workers(spec)
    with _queue(spec) as pq:
        t0 = time.perf_counter()
        for i in range(0, spec.n, spec.v):
            _bulk_push(pq, keys[i:i + spec.v], pool)
        expect = 0
        for got in _pop_all(pq, spec.n, spec.v):
            if not np.array_equal(got, np.arange(expect, expect + len(got), dtype=np.uint64)):
                bad = int(np.flatnonzero(got != np.arange(expect, expect + len(got), dtype=np.uint64))[0])
                raise BenchmarkError(f"popped {got[bad]} at index {expect + bad}")
            expect += len(got)
        seconds = time.perf_counter() - t0
        counters = pq.stats()
    if pool:
        pool.shutdown()
    return _row(spec, seconds, counters)


def cycle_sizes(spec: ExperimentSpec, randomized: bool) -> list[int]:
    """Bulk sizes of the rewrite cycles; they sum to exactly n."""
    rng = np.random.default_rng(spec.seed)
    sizes, total = [], 0
    while total < spec.n:
        v = int(rng.integers(0, spec.v, endpoint=True)) if randomized else spec.v
        v = min(v, spec.n - total)
        sizes.append(v)
        total += v
    return sizes


def _rewrite(spec: ExperimentSpec, randomized: bool) -> ResultRow:
    pool = _workers(spec)
    sizes = cycle_sizes(spec, randomized)
    with _queue(spec) as pq:
        fill = np.arange(spec.n, dtype=np.uint64)
        for i in range(0, spec.n, max(spec.v, 1 << 16)):
            _bulk_push(pq, fill[i:i + max(spec.v, 1 << 16)], pool)
        next_key = spec.n
        last = 0
        t0 = time.perf_counter()
        for v in sizes:
            got = pq.bulk_pop(v)
            keys = got["key"] if got.dtype.names else got
            if len(keys) != v:
                raise BenchmarkError(f"bulk_pop({v}) returned {len(keys)} items")
            if v and (keys[0] < last or np.any(keys[1:] < keys[:-1])):
                raise BenchmarkError("bulk_pop output out of order")
            if v and keys[-1] >= next_key:
                raise BenchmarkError("popped an item pushed in the same cycle")
            last = keys[-1] if v else last
            _bulk_push(pq, np.arange(next_key, next_key + v, dtype=np.uint64), pool)
            next_key += v
        seconds = time.perf_counter() - t0
        if pq.size() != spec.n:
            raise BenchmarkError(f"conservation: size {pq.size()} after rewrite, expected {spec.n}")
        counters = pq.stats()
    if pool:
        pool.shutdown()
    return _row(spec, seconds, counters, cycles=len(sizes))


def run_asc_rbulk_rewrite(spec: ExperimentSpec) -> ResultRow:
    return _rewrite(spec, randomized=True)


def run_bulk_rewrite(spec: ExperimentSpec) -> ResultRow:
    return _rewrite(spec, randomized=False)


def run_merge_micro(spec: ExperimentSpec) -> ResultRow:
    """Merge `v` sorted sequences of `seq_bytes` each; time is the median
    over the repetitions."""
    rng = np.random.default_rng(spec.seed)
    per_seq = max(1, spec.seq_bytes // spec.item_size)
    dtype = spec.config.dtype
    seqs = []
    for _ in range(spec.v):
        arr = np.zeros(per_seq, dtype=dtype)
        keys = np.sort(rng.integers(0, np.iinfo(np.uint64).max, per_seq, dtype=np.uint64, endpoint=True))
        if dtype.names:
            arr["key"] = keys
        else:
            arr[:] = keys
        seqs.append(arr)
    p = spec.config.num_threads
    pool = ThreadPoolExecutor(p) if p > 1 else None
    times = []
    out = None
    for _ in range(max(15, spec.repetitions)):
        slices = [SequenceSlice(s) for s in seqs]
        t0 = time.perf_counter()
        out = parallel_multiway_merge(slices, p=p, executor=pool)
        times.append(time.perf_counter() - t0)
    if pool:
        pool.shutdown()
    keys = out["key"] if dtype.names else out
    if len(keys) != per_seq * spec.v or np.any(keys[1:] < keys[:-1]):
        raise BenchmarkError("merge output is not the sorted union of its inputs")
    spec = ExperimentSpec(spec.name, per_seq * spec.v, spec.v, spec.item_size, spec.seed, spec.config,
                          spec.seq_bytes, spec.repetitions)
    return _row(spec, statistics.median(times), repetitions=len(times))


RUNNERS = {
    "push-rand-pop": run_push_rand_pop,
    "push-asc-pop": run_push_asc_pop,
    "asc-rbulk-rewrite": run_asc_rbulk_rewrite,
    "bulk-rewrite": run_bulk_rewrite,
    "merge-micro": run_merge_micro,
}


def run_experiment(spec: ExperimentSpec) -> ResultRow:
    return RUNNERS[spec.name](spec)


def emit_results(rows, path) -> None:
    """Append rows to a CSV file, writing the header only for a new file."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(HEADER)
        for row in rows:
            w.writerow(row.as_csv())


# -- CLI ---------------------------------------------------------------------------


def parse_sweep(text: str) -> list[int]:
    """``lo:hi:factor`` -> geometric series lo, lo*factor, ... <= hi."""
    try:
        lo, hi, factor = (int(parse_size(x)) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sweep {text!r}, expected lo:hi:factor") from None
    if lo < 1 or hi < lo or factor < 2:
        raise argparse.ArgumentTypeError("sweep needs 1 <= lo <= hi and factor >= 2")
    out = []
    while lo <= hi:
        out.append(lo)
        lo *= factor
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description=__doc__.splitlines()[0])
    ap.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    ap.add_argument("--log2-n", type=int, default=20)
    ap.add_argument("--bulk-size", type=parse_size, default=1 << 14,
                    help="bulk size v (upper bound for asc-rbulk-rewrite, sequence count for merge-micro)")
    ap.add_argument("--item-size", type=int, choices=(8, 24), default=8)
    ap.add_argument("--mem-budget", type=parse_size, default=64 * MiB)
    ap.add_argument("--block-size", type=parse_size, default=1 * MiB)
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--dirs", default="", help="comma-separated backing directories or files")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="bench.csv")
    ap.add_argument("--sweep", type=parse_sweep, help="run once per v in lo:hi:factor")
    ap.add_argument("--pin-threads", action="store_true", help="restrict the process to the first --threads CPUs")
    ap.add_argument("--seq-bytes", type=parse_size, default=2 * MiB, help="merge-micro sequence size")
    ap.add_argument("--repetitions", type=int, default=15)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def pin_threads(n: int) -> None:
    if hasattr(os, "sched_setaffinity"):
        cpus = sorted(os.sched_getaffinity(0))[:n]
        os.sched_setaffinity(0, cpus)
    else:  # pragma: no cover - non-Linux
        log.warning("thread pinning is not supported on this platform")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.pin_threads:
        pin_threads(args.threads)
    paths = tuple(p for p in args.dirs.split(",") if p)
    config = Config(num_threads=args.threads, mem_budget=args.mem_budget, block_size=args.block_size,
                    backing_paths=paths, item_size=args.item_size)
    rows = []
    for v in args.sweep or [args.bulk_size]:
        spec = ExperimentSpec(args.experiment, 1 << args.log2_n, v, args.item_size, args.seed, config,
                              args.seq_bytes, args.repetitions)
        try:
            row = run_experiment(spec)
        except BenchmarkError as e:
            print(f"bench: {spec.name} n={spec.n} v={v} FAILED: {e}", file=sys.stderr)
            return 1
        rows.append(row)
        print(f"{row.experiment} n={row.n} v={row.v}: {row.seconds:.3f} s, "
              f"{row.mitems_per_s:.3f} M items/s, {row.mib_per_s:.1f} MiB/s, "
              f"blocks written {row.counters.get('blocks_written', 0)}")
    emit_results(rows, args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
