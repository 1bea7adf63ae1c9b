"""Multiway merging of sorted runs.

Two engines live here. :class:`TournamentTree` is the sequential k-way
selector used for single-item pops and block prediction. The parallel path
splits k sorted runs into p range-disjoint, size-balanced parts with
multisequence selection and merges each part independently, so the parts can
run on a worker pool and the output is identical for every p.

Ties between equal keys are always broken by the lower sequence index, which
makes every merge here stable and deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import MAX_KEY, SENTINEL, EmptyQueueError, keys_of

# Parts smaller than this are not worth a separate selection and task.
MIN_PART_ITEMS = 1 << 12


class TournamentTree:
    """Winner tree over `k` leaf keys (Python ints, ``SENTINEL`` = exhausted).

    Any leaf may change; :meth:`update` replays its root path with exactly
    ``ceil(log2 k)`` comparisons, all of which are tallied in
    :attr:`comparisons`.
    """

    __slots__ = ("k", "size", "keys", "nodes", "comparisons")

    def __init__(self, keys: Sequence[int]):
        self.k = len(keys)
        size = 1
        while size < self.k:
            size *= 2
        self.size = size
        self.keys = list(keys) + [SENTINEL] * (size - self.k)
        self.nodes = [0] * size + list(range(size))
        self.comparisons = 0
        for node in range(size - 1, 0, -1):
            self.nodes[node] = self._play(self.nodes[2 * node], self.nodes[2 * node + 1])

    def _play(self, a: int, b: int) -> int:
        self.comparisons += 1
        keys = self.keys
        return b if keys[b] < keys[a] else a

    @property
    def winner(self) -> int:
        return self.nodes[1] if self.size > 1 else 0

    @property
    def winner_key(self) -> int:
        if self.k == 0:
            return SENTINEL
        return self.keys[self.winner]

    def __len__(self) -> int:
        return self.k

    def update(self, leaf: int, key: int) -> None:
        self.keys[leaf] = key
        nodes = self.nodes
        keys = self.keys
        node = (leaf + self.size) >> 1
        while node:
            a = nodes[2 * node]
            b = nodes[2 * node + 1]
            self.comparisons += 1
            nodes[node] = b if keys[b] < keys[a] else a
            node >>= 1

    def copy(self) -> "TournamentTree":
        clone = TournamentTree.__new__(TournamentTree)
        clone.k = self.k
        clone.size = self.size
        clone.keys = list(self.keys)
        clone.nodes = list(self.nodes)
        clone.comparisons = 0
        return clone


class SequenceMerger:
    """Sequential k-way merge driven by a :class:`TournamentTree`.

    Sequence elements are keys or tuples whose first field is the key.
    """

    def __init__(self, sequences):
        self.sequences = [list(s) for s in sequences]
        if not self.sequences:
            raise ValueError("need at least one sequence")
        self.positions = [0] * len(self.sequences)
        self.tree = TournamentTree([self._head(i) for i in range(len(self.sequences))])

    def _head(self, i: int) -> int:
        seq = self.sequences[i]
        pos = self.positions[i]
        if pos >= len(seq):
            return SENTINEL
        item = seq[pos]
        # Items may be bare keys or (key, ...) records such as core.Item.
        return int(item[0]) if isinstance(item, tuple) else int(item)

    def peek(self):
        i = self.tree.winner
        if self.tree.winner_key == SENTINEL:
            raise EmptyQueueError("all sequences are exhausted")
        return self.sequences[i][self.positions[i]]

    def pop(self):
        i = self.tree.winner
        if self.tree.winner_key == SENTINEL:
            raise EmptyQueueError("all sequences are exhausted")
        item = self.sequences[i][self.positions[i]]
        self.positions[i] += 1
        self.tree.update(i, self._head(i))
        return item

    def __iter__(self):
        while self.tree.winner_key != SENTINEL:
            yield self.pop()


def tree_build(heads) -> SequenceMerger:
    return SequenceMerger(heads)


def tree_pop_and_replay(merger: SequenceMerger):
    return merger.pop()


@dataclass
class SequenceSlice:
    """A sorted window ``data[begin:end]``; merging advances `begin`."""

    data: np.ndarray
    begin: int = 0
    end: int | None = None
    source: int = 0

    def __post_init__(self):
        if self.end is None:
            self.end = len(self.data)
        if not 0 <= self.begin <= self.end <= len(self.data):
            raise ValueError(f"bad slice [{self.begin}, {self.end}) of {len(self.data)} items")

    def __len__(self) -> int:
        return self.end - self.begin

    def items(self) -> np.ndarray:
        return self.data[self.begin:self.end]

    def keys(self) -> np.ndarray:
        return keys_of(self.data)[self.begin:self.end]


@dataclass
class SelectionResult:
    """Cut positions (absolute indices into each slice's data).

    ``splits[i][j]`` is where part ``i`` starts in sequence ``j``; there are
    ``parts + 1`` rows, the last one being the overall end cut.
    """

    splits: list
    sizes: list

    @property
    def parts(self) -> int:
        return len(self.sizes)


def _as_slices(slices) -> list[SequenceSlice]:
    out = []
    for i, s in enumerate(slices):
        if not isinstance(s, SequenceSlice):
            s = SequenceSlice(np.asarray(s), source=i)
        out.append(s)
    return out


def _key_views(slices):
    return [s.keys() for s in slices]


def multisequence_select(slices, rank: int) -> list[int]:
    """Per-sequence cut positions whose prefixes hold exactly `rank` items.

    Every item left of the cuts is <= every item right of them. Among equal
    keys, lower sequence indices are taken first. Only the first `rank`
    items of each sequence can matter, so the splitter key is found with a
    linear-time selection over those prefixes; cuts then follow by binary
    search.
    """
    slices = _as_slices(slices)
    views = _key_views(slices)
    total = sum(len(v) for v in views)
    if not 0 <= rank <= total:
        raise ValueError(f"rank {rank} outside [0, {total}]")
    if rank == 0:
        return [s.begin for s in slices]
    if rank == total:
        return [s.end for s in slices]
    pool = np.concatenate([v[:rank] for v in views])
    x = np.partition(pool, rank - 1)[rank - 1]
    lt = [int(np.searchsorted(v, x, "left")) for v in views]
    need = rank - sum(lt)
    cuts = []
    for s, v, below in zip(slices, views, lt):
        equal = int(np.searchsorted(v, x, "right")) - below
        take = min(equal, need)
        need -= take
        cuts.append(s.begin + below + take)
    return cuts


def partition_for_parallel_merge(slices, total: int, p: int) -> SelectionResult:
    """Split the first `total` items into `p` parts at ranks floor(i*total/p)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    slices = _as_slices(slices)
    available = sum(len(s) for s in slices)
    if not 0 <= total <= available:
        raise ValueError(f"total {total} outside [0, {available}]")
    ranks = [i * total // p for i in range(p + 1)]
    splits = [multisequence_select(slices, r) for r in ranks]
    return SelectionResult(splits, [ranks[i + 1] - ranks[i] for i in range(p)])


def merge_sorted_runs(runs, out: np.ndarray | None = None) -> np.ndarray:
    """Stable k-way merge of sorted arrays, lower run index first on ties.

    Concatenates the runs and lets numpy's stable sort (timsort for 64-bit
    keys) detect and merge them, i.e. O(n log k) work outside the GIL.
    """
    runs = list(runs)
    dtype = runs[0].dtype if runs else np.dtype(np.uint64)
    runs = [r for r in runs if len(r)]
    if not runs:
        merged = np.empty(0, dtype=dtype)
    elif len(runs) == 1:
        merged = runs[0]
    else:
        cat = np.concatenate(runs)
        if cat.dtype.names is None:
            merged = np.sort(cat, kind="stable")
        else:
            merged = cat[np.argsort(cat["key"], kind="stable")]
    if out is not None:
        out[:] = merged
        return out
    return merged.copy() if len(runs) == 1 else merged


def tournament_merge(runs) -> list:
    """Reference k-way merge through :class:`SequenceMerger` (pure Python)."""
    runs = [list(r) for r in runs]
    if not runs:
        return []
    return list(SequenceMerger(runs))


def parallel_multiway_merge(slices, max_items: int | None = None, value_limit: int | None = None,
                            p: int = 1, executor=None, min_part: int = MIN_PART_ITEMS) -> np.ndarray:
    """Merge the smallest items of sorted `slices` into one sorted array.

    Only items with key strictly below `value_limit` are eligible, and at
    most `max_items` of them are produced. The output is computed as `p`
    independent parts of at least `min_part` items (submitted to `executor`
    when given); each slice's ``begin`` is advanced past what was consumed.
    """
    slices = _as_slices(slices)
    if not slices:
        return np.empty(0, dtype=np.uint64)
    dtype = slices[0].data.dtype
    if value_limit is not None and value_limit <= MAX_KEY:
        limit = np.uint64(max(value_limit, 0))
        bounded = []
        for s in slices:
            stop = s.begin + int(np.searchsorted(s.keys(), limit, "left")) if value_limit > 0 else s.begin
            bounded.append(SequenceSlice(s.data, s.begin, stop, s.source))
    else:
        bounded = [SequenceSlice(s.data, s.begin, s.end, s.source) for s in slices]
    eligible = sum(len(s) for s in bounded)
    take = eligible if max_items is None else min(max_items, eligible)
    out = np.empty(take, dtype=dtype)
    if take == 0:
        return out
    p = max(1, min(p, take // max(1, min_part)))
    if take == eligible:
        final = [s.end for s in bounded]
    else:
        final = multisequence_select(bounded, take)
    window = [SequenceSlice(s.data, s.begin, e, s.source) for s, e in zip(bounded, final)]
    sel = partition_for_parallel_merge(window, take, p) if p > 1 else SelectionResult(
        [[s.begin for s in window], final], [take])

    def run_part(i):
        lo, hi = sel.splits[i], sel.splits[i + 1]
        start = sum(sel.sizes[:i])
        pieces = [s.data[a:b] for s, a, b in zip(window, lo, hi)]
        merge_sorted_runs(pieces, out[start:start + sel.sizes[i]])

    if executor is not None and sel.parts > 1:
        for f in [executor.submit(run_part, i) for i in range(sel.parts)]:
            f.result()
    else:
        for i in range(sel.parts):
            run_part(i)
    for s, e in zip(slices, final):
        s.begin = e
    return out
