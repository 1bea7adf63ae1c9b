"""External arrays, block prediction, and the extract buffer.

Every external array is a list of blocks whose first item (the block
minimum) stays in RAM. A block moves through four states, always laid out
along the array as ``Finished* Loaded* Hinted* External*``::

    External -> Hinted -> Loaded -> Finished      (Hinted -> External on cancel)

Two tournament trees run over the per-array block-minima sequences. The
load tree holds each array's first block not yet in RAM; its winner is the
merge limit, the smallest item that may still be on disk. The hint tree
holds each array's next block not yet prefetched; popping it yields the
prediction sequence.

Items equal to the merge limit are ordered by (key, array index, position).
Only items strictly before the limit in that order are extracted, which
keeps extraction stable and always makes progress on duplicate keys.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .block_store import CANCELED, BlockId, BlockStore, PendingIo
from .core import MAX_KEY, SENTINEL, BulkPQError, Config, Counters, keys_of
from .merge import SequenceSlice, TournamentTree, parallel_multiway_merge

log = logging.getLogger(__name__)

EXTERNAL = "External"
HINTED = "Hinted"
LOADED = "Loaded"
FINISHED = "Finished"

LEGAL_TRANSITIONS = {
    (EXTERNAL, HINTED),
    (HINTED, LOADED),
    (LOADED, FINISHED),
    (HINTED, EXTERNAL),
}


class BlockStateError(BulkPQError, RuntimeError):
    pass


@dataclass(eq=False)
class BlockDescriptor:
    id: BlockId
    minimum: int
    count: int
    state: str = EXTERNAL
    pending: PendingIo | None = None
    history: list | None = None

    def transition(self, new: str) -> None:
        if (self.state, new) not in LEGAL_TRANSITIONS:
            raise BlockStateError(f"illegal block transition {self.state} -> {new} for {self.id}")
        self.state = new
        if self.history is not None:
            self.history.append(new)


class ExternalArray:
    """A sorted run on disk plus the RAM buffer of its loaded blocks."""

    def __init__(self, blocks: list[BlockDescriptor], level: int, dtype: np.dtype):
        self.blocks = blocks
        self.level = level
        self.dtype = dtype
        self.fin_end = 0
        self.load_end = 0
        self.hint_end = 0
        self.buf = np.empty(0, dtype=dtype)
        self.buf_pos = 0
        # Offsets in `buf` where each loaded, unfinished block ends.
        self.block_ends: deque = deque()
        self.total = sum(b.count for b in blocks)
        self.remaining = self.total

    def __len__(self) -> int:
        return self.remaining

    def __repr__(self):
        return (f"ExternalArray(level={self.level}, blocks={len(self.blocks)}, "
                f"remaining={self.remaining}, fin/load/hint={self.fin_end}/{self.load_end}/{self.hint_end})")

    @property
    def loaded_count(self) -> int:
        return self.load_end - self.fin_end

    @property
    def hinted_count(self) -> int:
        return self.hint_end - self.load_end

    def buffered(self) -> int:
        return len(self.buf) - self.buf_pos

    def _key_at(self, index: int) -> int:
        return self.blocks[index].minimum if index < len(self.blocks) else SENTINEL

    def hint_key(self) -> int:
        return self._key_at(self.hint_end)

    def load_key(self) -> int:
        return self._key_at(self.load_end)

    def head_key(self) -> int:
        if self.buf_pos < len(self.buf):
            return int(keys_of(self.buf)[self.buf_pos])
        return self.load_key()

    def buffered_keys(self) -> np.ndarray:
        return keys_of(self.buf)[self.buf_pos:]

    def states(self) -> list[str]:
        return [b.state for b in self.blocks]

    def accept_block(self, data) -> None:
        """Move the first Hinted block to Loaded, appending its items to `buf`."""
        block = self.blocks[self.load_end]
        items = np.frombuffer(data, dtype=self.dtype, count=block.count)
        first = int(keys_of(items)[0])
        if first != block.minimum:
            raise BlockStateError(f"block {block.id} starts with {first}, expected minimum {block.minimum}")
        block.transition(LOADED)
        block.pending = None
        rest = self.buf[self.buf_pos:]
        shift = self.buf_pos
        self.buf = np.concatenate([rest, items]) if len(rest) else items
        self.block_ends = deque(e - shift for e in self.block_ends)
        self.block_ends.append(len(self.buf))
        self.buf_pos = 0
        self.load_end += 1

    def consume(self, n: int) -> list[BlockDescriptor]:
        """Advance past `n` buffered items; returns blocks that became Finished."""
        if n > self.buffered():
            raise BlockStateError("consuming more items than are loaded")
        self.buf_pos += n
        self.remaining -= n
        done = []
        while self.block_ends and self.block_ends[0] <= self.buf_pos:
            self.block_ends.popleft()
            block = self.blocks[self.fin_end]
            block.transition(FINISHED)
            self.fin_end += 1
            done.append(block)
        if not self.block_ends:
            self.buf = self.buf[:0]
            self.buf_pos = 0
        return done


class PrefetchSequence:
    """Dynamic block prediction and merge limit over a set of external arrays.

    The read-buffer pool holds ``read_buffer_bytes_per_array * len(arrays)``
    bytes; Loaded plus Hinted blocks never exceed it except for an explicit
    demand load (counted in ``overcommits``) when a shrinking pool leaves no
    room for the block the merge is waiting on.
    """

    def __init__(self, store: BlockStore, config: Config, counters: Counters,
                 executor=None, check: bool = False):
        self.store = store
        self.config = config
        self.counters = counters
        self.executor = executor
        self.check = check
        self.arrays: list[ExternalArray] = []
        self.load_tree = TournamentTree([])
        self.hint_tree = TournamentTree([])
        self.suppressed = False
        self.tree_build_comparisons = 0
        self.overcommits = 0
        self.rebuild_log: list[tuple[int, int, int]] = []
        self.audit: list[tuple[int, int]] = []
        self.violations: list[str] = []

    # -- bookkeeping --------------------------------------------------------

    def pool_blocks(self) -> int:
        return self.config.read_buffer_bytes_per_array * len(self.arrays) // self.config.block_size

    def loaded_count(self) -> int:
        return sum(a.loaded_count for a in self.arrays)

    def hinted_count(self) -> int:
        return sum(a.hinted_count for a in self.arrays)

    def free_capacity(self) -> int:
        return self.pool_blocks() - self.loaded_count() - self.hinted_count()

    def item_count(self) -> int:
        return sum(a.remaining for a in self.arrays)

    def set_arrays(self, arrays: list[ExternalArray]) -> None:
        """Adopt a new array list; both trees are rebuilt from scratch and the
        hint set re-planned (unless prefetching is suppressed)."""
        self.arrays = list(arrays)
        self.load_tree = TournamentTree([a.load_key() for a in self.arrays])
        self.hint_tree = TournamentTree([a.hint_key() for a in self.arrays])
        self.tree_build_comparisons += self.load_tree.comparisons + self.hint_tree.comparisons
        if not self.suppressed:
            self.rebuild_hints()

    # -- prediction ---------------------------------------------------------

    def _issue(self, j: int) -> None:
        arr = self.arrays[j]
        block = arr.blocks[arr.hint_end]
        block.transition(HINTED)
        block.pending = self.store.read_block_async(block.id)
        arr.hint_end += 1
        self.counters.add("hints_issued")

    def _cancel_last(self, j: int) -> None:
        arr = self.arrays[j]
        block = arr.blocks[arr.hint_end - 1]
        self.store.cancel_read(block.pending)
        # A read that already finished is simply dropped; it is re-read later.
        block.pending = None
        block.transition(EXTERNAL)
        arr.hint_end -= 1

    def hint_next_block(self):
        """Prefetch the next block of the prediction sequence.

        Returns ``(array index, block index)`` or None if nothing is hintable
        or no read buffer is free.
        """
        if self.suppressed or self.free_capacity() <= 0:
            return None
        if self.hint_tree.winner_key == SENTINEL:
            return None
        j = self.hint_tree.winner
        b = self.arrays[j].hint_end
        self._issue(j)
        self.hint_tree.update(j, self.arrays[j].hint_key())
        return j, b

    def fill_hints(self) -> None:
        while self.hint_next_block() is not None:
            pass

    def rebuild_hints(self) -> None:
        """Re-plan prefetching after the array set changed.

        The hint tree is reset to the load tree (each array's first block not
        yet in RAM) and replayed until the k smallest block minima are known,
        k being the free read-buffer count. Per array, surplus hints are
        canceled and missing ones issued.
        """
        self.promote_completed()
        k = max(0, self.pool_blocks() - self.loaded_count())
        tree = self.load_tree.copy()
        target = [0] * len(self.arrays)
        for _ in range(k):
            if tree.winner_key == SENTINEL:
                break
            j = tree.winner
            target[j] += 1
            arr = self.arrays[j]
            tree.update(j, arr._key_at(arr.load_end + target[j]))
        self.counters.add("comparisons_in_replay", tree.comparisons)
        self.rebuild_log.append((k, len(self.arrays), tree.comparisons))
        for j, arr in enumerate(self.arrays):
            while arr.hinted_count > target[j]:
                self._cancel_last(j)
            while arr.hinted_count < target[j]:
                self._issue(j)
        self.hint_tree = tree
        if self.check:
            self._check_hint_optimality()

    def _check_hint_optimality(self) -> None:
        candidates = sorted((b.minimum, j, i) for j, a in enumerate(self.arrays)
                            for i in range(a.load_end, len(a.blocks)) for b in [a.blocks[i]])
        hinted = {(j, i) for j, a in enumerate(self.arrays) for i in range(a.load_end, a.hint_end)}
        best = {(j, i) for _, j, i in candidates[:len(hinted)]}
        if hinted != best:
            self.violations.append(f"hint set {sorted(hinted)} is not the {len(hinted)} smallest unloaded minima")

    def promote_completed(self) -> int:
        """Move finished prefetches to Loaded, in order within each array."""
        promoted = 0
        for j, arr in enumerate(self.arrays):
            moved = False
            while arr.load_end < arr.hint_end:
                block = arr.blocks[arr.load_end]
                if not block.pending.done():
                    break
                arr.accept_block(block.pending.wait())
                moved = True
                promoted += 1
            if moved:
                self.load_tree.update(j, arr.load_key())
        return promoted

    def compute_merge_limit(self) -> int:
        """Smallest key that may still reside on disk (``SENTINEL`` if none)."""
        self.promote_completed()
        return self.load_tree.winner_key

    def floor_key(self) -> int:
        """Smallest unconsumed key over all arrays, loaded or not."""
        return min((a.head_key() for a in self.arrays), default=SENTINEL)

    # -- extraction ---------------------------------------------------------

    def eligible_slices(self, cap: int | None = None) -> list[SequenceSlice]:
        """Per array, the loaded items strictly before the merge limit (and,
        with `cap`, with key strictly below `cap`)."""
        limit = self.compute_merge_limit()
        owner = self.load_tree.winner
        out = []
        for j, arr in enumerate(self.arrays):
            keys = arr.buffered_keys()
            if limit == SENTINEL or j == owner:
                end = len(keys)
            else:
                end = int(np.searchsorted(keys, np.uint64(limit), "right" if j < owner else "left"))
            if cap is not None and cap <= MAX_KEY and end:
                end = int(np.searchsorted(keys[:end], np.uint64(max(cap, 0)), "left"))
            out.append(SequenceSlice(arr.buf, arr.buf_pos, arr.buf_pos + end, j))
        return out

    def _load_limit_block(self) -> None:
        """Make the block holding the merge limit resident (blocking)."""
        j = self.load_tree.winner
        arr = self.arrays[j]
        block = arr.blocks[arr.load_end]
        if block.state == EXTERNAL:
            if self.free_capacity() <= 0:
                self.overcommits += 1
                log.debug("demand load of %s beyond the read-buffer pool", block.id)
            self._issue(j)
            self.hint_tree.update(j, arr.hint_key())
        block.pending.wait()
        self.promote_completed()

    def collect(self, max_items: int, cap: int | None = None) -> np.ndarray:
        """Extract up to `max_items` of the smallest external items (keys below
        `cap`, if given), waiting for reads only when nothing is eligible."""
        dtype = self.config.dtype
        if max_items <= 0:
            return np.empty(0, dtype=dtype)
        while True:
            slices = self.eligible_slices(cap)
            if any(len(s) for s in slices):
                begins = [s.begin for s in slices]
                if self.check:
                    unloaded_min = self._unloaded_minimum()
                out = parallel_multiway_merge(slices, max_items, p=self.config.num_threads,
                                              executor=self.executor)
                for arr, s, b0 in zip(self.arrays, slices, begins):
                    for block in arr.consume(s.begin - b0):
                        self.store.free_block(block.id)
                if self.check and len(out):
                    top = int(keys_of(out)[-1])
                    self.audit.append((top, unloaded_min))
                    if top > unloaded_min:
                        self.violations.append(f"extracted {top} while {unloaded_min} is still on disk")
                self.fill_hints()
                return out
            floor = self.floor_key()
            if floor == SENTINEL or (cap is not None and floor >= cap):
                return np.empty(0, dtype=dtype)
            self._load_limit_block()

    def _unloaded_minimum(self) -> int:
        return min((b.minimum for a in self.arrays for b in a.blocks[a.load_end:]), default=SENTINEL)

    def release(self, arrays) -> None:
        """Cancel every hint of `arrays` (before they leave this set)."""
        for arr in arrays:
            j = self.arrays.index(arr)
            while arr.hinted_count:
                self._cancel_last(j)


class ExtractBuffer:
    """Sorted run of items already taken out of the external arrays."""

    def __init__(self, dtype: np.dtype):
        self.dtype = dtype
        self.data = np.empty(0, dtype=dtype)
        self.pos = 0

    def __len__(self) -> int:
        return len(self.data) - self.pos

    def head_key(self) -> int:
        if self.pos >= len(self.data):
            return SENTINEL
        return int(keys_of(self.data)[self.pos])

    def remaining(self) -> np.ndarray:
        return self.data[self.pos:]

    def append(self, items: np.ndarray) -> None:
        if not len(items):
            return
        if len(self):
            self.data = np.concatenate([self.remaining(), items])
        else:
            self.data = items
        self.pos = 0

    def clear(self) -> None:
        self.data = self.data[:0]
        self.pos = 0


class RunWriter:
    """Streams sorted chunks into freshly allocated blocks.

    At most `max_in_flight` block writes are outstanding; each block buffer
    is owned by its write until that write completes.
    """

    def __init__(self, store: BlockStore, config: Config, max_in_flight: int, history: bool = False):
        self.store = store
        self.dtype = config.dtype
        self.block_size = config.block_size
        self.per_block = config.items_per_block
        self.max_in_flight = max_in_flight
        self.history = history
        self.blocks: list[BlockDescriptor] = []
        self.inflight: deque = deque()
        self._new_buffer()

    def _new_buffer(self) -> None:
        self.raw = np.zeros(self.block_size, dtype=np.uint8)
        self.cur = self.raw[:self.per_block * self.dtype.itemsize].view(self.dtype)
        self.fill = 0

    def add(self, chunk: np.ndarray) -> None:
        i = 0
        n = len(chunk)
        while i < n:
            room = self.per_block - self.fill
            step = min(room, n - i)
            self.cur[self.fill:self.fill + step] = chunk[i:i + step]
            self.fill += step
            i += step
            if self.fill == self.per_block:
                self._emit()

    def _emit(self) -> None:
        if not self.fill:
            return
        block_id = self.store.allocate_block()
        minimum = int(keys_of(self.cur)[0])
        pending = self.store.write_block_async(block_id, self.raw)
        self.blocks.append(BlockDescriptor(block_id, minimum, self.fill,
                                           history=[EXTERNAL] if self.history else None))
        self.inflight.append(pending)
        while len(self.inflight) > self.max_in_flight:
            self.inflight.popleft().wait()
        self._new_buffer()

    def finish(self, level: int) -> ExternalArray | None:
        self._emit()
        while self.inflight:
            self.inflight.popleft().wait()
        if not self.blocks:
            return None
        return ExternalArray(self.blocks, level, self.dtype)


@dataclass
class ExternalStats:
    arrays_created: int = 0
    level_merges: int = 0
    refills: int = 0
    flushes: int = 0
    max_arrays: int = 0
    history: list = field(default_factory=list)


class ExternalMemory:
    """All external arrays of one queue, their prefetcher and the extract buffer."""

    def __init__(self, config: Config, store: BlockStore, counters: Counters, executor=None):
        self.config = config
        self.store = store
        self.counters = counters
        self.executor = executor
        self.check = config.check_invariants
        self.prefetch = PrefetchSequence(store, config, counters, executor, check=self.check)
        self.extract = ExtractBuffer(config.dtype)
        self.stats = ExternalStats()
        self.round_items = max(1, config.write_buffer_blocks // 2) * config.items_per_block

    @property
    def arrays(self) -> list[ExternalArray]:
        return self.prefetch.arrays

    def item_count(self) -> int:
        return self.prefetch.item_count()

    def level_counts(self) -> dict:
        counts: dict = {}
        for a in self.arrays:
            counts[a.level] = counts.get(a.level, 0) + 1
        return counts

    def read_buffer_bytes(self) -> int:
        """RAM reserved for read buffers (pool, or actual use when larger)."""
        p = self.prefetch
        used = p.loaded_count() + p.hinted_count()
        return max(p.pool_blocks(), used, 1) * self.config.block_size

    def floor_key(self) -> int:
        return self.prefetch.floor_key()

    # -- hints --------------------------------------------------------------

    def suppress_hints(self) -> None:
        self.prefetch.suppressed = True

    def resume_hints(self) -> None:
        if self.prefetch.suppressed:
            self.prefetch.suppressed = False
            self.prefetch.rebuild_hints()

    def _set_arrays(self, arrays) -> None:
        self.prefetch.set_arrays(arrays)
        self.stats.max_arrays = max(self.stats.max_arrays, len(arrays))

    # -- writing ------------------------------------------------------------

    def _writer(self) -> RunWriter:
        return RunWriter(self.store, self.config, self.config.write_buffer_blocks, history=self.check)

    def create_external_array(self, slices: list[SequenceSlice]) -> ExternalArray | None:
        """Merge all given in-RAM runs straight into a new level-0 array.

        The merge runs in rounds of ``write_buffer_blocks / 2`` blocks; each
        round is one parallel multiway merge whose p parts land in the write
        buffers, which are flushed asynchronously.
        """
        slices = [s for s in slices if len(s)]
        if not slices:
            return None
        writer = self._writer()
        p = self.config.num_threads
        while any(len(s) for s in slices):
            chunk = parallel_multiway_merge(slices, self.round_items, p=p, executor=self.executor)
            writer.add(chunk)
        arr = writer.finish(0)
        self.stats.arrays_created += 1
        self.stats.flushes += 1
        self._set_arrays(self.arrays + [arr])
        return arr

    def maybe_merge_external_level(self, level: int, force: bool = False) -> ExternalArray | None:
        """Stream-merge every array of `level` into one array at ``level + 1``
        once the level holds more than ``max_arrays_per_level`` arrays.

        Inputs are read through their own prediction sequence, so blocks are
        fetched in the order the merge needs them, and each block is freed as
        soon as it is consumed. Cascades to the next level.
        """
        members = [a for a in self.arrays if a.level == level]
        if len(members) < 2 or (not force and len(members) <= self.config.max_arrays_per_level):
            return None
        self.prefetch.release(members)
        rest = [a for a in self.arrays if a.level != level]
        self._set_arrays(rest)
        reader = PrefetchSequence(self.store, self.config, self.counters, self.executor)
        reader.set_arrays(members)
        writer = self._writer()
        while reader.item_count():
            writer.add(reader.collect(self.round_items))
        merged = writer.finish(level + 1)
        self.stats.arrays_created += 1
        self.stats.level_merges += 1
        self._set_arrays(self.arrays + [merged])
        self.maybe_merge_external_level(level + 1)
        return merged

    def merge_levels(self) -> None:
        level = 0
        while level <= max((a.level for a in self.arrays), default=-1):
            self.maybe_merge_external_level(level)
            level += 1

    def relieve_pressure(self, max_read_bytes: int) -> None:
        """Merge the fullest level while the read-buffer pool alone would
        exceed `max_read_bytes` (small budgets with many arrays)."""
        while self.read_buffer_bytes() > max_read_bytes:
            counts = self.level_counts()
            candidates = [lvl for lvl, c in counts.items() if c >= 2]
            if not candidates:
                return
            level = max(candidates, key=lambda lvl: (counts[lvl], -lvl))
            self.maybe_merge_external_level(level, force=True)

    # -- extraction ---------------------------------------------------------

    def refill_extract_buffer(self, max_items: int, cap: int | None = None) -> int:
        """Append up to `max_items` safely extractable items to the buffer."""
        out = self.prefetch.collect(max_items, cap)
        self.extract.append(out)
        self.stats.refills += 1
        if any(a.remaining == 0 for a in self.arrays):
            self._set_arrays([a for a in self.arrays if a.remaining])
        return len(out)

    def release_all(self) -> None:
        self.prefetch.release(list(self.arrays))
