"""Item model, ordering, configuration and shared counters."""
from __future__ import annotations

import dataclasses
import os
import tempfile
import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MAX_KEY = (1 << 64) - 1
# Virtual key strictly above every real key; only ever lives in trees.
SENTINEL = 1 << 64

MIN_FIRST = "min-first"
MAX_FIRST = "max-first"

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30

PAYLOAD_BYTES = {8: 0, 24: 16}


class BulkPQError(Exception):
    """Base class for all errors raised by the package."""


class EmptyQueueError(BulkPQError, IndexError):
    pass


class SessionError(BulkPQError, RuntimeError):
    """Raised for calls that are illegal in the queue's current phase."""


class ContractError(BulkPQError, ValueError):
    """Raised when a caller breaks an argument contract (e.g. limit_push below L)."""


class ConfigError(BulkPQError, ValueError):
    pass


class Item(NamedTuple):
    key: int
    payload: bytes = b""


def compare(a: Item, b: Item, direction: str = MIN_FIRST) -> int:
    """Return -1 if `a` comes out of the queue before `b`, 1 if after, 0 if tied.

    Only keys take part; payloads never influence the order.
    """
    ka, kb = a[0], b[0]
    if ka == kb:
        return 0
    before = ka < kb
    if direction == MAX_FIRST:
        before = not before
    return -1 if before else 1


def item_dtype(item_size: int) -> np.dtype:
    """Storage dtype of one record: bare uint64 key, or key followed by payload bytes."""
    payload = PAYLOAD_BYTES[item_size]
    if payload == 0:
        return np.dtype("<u8")
    return np.dtype([("key", "<u8"), ("payload", f"V{payload}")])


def keys_of(arr: np.ndarray) -> np.ndarray:
    """Key view of an item array (the array itself for 8-byte items)."""
    if arr.dtype.names is None:
        return arr
    return arr["key"]


def encode_keys(keys, direction: str) -> np.ndarray:
    """Map user keys to the internal ascending key space."""
    arr = np.asarray(keys, dtype=np.uint64)
    if direction == MAX_FIRST:
        return ~arr
    return arr


def _default_backing_dir() -> str:
    return os.environ.get("BULKPQ_TMPDIR") or tempfile.gettempdir()


@dataclass(frozen=True)
class Config:
    """Queue parameters. Sizes are in bytes unless the name says items."""

    num_threads: int = 4
    mem_budget: int = 64 * MiB
    block_size: int = 2 * MiB
    backing_paths: tuple = ()
    insertion_heap_capacity: int = 16 * KiB
    max_arrays_per_level: int = 64
    write_buffer_blocks: int | None = None
    read_buffer_bytes_per_array: int | None = None
    extract_buffer_max: int = 1 << 16
    order_direction: str = MIN_FIRST
    item_size: int = 8
    direct_io: bool = False
    io_threads: int = 4
    disk_capacity_bytes: int | None = None
    check_invariants: bool = False

    def __post_init__(self):
        if isinstance(self.backing_paths, (str, os.PathLike)):
            object.__setattr__(self, "backing_paths", (os.fspath(self.backing_paths),))
        else:
            object.__setattr__(self, "backing_paths", tuple(os.fspath(p) for p in self.backing_paths))
        if self.write_buffer_blocks is None:
            object.__setattr__(self, "write_buffer_blocks", 2 * self.num_threads)
        if self.read_buffer_bytes_per_array is None:
            object.__setattr__(self, "read_buffer_bytes_per_array", 2 * self.block_size)
        self.validate()

    @property
    def payload_size(self) -> int:
        return PAYLOAD_BYTES[self.item_size]

    @property
    def items_per_block(self) -> int:
        return self.block_size // self.item_size

    @property
    def dtype(self) -> np.dtype:
        return item_dtype(self.item_size)

    @property
    def paths(self) -> tuple:
        return self.backing_paths or (_default_backing_dir(),)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.num_threads >= 1, "num_threads must be >= 1")
        need(self.item_size in PAYLOAD_BYTES, f"item_size must be one of {sorted(PAYLOAD_BYTES)}")
        need(self.order_direction in (MIN_FIRST, MAX_FIRST),
             f"order_direction must be {MIN_FIRST!r} or {MAX_FIRST!r}")
        need(self.block_size >= 64 * KiB, "block_size must be at least 64 KiB")
        need(self.insertion_heap_capacity >= 1, "insertion_heap_capacity must be >= 1")
        need(self.max_arrays_per_level >= 1, "max_arrays_per_level must be >= 1")
        need(self.write_buffer_blocks >= 2 * self.num_threads,
             "write_buffer_blocks must be >= 2 * num_threads")
        need(self.read_buffer_bytes_per_array >= self.block_size,
             "read_buffer_bytes_per_array must hold at least one block")
        need(self.extract_buffer_max >= 1, "extract_buffer_max must be >= 1")
        need(self.io_threads >= 1, "io_threads must be >= 1")
        if self.direct_io:
            need(self.block_size % 4096 == 0, "direct_io needs a block_size multiple of 4096")
        reserved = (self.num_threads * self.insertion_heap_capacity * self.item_size
                    + self.write_buffer_blocks * self.block_size + self.block_size)
        need(self.mem_budget > reserved,
             f"mem_budget {self.mem_budget} must exceed heaps + write buffers + one read block ({reserved})")

    def replace(self, **changes) -> "Config":
        """Copy with changes; buffer sizes still at their derived defaults are
        re-derived from the new thread count and block size."""
        if "write_buffer_blocks" not in changes and self.write_buffer_blocks == 2 * self.num_threads:
            changes["write_buffer_blocks"] = None
        if ("read_buffer_bytes_per_array" not in changes
                and self.read_buffer_bytes_per_array == 2 * self.block_size):
            changes["read_buffer_bytes_per_array"] = None
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides) -> "Config":
        """Load ``key = value`` lines; ``#`` starts a comment. `overrides` win."""
        values = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "Config":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, value)
        return cls(**kwargs)


_INT_FIELDS = {"num_threads", "mem_budget", "block_size", "insertion_heap_capacity",
               "max_arrays_per_level", "write_buffer_blocks", "read_buffer_bytes_per_array",
               "extract_buffer_max", "item_size", "io_threads", "disk_capacity_bytes"}
_BOOL_FIELDS = {"direct_io", "check_invariants"}


def parse_size(text) -> int:
    """Parse ``4096``, ``64K``, ``8MiB``, ``2g`` ... into a byte count."""
    if isinstance(text, int):
        return text
    s = str(text).strip().lower().removesuffix("b").removesuffix("i")
    mult = {"k": KiB, "m": MiB, "g": GiB}.get(s[-1:], 1)
    if mult != 1:
        s = s[:-1]
    return int(float(s) * mult) if "." in s else int(s) * mult


def _coerce(name, value):
    if not isinstance(value, str):
        return value
    if name in _INT_FIELDS:
        if value.lower() in ("", "none"):
            return None
        return parse_size(value)
    if name in _BOOL_FIELDS:
        return value.lower() in ("1", "true", "yes", "on")
    if name == "backing_paths":
        return tuple(p for p in value.split(",") if p)
    return value


@dataclass
class Counters:
    """Lifetime event counts. Updates are serialized by an internal lock."""

    blocks_written: int = 0
    blocks_read: int = 0
    hints_issued: int = 0
    hints_canceled: int = 0
    comparisons_in_replay: int = 0
    items_pushed: int = 0
    items_popped: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def snapshot(self) -> dict:
        with self._lock:
            return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                    if not f.name.startswith("_")}
