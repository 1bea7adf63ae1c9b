import itertools

import numpy as np
import pytest

from bulkpq.core import (MAX_FIRST, MAX_KEY, MIN_FIRST, Config, ConfigError, Counters, Item, KiB, MiB,
                         compare, encode_keys, item_dtype, keys_of, parse_size)


def test_compare_min_first():
    assert compare(Item(3), Item(7)) == -1
    assert compare(Item(7), Item(3)) == 1


def test_compare_ignores_payload():
    assert compare(Item(5, b"a" * 16), Item(5, b"b" * 16)) == 0


def test_compare_max_first_reverses():
    assert compare(Item(3), Item(7), MAX_FIRST) == 1
    assert compare(Item(7), Item(3), MAX_FIRST) == -1


@pytest.mark.parametrize("direction", [MIN_FIRST, MAX_FIRST])
def test_compare_is_a_total_order(direction):
    keys = [0, 1, 2, MAX_KEY]
    for a, b, c in itertools.product(keys, repeat=3):
        ab = compare(Item(a), Item(b), direction)
        assert ab == -compare(Item(b), Item(a), direction)
        assert (ab == 0) == (a == b)
        if ab <= 0 and compare(Item(b), Item(c), direction) <= 0:
            assert compare(Item(a), Item(c), direction) <= 0


def test_item_dtype_layouts():
    assert item_dtype(8).itemsize == 8
    d = item_dtype(24)
    assert d.itemsize == 24
    assert d.fields["key"][1] == 0  # key first
    assert d.fields["payload"][1] == 8


def test_encode_keys_max_first_flips_order():
    enc = encode_keys([1, 5, 9], MAX_FIRST)
    assert list(np.argsort(enc)) == [2, 1, 0]
    assert list(encode_keys([1, 5], MIN_FIRST)) == [1, 5]


def test_keys_of_structured():
    arr = np.zeros(3, dtype=item_dtype(24))
    arr["key"] = [4, 5, 6]
    assert list(keys_of(arr)) == [4, 5, 6]


def test_config_defaults_and_derived():
    c = Config()
    assert c.max_arrays_per_level == 64
    assert c.block_size == 2 * MiB
    assert c.write_buffer_blocks == 2 * c.num_threads
    assert c.items_per_block == c.block_size // 8


@pytest.mark.parametrize("kw", [
    dict(num_threads=0),
    dict(item_size=16),
    dict(block_size=32 * KiB),
    dict(num_threads=4, write_buffer_blocks=7),
    dict(read_buffer_bytes_per_array=1024),
    dict(order_direction="sideways"),
    dict(mem_budget=4 * 16 * KiB * 8 + 8 * 2 * MiB + 2 * MiB),  # exactly the reserved amount
    dict(direct_io=True, block_size=64 * KiB + 8),
])
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        Config(**kw)


def test_config_accepts_reference_setups():
    Config(mem_budget=8 * MiB, block_size=256 * KiB)
    Config(mem_budget=16 * MiB, block_size=64 * KiB, item_size=24)


def test_config_paths_use_env(monkeypatch, tmp_path):
    monkeypatch.setenv("BULKPQ_TMPDIR", str(tmp_path / "x"))
    assert Config().paths == (str(tmp_path / "x"),)
    assert Config(backing_paths="/a").paths == ("/a",)


def test_config_from_file(tmp_path):
    f = tmp_path / "pq.conf"
    f.write_text("# desk setup\nmem_budget = 16M\nblock-size=128KiB  # small\nnum_threads=2\n"
                 "backing_paths=/d1,/d2\ncheck_invariants=yes\n")
    c = Config.from_file(f, num_threads=3)
    assert (c.mem_budget, c.block_size, c.num_threads) == (16 * MiB, 128 * KiB, 3)
    assert c.backing_paths == ("/d1", "/d2")
    assert c.check_invariants


def test_config_from_file_errors(tmp_path):
    f = tmp_path / "bad.conf"
    f.write_text("nonsense\n")
    with pytest.raises(ConfigError):
        Config.from_file(f)
    f.write_text("colour = blue\n")
    with pytest.raises(ConfigError):
        Config.from_file(f)


@pytest.mark.parametrize("text,value", [("4096", 4096), ("64K", 64 * KiB), ("8MiB", 8 * MiB),
                                        ("2g", 2 << 30), ("1.5M", 3 * MiB // 2), (77, 77)])
def test_parse_size(text, value):
    assert parse_size(text) == value


def test_counters_snapshot_and_threads():
    import threading
    c = Counters()
    threads = [threading.Thread(target=lambda: [c.add("blocks_read") for _ in range(1000)]) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    snap = c.snapshot()
    assert snap["blocks_read"] == 4000
    assert "_lock" not in snap


def test_replace_rederives_buffer_defaults():
    c = Config(num_threads=2).replace(num_threads=4, block_size=1 * MiB)
    assert c.write_buffer_blocks == 8
    assert c.read_buffer_bytes_per_array == 2 * MiB
    assert Config(write_buffer_blocks=12).replace(num_threads=2).write_buffer_blocks == 12
