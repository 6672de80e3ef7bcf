"""Paging, translation, aliasing, and byte-level access tests."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmebox_sim.engine import Engine, EngineConfig, PAGE_SIZE
from tmebox_sim.errors import (
    AlignmentError,
    ConfigError,
    IntegrityViolation,
    KeyIdError,
    MixedKeyAccessError,
    PageFault,
    PhysRangeError,
    ProtectionFault,
    WxViolationError,
)
from tmebox_sim.memory import (
    AddressLayout,
    MemorySystem,
    PERM_R,
    PERM_W,
    PERM_X,
)

SEED = 0xBEEF


@pytest.fixture
def mem() -> MemorySystem:
    engine = Engine(EngineConfig(keyid_bits=6, rng_seed=SEED), phys_pages=256)
    return MemorySystem(engine)


def _win(mem, alias, offset):
    return mem.layout.compose(alias, offset)


# -- address layout ------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=63),
       st.integers(min_value=0, max_value=(1 << 48) - 1))
def test_decompose_compose_bijection(alias, offset):
    layout = AddressLayout(alias_bits=6)
    v = layout.compose(alias, offset)
    assert layout.decompose(v) == (alias, offset)


def test_noncanonical_addresses_rejected():
    layout = AddressLayout(alias_bits=6)
    with pytest.raises(ConfigError):
        layout.decompose(1 << 54)
    assert layout.truncation_mask == 0x0000_FFFF_FFFF_FFFF


def test_layout_bounds():
    with pytest.raises(ConfigError):
        AddressLayout(alias_bits=0)
    with pytest.raises(ConfigError):
        AddressLayout(alias_bits=16)
    with pytest.raises(ConfigError):
        AddressLayout(alias_bits=6, offset_bits=60)


# -- mapping -------------------------------------------------------------------

def test_map_and_translate(mem):
    va = _win(mem, 2, 0x4000)
    mem.map_page(va, ppn=7, keyid=2, perms=PERM_R | PERM_W)
    paddr_line, off, keyid = mem.translate(va + 0x123, "read")
    assert paddr_line == 7 * PAGE_SIZE + 0x100
    assert off == 0x23
    assert keyid == 2


def test_aliasing_two_entries_one_page(mem):
    va2 = _win(mem, 2, 0x4000)
    va3 = _win(mem, 3, 0x4000)
    mem.map_page(va2, ppn=9, keyid=2, perms=PERM_R | PERM_W)
    mem.map_page(va3, ppn=9, keyid=3, perms=PERM_R | PERM_W)
    line2, _, k2 = mem.translate(va2, "read")
    line3, _, k3 = mem.translate(va3, "read")
    assert line2 == line3
    assert (k2, k3) == (2, 3)


def test_map_rejects_bad_arguments(mem):
    with pytest.raises(AlignmentError):
        mem.map_page(_win(mem, 1, 0x100), 1, 1, PERM_R)
    with pytest.raises(PhysRangeError):
        mem.map_page(_win(mem, 1, 0x1000), 256, 1, PERM_R)
    with pytest.raises(KeyIdError):
        mem.map_page(_win(mem, 1, 0x1000), 1, 64, PERM_R)
    with pytest.raises(WxViolationError):
        mem.map_page(_win(mem, 1, 0x1000), 1, 1, PERM_W | PERM_X)


def test_translate_faults(mem):
    with pytest.raises(PageFault):
        mem.translate(_win(mem, 1, 0x9000), "read")
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R)
    with pytest.raises(ProtectionFault):
        mem.translate(va, "write")


def test_alias_bits_route_translation(mem):
    # the same in-window offset resolves through each alias's own region
    offset = 0x2000
    for alias in (1, 5):
        mem.map_page(_win(mem, alias, offset), ppn=10 + alias, keyid=alias,
                     perms=PERM_R)
    # oracle: plain bit arithmetic on the layout
    va = (5 << 48) | offset
    assert va >> 48 == 5
    line, _, keyid = mem.translate(va, "read")
    assert line == 15 * PAGE_SIZE + offset % PAGE_SIZE
    assert keyid == 5


# -- set_keyid --------------------------------------------------------------

def test_set_keyid_revokes_old_data(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    mem.mem_write(va, bytes(range(64)))
    mem.set_keyid(va, 2)
    with pytest.raises(IntegrityViolation):
        mem.mem_read(va, 64)
    # full-line re-initialization under the new key restores access
    mem.mem_write(va, bytes(64))
    assert mem.mem_read(va, 64) == bytes(64)


def test_set_keyid_idempotent(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    mem.mem_write(va, bytes(64))
    mem.set_keyid(va, 1)
    assert mem.mem_read(va, 64) == bytes(64)


def test_set_keyid_unmapped_page(mem):
    with pytest.raises(PageFault):
        mem.set_keyid(_win(mem, 1, 0x7000), 2)


# -- byte access decomposition ---------------------------------------------

def test_full_line_write_initializes(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    mem.mem_write(va, b"\x5a" * 64)
    cell = mem.engine.phys.cells[3 * PAGE_SIZE]
    assert cell.initialized and cell.last_writer == 1


def test_partial_write_needs_initialized_line(mem):
    from tmebox_sim.errors import UninitializedLineError
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    with pytest.raises(UninitializedLineError):
        mem.mem_write(va + 30, b"\x01\x02\x03\x04")
    mem.mem_write(va, bytes(64))
    mem.mem_write(va + 30, b"\x01\x02\x03\x04")
    assert mem.mem_read(va + 28, 8) == b"\x00\x00\x01\x02\x03\x04\x00\x00"


def test_read_spanning_lines_matches_shadow(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    shadow = bytearray(random.Random(5).randbytes(256))
    for off in range(0, 256, 64):
        mem.mem_write(va + off, bytes(shadow[off:off + 64]))
    assert mem.mem_read(va + 30, 100) == bytes(shadow[30:130])


def test_straddle_requires_both_pages(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    with pytest.raises(PageFault):
        mem.mem_read(va + PAGE_SIZE - 8, 16)


def test_straddle_with_mixed_keyids_refused(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    mem.map_page(va + PAGE_SIZE, 4, 2, PERM_R | PERM_W)
    with pytest.raises(MixedKeyAccessError):
        mem.mem_read(va + PAGE_SIZE - 8, 16)


def test_straddle_same_keyid_allowed(mem):
    va = _win(mem, 1, 0x1000)
    mem.map_page(va, 3, 1, PERM_R | PERM_W)
    mem.map_page(va + PAGE_SIZE, 4, 1, PERM_R | PERM_W)
    mem.mem_write(va + PAGE_SIZE - 64, bytes(range(64)))
    mem.mem_write(va + PAGE_SIZE, bytes(range(64, 128)))
    got = mem.mem_read(va + PAGE_SIZE - 8, 16)
    assert got == bytes(range(56, 72))


def test_shadow_equivalence_random_ops(mem):
    # under exclusively correct-key accesses the memory behaves like a
    # flat byte array
    va = _win(mem, 1, 0x10000)
    npages = 4
    for i in range(npages):
        mem.map_page(va + i * PAGE_SIZE, 20 + i, 1, PERM_R | PERM_W)
    size = npages * PAGE_SIZE
    shadow = bytearray(size)
    for off in range(0, size, 64):
        mem.mem_write(va + off, bytes(64))
    rng = random.Random(99)
    for _ in range(500):
        off = rng.randrange(0, size - 128)
        length = rng.randrange(1, 128)
        if rng.random() < 0.5:
            data = rng.randbytes(length)
            mem.mem_write(va + off, data)
            shadow[off:off + length] = data
        else:
            assert mem.mem_read(va + off, length) == bytes(shadow[off:off + length])


# -- aliasing soundness over all keyid pairs -----------------------------------

def test_aliasing_soundness_all_pairs():
    engine = Engine(EngineConfig(keyid_bits=6, rng_seed=SEED), phys_pages=128)
    mem = MemorySystem(engine)
    layout = mem.layout
    ppn = 5
    for alias in range(1, 64):
        mem.map_page(layout.compose(alias, 0x1000), ppn, alias, PERM_R | PERM_W)
    rng = random.Random(21)
    for a in range(1, 64):
        va_a = layout.compose(a, 0x1000)
        mem.mem_write(va_a, rng.randbytes(64))
        b = a
        while b == a:
            b = rng.randrange(1, 64)
        with pytest.raises(IntegrityViolation):
            mem.mem_read(layout.compose(b, 0x1000), 64)
        mem.mem_read(va_a, 64)
