"""Multi-key memory encryption engine with per-line integrity.

The engine models the datapath between a CPU and DRAM: every 64-byte
cache line stored in physical memory is encrypted under one of up to
2^15 keys selected by a small key identifier (keyID), and carries a
truncated MAC that is recomputed and checked on every read.  A read
issued with a keyID other than the one that last wrote the whole line
fails its MAC check and raises ``IntegrityViolation``; a partial write
with a foreign keyID silently re-MACs the line under the writer's key,
so the legitimate owner's next read detects the corruption.

Primitives (deterministic, platform-stable):

* per-line cipher: AES-128-XTS with the 64-byte line as one data unit
  and the line's physical address as the tweak (implemented as XEX over
  reusable AES-ECB contexts; byte-identical to standard XTS for whole
  blocks),
* per-line MAC: HMAC-SHA-256 over ``(line address, ciphertext)``,
  truncated to ``mac_bits`` (default 28),
* key schedule: all key and MAC material is derived from ``rng_seed``
  with SHA-256, so two engines built from the same configuration behave
  byte-identically.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    AlignmentError,
    ConfigError,
    IntegrityViolation,
    KeyIdError,
    PhysRangeError,
    UninitializedLineError,
)

LINE_SIZE = 64
PAGE_SIZE = 4096
LINES_PER_PAGE = PAGE_SIZE // LINE_SIZE
DEFAULT_PHYS_PAGES = 1 << 16

MODE_ENCRYPT_WITH_INTEGRITY = "encrypt_with_integrity"

_GF_MOD = (1 << 128) - 1
_BLOCKS_PER_LINE = LINE_SIZE // 16


@dataclass(frozen=True)
class EngineConfig:
    """Immutable engine parameters.

    ``mac_bits`` may be lowered (to 4) so that MAC collision statistics
    become observable in tests; production width is 28.
    """

    keyid_bits: int
    mac_bits: int = 28
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.keyid_bits <= 15:
            raise ConfigError(f"keyid_bits must be in [1, 15], got {self.keyid_bits}")
        if not 4 <= self.mac_bits <= 28:
            raise ConfigError(f"mac_bits must be in [4, 28], got {self.mac_bits}")
        if not 0 <= self.rng_seed < (1 << 64):
            raise ConfigError("rng_seed must be a 64-bit unsigned value")

    @property
    def num_keyids(self) -> int:
        return 1 << self.keyid_bits


class KeyTableEntry:
    """One key table slot: 32 bytes of key material plus derived state.

    The AES-ECB contexts and the HMAC base are caches derived from the
    key material; they exist so per-line operations do not rebuild
    cipher objects.
    """

    __slots__ = ("keyid", "key_material", "mode", "_enc", "_dec", "_twk", "_mac_base")

    def __init__(self, keyid: int, key_material: bytes, mac_key: bytes):
        self.keyid = keyid
        self.key_material = key_material
        self.mode = MODE_ENCRYPT_WITH_INTEGRITY
        self._enc = Cipher(algorithms.AES(key_material[:16]), modes.ECB()).encryptor()
        self._dec = Cipher(algorithms.AES(key_material[:16]), modes.ECB()).decryptor()
        self._twk = Cipher(algorithms.AES(key_material[16:]), modes.ECB()).encryptor()
        self._mac_base = hmac.new(mac_key, digestmod=hashlib.sha256)


@dataclass
class CacheLineCell:
    """One 64-byte physical line: ciphertext, truncated MAC, init flag.

    ``last_writer`` records which keyID performed the most recent write.
    It is simulator-side metadata (real hardware keeps no such record):
    the MAC check never consults it, but the trusted runtime uses it to
    attribute corruption, and tests use it as the ownership oracle.
    """

    __slots__ = ("ciphertext", "mac", "initialized", "last_writer")

    ciphertext: bytes
    mac: int
    initialized: bool
    last_writer: int


@dataclass
class PhysicalMemory:
    """Sparse array of cache line cells, ``phys_pages`` pages long."""

    phys_pages: int = DEFAULT_PHYS_PAGES
    cells: dict[int, CacheLineCell] = field(default_factory=dict)

    @property
    def size_bytes(self) -> int:
        return self.phys_pages * PAGE_SIZE

    def owners(self) -> dict[int, int]:
        """Map of line address to last-writer keyid, initialized lines only."""
        return {
            addr: c.last_writer for addr, c in self.cells.items() if c.initialized
        }


def derive_key_material(rng_seed: int, keyid: int) -> bytes:
    """32 bytes of per-keyID cipher key material."""
    seed = struct.pack("<QH", rng_seed, keyid)
    return hashlib.sha256(b"line-cipher-key/" + seed).digest()


def derive_mac_key(rng_seed: int, keyid: int) -> bytes:
    """32 bytes of per-keyID MAC key material."""
    seed = struct.pack("<QH", rng_seed, keyid)
    return hashlib.sha256(b"line-mac-key/" + seed).digest()


def xts_line_encrypt(key_material: bytes, paddr_line: int, plaintext: bytes) -> bytes:
    """Standalone AES-128-XTS of one line (reference path for tests)."""
    tweak = struct.pack("<QQ", paddr_line, 0)
    c = Cipher(algorithms.AES(key_material), modes.XTS(tweak))
    return c.encryptor().update(plaintext)


def xts_line_decrypt(key_material: bytes, paddr_line: int, ciphertext: bytes) -> bytes:
    """Standalone AES-128-XTS decryption of one line."""
    tweak = struct.pack("<QQ", paddr_line, 0)
    c = Cipher(algorithms.AES(key_material), modes.XTS(tweak))
    return c.decryptor().update(ciphertext)


class Engine:
    """Encryption engine plus the physical line store it fronts."""

    def __init__(self, config: EngineConfig, phys_pages: int = DEFAULT_PHYS_PAGES):
        if phys_pages <= 0:
            raise ConfigError("phys_pages must be positive")
        self.config = config
        self.phys = PhysicalMemory(phys_pages=phys_pages)
        self.key_table: dict[int, KeyTableEntry] = {}
        for keyid in range(config.num_keyids):
            self.key_table[keyid] = KeyTableEntry(
                keyid,
                derive_key_material(config.rng_seed, keyid),
                derive_mac_key(config.rng_seed, keyid),
            )

    # -- internal helpers -------------------------------------------------

    def _entry(self, keyid: int) -> KeyTableEntry:
        entry = self.key_table.get(keyid)
        if entry is None:
            raise KeyIdError(f"keyid {keyid} outside key table")
        return entry

    def _check_line_addr(self, paddr_line: int) -> None:
        if paddr_line % LINE_SIZE != 0:
            raise AlignmentError(f"line address {paddr_line:#x} not 64-byte aligned")
        if not 0 <= paddr_line < self.phys.size_bytes:
            raise PhysRangeError(
                f"line address {paddr_line:#x} outside {self.phys.size_bytes:#x}")

    def _tweak_stream(self, entry: KeyTableEntry, paddr_line: int) -> int:
        # XTS block tweaks: encrypt the data-unit number under the tweak
        # key, then advance by multiplication with x in GF(2^128).
        t = int.from_bytes(entry._twk.update(struct.pack("<QQ", paddr_line, 0)),
                           "little")
        stream = bytearray()
        for _ in range(_BLOCKS_PER_LINE):
            stream += t.to_bytes(16, "little")
            t <<= 1
            if t >> 128:
                t = (t & _GF_MOD) ^ 0x87
        return int.from_bytes(stream, "little")

    def _encrypt(self, entry: KeyTableEntry, paddr_line: int, plaintext: bytes) -> bytes:
        ts = self._tweak_stream(entry, paddr_line)
        x = (int.from_bytes(plaintext, "little") ^ ts).to_bytes(LINE_SIZE, "little")
        y = entry._enc.update(x)
        return (int.from_bytes(y, "little") ^ ts).to_bytes(LINE_SIZE, "little")

    def _decrypt(self, entry: KeyTableEntry, paddr_line: int, ciphertext: bytes) -> bytes:
        ts = self._tweak_stream(entry, paddr_line)
        x = (int.from_bytes(ciphertext, "little") ^ ts).to_bytes(LINE_SIZE, "little")
        y = entry._dec.update(x)
        return (int.from_bytes(y, "little") ^ ts).to_bytes(LINE_SIZE, "little")

    def _mac(self, entry: KeyTableEntry, paddr_line: int, ciphertext: bytes) -> int:
        h = entry._mac_base.copy()
        h.update(struct.pack("<Q", paddr_line))
        h.update(ciphertext)
        return int.from_bytes(h.digest()[:4], "big") >> (32 - self.config.mac_bits)

    # -- line operations ---------------------------------------------------

    def line_write_full(self, paddr_line: int, keyid: int, plaintext: bytes) -> None:
        """Write all 64 bytes of a line, (re)establishing MAC and ownership.

        A full-line write never checks the previous MAC: writing a whole
        line is the initialization/reassignment mechanism, so ownership
        transfers to ``keyid`` unconditionally.
        """
        self._check_line_addr(paddr_line)
        if len(plaintext) != LINE_SIZE:
            raise ValueError(f"full-line write needs {LINE_SIZE} bytes")
        entry = self._entry(keyid)
        ciphertext = self._encrypt(entry, paddr_line, plaintext)
        mac = self._mac(entry, paddr_line, ciphertext)
        self.phys.cells[paddr_line] = CacheLineCell(ciphertext, mac, True, keyid)

    def page_write_full(self, paddr_page: int, keyid: int, plaintext: bytes) -> None:
        """Initialize all 64 lines of one page in a single pass.

        Byte-identical to 64 consecutive ``line_write_full`` calls (the
        per-line tweaks and MACs are unchanged); exists because sandbox
        startup and reclamation sweeps write whole pages at a time.
        """
        if paddr_page % PAGE_SIZE != 0:
            raise AlignmentError(f"page address {paddr_page:#x} not page-aligned")
        if not 0 <= paddr_page <= self.phys.size_bytes - PAGE_SIZE:
            raise PhysRangeError(
                f"page address {paddr_page:#x} outside {self.phys.size_bytes:#x}")
        if len(plaintext) != PAGE_SIZE:
            raise ValueError(f"full-page write needs {PAGE_SIZE} bytes")
        entry = self._entry(keyid)
        tweak_blocks = b"".join(
            struct.pack("<QQ", paddr_page + i * LINE_SIZE, 0)
            for i in range(LINES_PER_PAGE))
        encrypted_tweaks = entry._twk.update(tweak_blocks)
        streams = []
        for i in range(LINES_PER_PAGE):
            t = int.from_bytes(encrypted_tweaks[i * 16:(i + 1) * 16], "little")
            acc = t
            for shift in (128, 256, 384):
                t <<= 1
                if t >> 128:
                    t = (t & _GF_MOD) ^ 0x87
                acc |= t << shift
            streams.append(acc.to_bytes(LINE_SIZE, "little"))
        ts = int.from_bytes(b"".join(streams), "little")
        x = (int.from_bytes(plaintext, "little") ^ ts).to_bytes(PAGE_SIZE, "little")
        y = entry._enc.update(x)
        ct_all = (int.from_bytes(y, "little") ^ ts).to_bytes(PAGE_SIZE, "little")
        cells = self.phys.cells
        for i in range(LINES_PER_PAGE):
            addr = paddr_page + i * LINE_SIZE
            ct = ct_all[i * LINE_SIZE:(i + 1) * LINE_SIZE]
            cells[addr] = CacheLineCell(ct, self._mac(entry, addr, ct), True,
                                        keyid)

    def line_read(self, paddr_line: int, keyid: int) -> bytes:
        """Authenticate and decrypt one line under ``keyid``.

        Raises ``IntegrityViolation`` when the recomputed MAC does not
        match the stored one, i.e. with overwhelming probability whenever
        ``keyid`` differs from the key that last wrote the line.
        """
        self._check_line_addr(paddr_line)
        cell = self.phys.cells.get(paddr_line)
        if cell is None or not cell.initialized:
            raise UninitializedLineError(f"line {paddr_line:#x} has no MAC")
        entry = self._entry(keyid)
        if self._mac(entry, paddr_line, cell.ciphertext) != cell.mac:
            raise IntegrityViolation(paddr_line, keyid)
        return self._decrypt(entry, paddr_line, cell.ciphertext)

    def line_write_partial(self, paddr_line: int, keyid: int, offset: int,
                           data: bytes) -> None:
        """Read-modify-write part of a line under ``keyid``, unchecked.

        The stored ciphertext is decrypted under ``keyid`` (garbage when
        ``keyid`` is not the owner), the new bytes are spliced in, and
        the line is re-encrypted and re-MACed under ``keyid``.  No MAC
        check happens here; a foreign partial write is detected only by
        the owner's next read.
        """
        self._check_line_addr(paddr_line)
        if not data:
            raise ValueError("partial write needs at least one byte")
        if offset < 0 or offset + len(data) > LINE_SIZE:
            raise ValueError(
                f"partial write [{offset}, {offset + len(data)}) leaves the line")
        cell = self.phys.cells.get(paddr_line)
        if cell is None or not cell.initialized:
            raise UninitializedLineError(f"line {paddr_line:#x} has no MAC")
        entry = self._entry(keyid)
        scratch = bytearray(self._decrypt(entry, paddr_line, cell.ciphertext))
        scratch[offset:offset + len(data)] = data
        ciphertext = self._encrypt(entry, paddr_line, bytes(scratch))
        cell.ciphertext = ciphertext
        cell.mac = self._mac(entry, paddr_line, ciphertext)
        cell.last_writer = keyid


def engine_new(config: EngineConfig, phys_pages: int = DEFAULT_PHYS_PAGES) -> Engine:
    """Build an engine with a fully populated key table."""
    return Engine(config, phys_pages=phys_pages)
