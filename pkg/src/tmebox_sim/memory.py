"""Paging layer: keyID-bearing page tables, translation, page aliasing.

Virtual addresses decompose as ``[zero padding | alias | offset]``: the
low ``offset_bits`` address within a sandbox window, the next
``alias_bits`` select the window, and everything above must be zero
(the canonical rule).  The page table is a flat map from full virtual
page number to ``PageTableEntry``; several valid entries may share one
physical page (aliasing), each carrying its own keyID, which is how two
sandboxes end up co-located on one page with disjoint encrypted lines.

Byte-level ``mem_read``/``mem_write`` split accesses at line boundaries
and drive the engine: a write covering a whole 64-byte line becomes a
full-line write (initializing ownership), anything smaller a partial
read-modify-write under the page's keyID.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine import Engine, LINE_SIZE, PAGE_SIZE
from .errors import (
    AlignmentError,
    ConfigError,
    KeyIdError,
    MixedKeyAccessError,
    PageFault,
    PhysRangeError,
    ProtectionFault,
    WxViolationError,
)

PERM_R = 1
PERM_W = 2
PERM_X = 4

_ACCESS_BIT = {"read": PERM_R, "write": PERM_W, "execute": PERM_X}


@dataclass(frozen=True)
class AddressLayout:
    """Bit split of the 64-bit virtual address."""

    alias_bits: int
    offset_bits: int = 48
    page_bits: int = 12
    line_bits: int = 6

    def __post_init__(self) -> None:
        if not 1 <= self.alias_bits <= 15:
            raise ConfigError("alias_bits must be in [1, 15]")
        if self.offset_bits + self.alias_bits > 63:
            raise ConfigError("offset_bits + alias_bits must be <= 63")
        if self.page_bits != 12 or self.line_bits != 6:
            raise ConfigError("only 4096-byte pages with 64-byte lines are modeled")

    @property
    def truncation_mask(self) -> int:
        return (1 << self.offset_bits) - 1

    @property
    def max_address(self) -> int:
        return 1 << (self.offset_bits + self.alias_bits)

    def alias_of(self, vaddr: int) -> int:
        return (vaddr >> self.offset_bits) & ((1 << self.alias_bits) - 1)

    def offset_of(self, vaddr: int) -> int:
        return vaddr & self.truncation_mask

    def compose(self, alias: int, offset: int) -> int:
        if not 0 <= alias < (1 << self.alias_bits):
            raise ConfigError(f"alias {alias} outside {self.alias_bits} bits")
        if not 0 <= offset <= self.truncation_mask:
            raise ConfigError(f"offset {offset:#x} outside {self.offset_bits} bits")
        return (alias << self.offset_bits) | offset

    def decompose(self, vaddr: int) -> tuple[int, int]:
        """Split into (alias, offset); rejects non-canonical padding bits."""
        if not 0 <= vaddr < self.max_address:
            raise ConfigError(f"address {vaddr:#x} has nonzero padding bits")
        return self.alias_of(vaddr), self.offset_of(vaddr)


@dataclass
class PageTableEntry:
    ppn: int
    keyid: int
    perms: int
    valid: bool = True


class MemorySystem:
    """Flat page table over one engine's physical memory."""

    def __init__(self, engine: Engine, layout: AddressLayout | None = None):
        self.engine = engine
        self.layout = layout or AddressLayout(alias_bits=engine.config.keyid_bits)
        if self.layout.alias_bits != engine.config.keyid_bits:
            raise ConfigError("alias_bits must equal the engine's keyid_bits")
        self.page_table: dict[int, PageTableEntry] = {}

    @property
    def phys_pages(self) -> int:
        return self.engine.phys.phys_pages

    # -- mapping -----------------------------------------------------------

    def map_page(self, vaddr_page: int, ppn: int, keyid: int, perms: int) -> None:
        """Install or replace the PTE for one virtual page."""
        if vaddr_page % PAGE_SIZE != 0:
            raise AlignmentError(f"page address {vaddr_page:#x} not page-aligned")
        if not 0 <= vaddr_page < self.layout.max_address:
            raise ConfigError(f"page address {vaddr_page:#x} is non-canonical")
        if not 0 <= ppn < self.phys_pages:
            raise PhysRangeError(f"ppn {ppn} outside {self.phys_pages} pages")
        if not 0 <= keyid < self.engine.config.num_keyids:
            raise KeyIdError(f"keyid {keyid} outside key table")
        if (perms & PERM_W) and (perms & PERM_X):
            raise WxViolationError(
                f"page {vaddr_page:#x} cannot be writable and executable")
        self.page_table[vaddr_page >> self.layout.page_bits] = PageTableEntry(
            ppn=ppn, keyid=keyid, perms=perms)

    def unmap_page(self, vaddr_page: int) -> None:
        if vaddr_page % PAGE_SIZE != 0:
            raise AlignmentError(f"page address {vaddr_page:#x} not page-aligned")
        self.page_table.pop(vaddr_page >> self.layout.page_bits, None)

    def set_keyid(self, vaddr_page: int, keyid: int) -> None:
        """Swap the keyID in an existing PTE; line contents stay untouched.

        Old-key data left behind keeps its stale MAC, so the next read
        through this mapping violates until a full-line write
        re-initializes the line under the new keyID.
        """
        if vaddr_page % PAGE_SIZE != 0:
            raise AlignmentError(f"page address {vaddr_page:#x} not page-aligned")
        if not 0 <= keyid < self.engine.config.num_keyids:
            raise KeyIdError(f"keyid {keyid} outside key table")
        pte = self.page_table.get(vaddr_page >> self.layout.page_bits)
        if pte is None or not pte.valid:
            raise PageFault(vaddr_page)
        pte.keyid = keyid

    def set_perms(self, vaddr_page: int, perms: int) -> None:
        if (perms & PERM_W) and (perms & PERM_X):
            raise WxViolationError(
                f"page {vaddr_page:#x} cannot be writable and executable")
        pte = self.page_table.get(vaddr_page >> self.layout.page_bits)
        if pte is None or not pte.valid:
            raise PageFault(vaddr_page)
        pte.perms = perms

    # -- translation and byte access ----------------------------------------

    def translate(self, vaddr: int, access: str) -> tuple[int, int, int]:
        """Walk one address; returns (line paddr, offset in line, keyid)."""
        pte = self.page_table.get(vaddr >> self.layout.page_bits)
        if pte is None or not pte.valid:
            raise PageFault(vaddr)
        if not pte.perms & _ACCESS_BIT[access]:
            raise ProtectionFault(vaddr, access)
        page_off = vaddr & (PAGE_SIZE - 1)
        paddr = pte.ppn * PAGE_SIZE + page_off
        return paddr & ~(LINE_SIZE - 1), paddr & (LINE_SIZE - 1), pte.keyid

    def _segments(self, vaddr: int, length: int, access: str):
        """Translate an access split at line boundaries.

        All touched pages are walked up front so a fault cannot leave a
        multi-line write half done for a reason the first page already
        knew about; a straddle across pages with different keyIDs is
        refused outright.
        """
        if length <= 0:
            raise ValueError("access length must be positive")
        segments = []
        keyids = set()
        pos = vaddr
        remaining = length
        while remaining:
            line_off = pos & (LINE_SIZE - 1)
            chunk = min(LINE_SIZE - line_off, remaining)
            paddr_line, off, keyid = self.translate(pos, access)
            segments.append((paddr_line, off, chunk, keyid))
            keyids.add(keyid)
            pos += chunk
            remaining -= chunk
        if len(keyids) > 1:
            raise MixedKeyAccessError(
                f"access at {vaddr:#x}+{length} spans keyids {sorted(keyids)}")
        return segments

    def mem_read(self, vaddr: int, length: int) -> bytes:
        out = bytearray()
        for paddr_line, off, chunk, keyid in self._segments(vaddr, length, "read"):
            line = self.engine.line_read(paddr_line, keyid)
            out += line[off:off + chunk]
        return bytes(out)

    def mem_write(self, vaddr: int, data: bytes) -> None:
        pos = 0
        for paddr_line, off, chunk, keyid in self._segments(vaddr, len(data), "write"):
            piece = data[pos:pos + chunk]
            if chunk == LINE_SIZE:
                self.engine.line_write_full(paddr_line, keyid, piece)
            else:
                self.engine.line_write_partial(paddr_line, keyid, off, piece)
            pos += chunk

    def mem_fetch(self, vaddr: int, length: int) -> bytes:
        """Read with execute permission (not used by the register VM,
        whose code lives outside data memory, but part of the walk API)."""
        out = bytearray()
        for paddr_line, off, chunk, keyid in self._segments(vaddr, length, "execute"):
            line = self.engine.line_read(paddr_line, keyid)
            out += line[off:off + chunk]
        return bytes(out)
