"""Trusted runtime: sandbox lifecycle, allocator, syscalls, violations.

The runtime owns everything the sandboxes must not touch directly: the
keyID pool, the physical page pool, the page tables, and the
cache-line-granular heap.  Each sandbox gets a dedicated keyID, a
virtual window whose alias bits equal that keyID, and a base register
(gs or r15) holding the window base.  Stack and static memory are
mapped and fully line-initialized at creation; heap chunks are
line-initialized on allocation, which is what transfers line ownership
to the allocating sandbox.

Heap pages are shared between sandboxes at line granularity.  The heap
is organized as *slots*: slot ``s`` of every window is the virtual page
``base + HEAP_BASE_OFF + s * 4096``, and a global slot table says which
physical page currently backs it.  Relocating chunks retargets the slot
(the chunk's virtual address never changes); a source page left with no
live lines is unmapped everywhere and returned to the page pool.

Window layout (offsets inside the 2^48-byte window; all regions sit far
from the window edges so a bounded displacement can never reach a
neighbouring window's mapped pages):

====================  =========================
static data           0x0000_0001_0000
stack top             0x0000_8000_0000
heap slot 0           0x0001_0000_0000
code region           0x0100_0000_0000
====================  =========================
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .engine import (
    DEFAULT_PHYS_PAGES,
    Engine,
    EngineConfig,
    LINE_SIZE,
    LINES_PER_PAGE,
    PAGE_SIZE,
)
from .errors import (
    ArgValidationError,
    CapacityError,
    CodeFault,
    FuelExhausted,
    IntegrityViolation,
    InvalidFreeError,
    MixedKeyAccessError,
    OomError,
    PageFault,
    ProtectionFault,
    RelocationError,
    SandboxEscapeAssert,
    SandboxStateError,
    SimError,
    UninitializedLineError,
)
from .instrument import MODE_GS, MODE_R15, InstrumentationConfig, instrument
from .isa import Program, RUNTIME_CALLS, RUNTIME_CALL_IDS
from .memory import AddressLayout, MemorySystem, PERM_R, PERM_W
from .vm import ExitProgram, RUNNING, TRAPPED, VmState

STATIC_BASE_OFF = 0x0000_0001_0000
STACK_TOP_OFF = 0x0000_8000_0000
HEAP_BASE_OFF = 0x0001_0000_0000
CODE_BASE_OFF = 0x0100_0000_0000

_ZERO_LINE = bytes(LINE_SIZE)
_ZERO_PAGE = bytes(PAGE_SIZE)
_WRITE_OUT_LIMIT = 1 << 16

LIVE = "live"
TERMINATED = "terminated"

_TRAP_REASONS = (
    (IntegrityViolation, "integrity"),
    (PageFault, "pagefault"),
    (ProtectionFault, "protection"),
    (MixedKeyAccessError, "mixedkey"),
    (UninitializedLineError, "uninitialized"),
    (SandboxEscapeAssert, "escape"),
    (CodeFault, "codefault"),
    (FuelExhausted, "fuel"),
    (ArgValidationError, "argvalidation"),
    (InvalidFreeError, "invalidfree"),
)


def trap_reason(trap: SimError) -> str:
    for cls, reason in _TRAP_REASONS:
        if isinstance(trap, cls):
            return reason
    return "fault"


@dataclass(frozen=True)
class RuntimeConfig:
    keyid_bits: int = 6
    mac_bits: int = 28
    mode: str = MODE_GS
    rng_seed: int = 0
    phys_pages: int = DEFAULT_PHYS_PAGES
    stack_pages: int = 2
    instrument_programs: bool = True
    emit_assertions: bool = False
    isolate_code: bool = True
    # map every heap page into every window (the aliased-heap model).
    # Turn off for very large sandbox counts, where windows are mapped
    # lazily as they allocate; isolation is unaffected.
    alias_heap_globally: bool = True
    audit_vm: bool = False


@dataclass
class Chunk:
    owner: int
    vaddr: int
    line_start: int  # physical line index
    nlines: int
    slot: int  # heap slot of the first touched page

    @property
    def line_end(self) -> int:
        return self.line_start + self.nlines


_FULL_PAGE = (1 << LINES_PER_PAGE) - 1


@dataclass
class HeapState:
    """Occupancy bitmaps and chunk records for the shared heap."""

    page_occ: dict[int, int] = field(default_factory=dict)  # ppn -> used-line mask
    slot_map: dict[int, int] = field(default_factory=dict)  # slot -> ppn
    canonical: dict[int, int] = field(default_factory=dict)  # ppn -> lowest slot
    chunks: dict[tuple[int, int], Chunk] = field(default_factory=dict)
    next_slot: int = 0

    def rebuild_canonical(self) -> None:
        self.canonical.clear()
        for slot, ppn in self.slot_map.items():
            if ppn not in self.canonical or slot < self.canonical[ppn]:
                self.canonical[ppn] = slot

    def lines_in_use(self) -> int:
        return sum(mask.bit_count() for mask in self.page_occ.values())


@dataclass
class Disposition:
    """Outcome of violation handling."""

    kind: str  # "terminated" or "corruption_reported"
    reason: str
    paddr_line: int | None = None
    attributed_writer: int | None = None


class SandboxDescriptor:
    """Identity, window geometry, and execution state of one sandbox."""

    def __init__(self, *, name: str, keyid: int, base: int, mode: str,
                 stack_base: int, stack_size: int, static_base: int,
                 static_size: int):
        self.name = name
        self.keyid = keyid
        self.alias = keyid
        self.base = base
        self.mode = mode
        self.stack_base = stack_base
        self.stack_size = stack_size
        self.static_base = static_base
        self.static_size = static_size
        self.status = LIVE
        self.termination_reason: str | None = None
        self.vm: VmState | None = None
        self.output = bytearray()
        self.exclusive_pages: list[tuple[int, int]] = []  # (vaddr_page, ppn)
        self.mapped_slots: set[int] = set()
        self.flagged_for: list[int] = []  # lines this sandbox corrupted

    @property
    def code_base(self) -> int:
        return self.vm.code_base

    @property
    def code_size(self) -> int:
        return self.vm.code_size

    def __repr__(self) -> str:
        return f"<sandbox {self.name!r} keyid={self.keyid} {self.status}>"


class SandboxRuntime:
    """Privileged owner of keyIDs, pages, heap, and the syscall gateway."""

    def __init__(self, config: RuntimeConfig | None = None):
        self.config = config or RuntimeConfig()
        engine_cfg = EngineConfig(
            keyid_bits=self.config.keyid_bits,
            mac_bits=self.config.mac_bits,
            rng_seed=self.config.rng_seed,
        )
        self.engine = Engine(engine_cfg, phys_pages=self.config.phys_pages)
        self.layout = AddressLayout(alias_bits=self.config.keyid_bits)
        self.memsys = MemorySystem(self.engine, self.layout)
        self.heap = HeapState()
        self.sandboxes: dict[int, SandboxDescriptor] = {}
        self.events: list[dict] = []
        self._next_keyid = 1
        self._recycled_keyids: list[int] = []
        self._free_pages = set(range(self.config.phys_pages))
        self._page_heap = list(range(self.config.phys_pages))
        self._counter = 0

    # -- pools ---------------------------------------------------------------

    def _take_keyid(self) -> int:
        if self._recycled_keyids:
            return heapq.heappop(self._recycled_keyids)
        if self._next_keyid < self.engine.config.num_keyids:
            keyid = self._next_keyid
            self._next_keyid += 1
            return keyid
        raise CapacityError(
            f"all {self.engine.config.num_keyids - 1} keyids are live")

    def _release_keyid(self, keyid: int) -> None:
        heapq.heappush(self._recycled_keyids, keyid)

    def _take_page(self) -> int:
        while self._page_heap:
            ppn = heapq.heappop(self._page_heap)
            if ppn in self._free_pages:
                self._free_pages.remove(ppn)
                return ppn
        raise OomError("physical page pool exhausted")

    def _take_specific_page(self, ppn: int) -> None:
        if ppn not in self._free_pages:
            raise OomError(f"page {ppn} is not free")
        self._free_pages.remove(ppn)

    def _release_page(self, ppn: int) -> None:
        self._free_pages.add(ppn)
        heapq.heappush(self._page_heap, ppn)

    # -- lifecycle -------------------------------------------------------------

    def sandbox_create(self, program: Program, mode: str | None = None,
                       name: str | None = None) -> SandboxDescriptor:
        """Set up keyID, window, stack, static image, and VM for a program."""
        mode = mode or self.config.mode
        if mode not in (MODE_GS, MODE_R15):
            raise SandboxStateError(f"unknown mode {mode!r}")
        keyid = self._take_keyid()
        base = keyid << self.layout.offset_bits
        self._counter += 1
        name = name or f"sbx{self._counter}"

        if self.config.instrument_programs:
            icfg = InstrumentationConfig(
                mode=mode,
                offset_bits=self.layout.offset_bits,
                emit_assertions=self.config.emit_assertions,
                isolate_code=self.config.isolate_code,
            )
            program, _ = instrument(program, icfg)

        stack_size = self.config.stack_pages * PAGE_SIZE
        stack_top = base + STACK_TOP_OFF
        desc = SandboxDescriptor(
            name=name, keyid=keyid, base=base, mode=mode,
            stack_base=stack_top - stack_size, stack_size=stack_size,
            static_base=base + STATIC_BASE_OFF,
            static_size=len(program.static_data),
        )

        try:
            for i in range(self.config.stack_pages):
                self._map_exclusive(desc, desc.stack_base + i * PAGE_SIZE)
            data = program.static_data
            for i in range(0, len(data), PAGE_SIZE):
                self._map_exclusive(desc, desc.static_base + i)
            for off in range(0, len(data), LINE_SIZE):
                piece = data[off:off + LINE_SIZE]
                self.memsys.engine.line_write_full(
                    self.memsys.translate(desc.static_base + off, "write")[0],
                    keyid, piece + _ZERO_LINE[len(piece):])
        except OomError:
            self._reclaim(desc)
            raise

        vm = VmState(
            code=program.resolved(),
            code_base=base + CODE_BASE_OFF,
            alias=keyid,
            offset_bits=self.layout.offset_bits,
            mode=mode,
            memsys=self.memsys,
            runtime=self,
            sandbox=desc,
            audit=self.config.audit_vm,
            landing_sites=program.landing_sites,
        )
        vm.regs["rsp"] = stack_top
        vm.regs["rbp"] = stack_top
        if mode == MODE_GS:
            vm.gs = base
        else:
            vm.regs["r15"] = base
        desc.vm = vm

        self.sandboxes[keyid] = desc
        if self.config.alias_heap_globally:
            for slot in sorted(self.heap.slot_map):
                self._map_slot(desc, slot)
        return desc

    def _map_exclusive(self, desc: SandboxDescriptor, vaddr_page: int) -> None:
        ppn = self._take_page()
        self.memsys.map_page(vaddr_page, ppn, desc.keyid, PERM_R | PERM_W)
        desc.exclusive_pages.append((vaddr_page, ppn))
        self.engine.page_write_full(ppn * PAGE_SIZE, desc.keyid, _ZERO_PAGE)

    def _map_slot(self, desc: SandboxDescriptor, slot: int) -> None:
        if slot in desc.mapped_slots:
            return
        self.memsys.map_page(desc.base + HEAP_BASE_OFF + slot * PAGE_SIZE,
                             self.heap.slot_map[slot], desc.keyid,
                             PERM_R | PERM_W)
        desc.mapped_slots.add(slot)

    def _unmap_slot(self, desc: SandboxDescriptor, slot: int) -> None:
        if slot not in desc.mapped_slots:
            return
        self.memsys.unmap_page(desc.base + HEAP_BASE_OFF + slot * PAGE_SIZE)
        desc.mapped_slots.discard(slot)

    def _require_live(self, desc: SandboxDescriptor) -> None:
        if desc.status != LIVE:
            raise SandboxStateError(
                f"sandbox {desc.name!r} is {desc.status}"
                + (f" ({desc.termination_reason})" if desc.termination_reason else ""))

    # -- allocator ---------------------------------------------------------------

    def _new_heap_page(self) -> tuple[int, int]:
        """Draw a fresh page into the heap; returns (slot, ppn)."""
        ppn = self._take_page()
        slot = self.heap.next_slot
        self.heap.next_slot += 1
        self.heap.slot_map[slot] = ppn
        self.heap.page_occ[ppn] = 0
        for desc in self.sandboxes.values():
            if desc.status == LIVE and self.config.alias_heap_globally:
                self._map_slot(desc, slot)
        return slot, ppn

    @staticmethod
    def _find_run(mask: int, nlines: int) -> int | None:
        run = 0
        for i in range(LINES_PER_PAGE):
            if mask & (1 << i):
                run = 0
            else:
                run += 1
                if run == nlines:
                    return i - nlines + 1
        return None

    def sbx_alloc(self, desc: SandboxDescriptor, size: int) -> int:
        """Allocate ``size`` bytes, rounded up to whole cache lines.

        First fit over partially occupied heap pages (co-locating chunks
        of different sandboxes on one page) before opening fresh pages.
        Every line of the chunk is zero-initialized under the owner's
        keyID, which is what claims it.
        """
        self._require_live(desc)
        if size <= 0:
            raise ValueError("allocation size must be positive")
        nlines = -(-size // LINE_SIZE)

        if nlines <= LINES_PER_PAGE:
            placed = self._place_subpage(desc, nlines)
        else:
            placed = self._place_multipage(desc, nlines)
        slot, line_start = placed

        vaddr = (desc.base + HEAP_BASE_OFF + slot * PAGE_SIZE
                 + (line_start % LINES_PER_PAGE) * LINE_SIZE)
        chunk = Chunk(owner=desc.keyid, vaddr=vaddr, line_start=line_start,
                      nlines=nlines, slot=slot)
        self.heap.chunks[(desc.keyid, vaddr)] = chunk
        for line in range(chunk.line_start, chunk.line_end):
            self.engine.line_write_full(line * LINE_SIZE, desc.keyid, _ZERO_LINE)
        return vaddr

    def _place_subpage(self, desc: SandboxDescriptor, nlines: int) -> tuple[int, int]:
        for slot in sorted(self.heap.slot_map):
            ppn = self.heap.slot_map[slot]
            if self.heap.slot_of_ppn(ppn) != slot:
                continue  # aliased slot; the canonical one was already tried
            start = self._find_run(self.heap.page_occ[ppn], nlines)
            if start is not None:
                self._mark_lines(ppn, start, nlines, used=True)
                if not self.config.alias_heap_globally:
                    self._map_slot(desc, slot)
                return slot, ppn * LINES_PER_PAGE + start
        slot, ppn = self._new_heap_page()
        self._mark_lines(ppn, 0, nlines, used=True)
        if not self.config.alias_heap_globally:
            self._map_slot(desc, slot)
        return slot, ppn * LINES_PER_PAGE

    def _place_multipage(self, desc: SandboxDescriptor, nlines: int) -> tuple[int, int]:
        npages = -(-nlines // LINES_PER_PAGE)
        run: list[int] = []
        for ppn in sorted(self._free_pages):
            if run and ppn != run[-1] + 1:
                run = []
            run.append(ppn)
            if len(run) == npages:
                break
        else:
            raise OomError(f"no contiguous run of {npages} free pages")
        first_slot = None
        for ppn in run:
            self._take_specific_page(ppn)
            slot = self.heap.next_slot
            self.heap.next_slot += 1
            self.heap.slot_map[slot] = ppn
            self.heap.page_occ[ppn] = 0
            first_slot = slot if first_slot is None else first_slot
            for other in self.sandboxes.values():
                if other.status == LIVE and self.config.alias_heap_globally:
                    self._map_slot(other, slot)
            if not self.config.alias_heap_globally:
                self._map_slot(desc, slot)
        remaining = nlines
        for ppn in run:
            batch = min(LINES_PER_PAGE, remaining)
            self._mark_lines(ppn, 0, batch, used=True)
            remaining -= batch
        return first_slot, run[0] * LINES_PER_PAGE

    def _mark_lines(self, ppn: int, start: int, nlines: int, *, used: bool) -> None:
        mask = ((1 << nlines) - 1) << start
        if used:
            self.heap.page_occ[ppn] |= mask
        else:
            self.heap.page_occ[ppn] &= ~mask

    def sbx_free(self, desc: SandboxDescriptor, vaddr: int) -> None:
        """Release a chunk; its lines are re-initialized only on reuse."""
        self._require_live(desc)
        chunk = self.heap.chunks.pop((desc.keyid, vaddr), None)
        if chunk is None:
            raise InvalidFreeError(
                f"{vaddr:#x} is not a live chunk of sandbox {desc.name!r}")
        self._free_chunk_lines(chunk)

    def _free_chunk_lines(self, chunk: Chunk) -> None:
        for line in range(chunk.line_start, chunk.line_end):
            self._mark_lines(line // LINES_PER_PAGE, line % LINES_PER_PAGE, 1,
                             used=False)

    # -- relocation -----------------------------------------------------------

    def relocate(self, plan: list[tuple[SandboxDescriptor, int, list[int]]]):
        """Move chunks to new physical pages, keeping their vaddrs.

        Each plan entry is ``(sandbox, chunk vaddr, destination pages)``
        with one destination per page the chunk touches.  Because a
        chunk's virtual address is preserved by retargeting its heap
        slot, all chunks of one sandbox sharing a slot must move
        together, and a destination must have the chunk's in-page line
        offsets free.  Returns the list of reclaimed source pages.
        """
        moves: list[tuple[Chunk, list[int]]] = []
        slot_dest: dict[int, int] = {}
        for desc, vaddr, dests in plan:
            self._require_live(desc)
            chunk = self.heap.chunks.get((desc.keyid, vaddr))
            if chunk is None:
                raise RelocationError(f"{vaddr:#x} is not a live chunk")
            pages = list(range(chunk.line_start // LINES_PER_PAGE,
                               (chunk.line_end - 1) // LINES_PER_PAGE + 1))
            if len(dests) != len(pages):
                raise RelocationError(
                    f"chunk {vaddr:#x} touches {len(pages)} page(s), "
                    f"got {len(dests)} destination(s)")
            for i, dst in enumerate(dests):
                slot = chunk.slot + i
                if slot_dest.setdefault(slot, dst) != dst:
                    raise RelocationError(f"slot {slot} given two destinations")
            moves.append((chunk, dests))

        # a slot is one virtual heap page in every window, so retargeting
        # it moves every resident: all live chunks on the slot, whatever
        # their owner, must be in the plan with the same destination
        planned = {(c.owner, c.vaddr) for c, _ in moves}
        for slot in slot_dest:
            for key, other in self.heap.chunks.items():
                other_slots = range(other.slot,
                                    other.slot + self._chunk_pages(other))
                if slot in other_slots and key not in planned:
                    raise RelocationError(
                        f"chunk {other.vaddr:#x} also lives on slot {slot} "
                        "but is not part of the plan")

        # destination capacity: simulate occupancy before touching anything
        shadow_occ: dict[int, int] = {}
        for chunk, dests in moves:
            for src_ppn, dst_ppn, start, count in self._chunk_spans(chunk, dests):
                if dst_ppn == src_ppn:
                    raise RelocationError(
                        f"chunk {chunk.vaddr:#x} already lives on page {dst_ppn}")
                if dst_ppn not in self.heap.page_occ and dst_ppn not in self._free_pages:
                    raise RelocationError(f"page {dst_ppn} is not available")
                occ = shadow_occ.get(dst_ppn)
                if occ is None:
                    occ = self.heap.page_occ.get(dst_ppn, 0)
                mask = ((1 << count) - 1) << start
                if occ & mask:
                    raise RelocationError(
                        f"destination page {dst_ppn} lines "
                        f"[{start}, {start + count}) already occupied")
                shadow_occ[dst_ppn] = occ | mask

        touched_sources: set[int] = set()
        for chunk, dests in moves:
            for src_ppn, dst_ppn, start, count in self._chunk_spans(chunk, dests):
                if dst_ppn in self._free_pages:
                    self._take_specific_page(dst_ppn)
                    self.heap.page_occ[dst_ppn] = 0
                for i in range(count):
                    src_line = src_ppn * LINES_PER_PAGE + start + i
                    dst_line = dst_ppn * LINES_PER_PAGE + start + i
                    data = self.engine.line_read(src_line * LINE_SIZE, chunk.owner)
                    self.engine.line_write_full(dst_line * LINE_SIZE, chunk.owner,
                                                data)
                self._mark_lines(src_ppn, start, count, used=False)
                self._mark_lines(dst_ppn, start, count, used=True)
                touched_sources.add(src_ppn)
            first_dst = dests[0]
            in_page = chunk.line_start % LINES_PER_PAGE
            chunk.line_start = first_dst * LINES_PER_PAGE + in_page

        # retarget slots and the PTEs of every window that maps them
        for slot, dst in slot_dest.items():
            self.heap.slot_map[slot] = dst
            for desc in self.sandboxes.values():
                if desc.status == LIVE and slot in desc.mapped_slots:
                    self.memsys.map_page(
                        desc.base + HEAP_BASE_OFF + slot * PAGE_SIZE,
                        dst, desc.keyid, PERM_R | PERM_W)

        reclaimed = []
        for ppn in sorted(touched_sources):
            if self.heap.page_occ.get(ppn) == 0:
                self._retire_heap_page(ppn)
                reclaimed.append(ppn)
        return reclaimed

    def _chunk_pages(self, chunk: Chunk) -> int:
        return ((chunk.line_end - 1) // LINES_PER_PAGE
                - chunk.line_start // LINES_PER_PAGE + 1)

    def _chunk_spans(self, chunk: Chunk, dests: list[int]):
        """Per touched page: (src_ppn, dst_ppn, first line in page, count)."""
        spans = []
        line = chunk.line_start
        remaining = chunk.nlines
        for dst in dests:
            start = line % LINES_PER_PAGE
            count = min(LINES_PER_PAGE - start, remaining)
            spans.append((line // LINES_PER_PAGE, dst, start, count))
            line += count
            remaining -= count
        return spans

    def _retire_heap_page(self, ppn: int) -> None:
        dead_slots = [s for s, p in self.heap.slot_map.items() if p == ppn]
        for slot in dead_slots:
            for desc in self.sandboxes.values():
                self._unmap_slot(desc, slot)
            del self.heap.slot_map[slot]
        del self.heap.page_occ[ppn]
        self._release_page(ppn)

    # -- syscall gateway -----------------------------------------------------

    def runtime_call(self, desc: SandboxDescriptor, call_id: int,
                     args: tuple[int, int, int]) -> int:
        """Validated syscall dispatch; results land in sandbox state only."""
        self._require_live(desc)
        if not 1 <= call_id <= len(RUNTIME_CALLS):
            raise SimError(f"unknown runtime call {call_id}")
        name = RUNTIME_CALLS[call_id - 1]
        if name == "alloc":
            return self.sbx_alloc(desc, args[0])
        if name == "free":
            self._validate_window_ptr(desc, args[0], 1)
            self.sbx_free(desc, args[0])
            return 0
        if name == "write_out":
            addr, length = args[0], args[1]
            if not 0 < length <= _WRITE_OUT_LIMIT:
                raise ArgValidationError(f"write_out length {length} out of range")
            self._validate_window_ptr(desc, addr, length)
            desc.output += self.memsys.mem_read(addr, length)
            return length
        if name == "yield":
            desc.vm.yielded = True
            return 0
        if name == "exit":
            self.terminate(desc, "clean")
            raise ExitProgram(args[0])
        raise SimError(f"unhandled runtime call {name}")  # pragma: no cover

    def _validate_window_ptr(self, desc: SandboxDescriptor, addr: int,
                             length: int) -> None:
        first = addr >> self.layout.offset_bits
        last = (addr + length - 1) >> self.layout.offset_bits
        if first != desc.alias or last != desc.alias:
            raise ArgValidationError(
                f"address {addr:#x}+{length} outside alias window {desc.alias}")

    # -- violation handling -----------------------------------------------------

    def line_owner(self, paddr_line: int) -> int | None:
        """Runtime-records owner of a physical line (chunks, stack, static)."""
        line = paddr_line // LINE_SIZE
        for chunk in self.heap.chunks.values():
            if chunk.line_start <= line < chunk.line_end:
                return chunk.owner
        ppn = paddr_line // PAGE_SIZE
        for desc in self.sandboxes.values():
            if desc.status == LIVE:
                for _, owned_ppn in desc.exclusive_pages:
                    if owned_ppn == ppn:
                        return desc.keyid
        return None

    def handle_violation(self, desc: SandboxDescriptor, trap: SimError) -> Disposition:
        """Dispose of a trapped sandbox; other sandboxes are unaffected.

        A sandbox whose *own* line fails its MAC was corrupted by a
        foreign partial write: its computation stops but it stays live,
        and the writer is flagged using the simulator-side attribution
        record.  Every other trap terminates the offender.
        """
        if isinstance(trap, IntegrityViolation):
            owner = self.line_owner(trap.paddr_line)
            cell = self.engine.phys.cells.get(trap.paddr_line)
            if (owner == desc.keyid and cell is not None
                    and cell.last_writer != desc.keyid):
                writer = cell.last_writer
                writer_desc = self.sandboxes.get(writer)
                if writer_desc is not None:
                    writer_desc.flagged_for.append(trap.paddr_line)
                self.events.append({
                    "event": "corruption",
                    "victim": desc.name,
                    "paddr_line": trap.paddr_line,
                    "attributed_writer": writer,
                })
                return Disposition("corruption_reported", trap_reason(trap),
                                   paddr_line=trap.paddr_line,
                                   attributed_writer=writer)
        reason = trap_reason(trap)
        self.events.append({
            "event": "violation",
            "sandbox": desc.name,
            "reason": reason,
            "detail": str(trap),
        })
        self.terminate(desc, reason)
        return Disposition("terminated", reason,
                           paddr_line=getattr(trap, "paddr_line", None))

    def terminate(self, desc: SandboxDescriptor, reason: str) -> None:
        """Terminate and reclaim: keyID returns to the pool only after
        every line the sandbox owned is re-initialized under the default
        key, so a successor inheriting the keyID can never read stale
        plaintext."""
        if desc.status == TERMINATED:
            return
        desc.status = TERMINATED
        desc.termination_reason = reason
        self.sandboxes.pop(desc.keyid, None)
        self._reclaim(desc)

    def _reclaim(self, desc: SandboxDescriptor) -> None:
        for key, chunk in list(self.heap.chunks.items()):
            if chunk.owner == desc.keyid:
                for line in range(chunk.line_start, chunk.line_end):
                    self.engine.line_write_full(line * LINE_SIZE, 0, _ZERO_LINE)
                self._free_chunk_lines(chunk)
                del self.heap.chunks[key]
        for slot in list(desc.mapped_slots):
            self._unmap_slot(desc, slot)
        for vaddr_page, ppn in desc.exclusive_pages:
            base_paddr = ppn * PAGE_SIZE
            for line in range(LINES_PER_PAGE):
                addr = base_paddr + line * LINE_SIZE
                if addr in self.engine.phys.cells:
                    self.engine.line_write_full(addr, 0, _ZERO_LINE)
            self.memsys.unmap_page(vaddr_page)
            self._release_page(ppn)
        desc.exclusive_pages.clear()
        self._release_keyid(desc.keyid)

    # -- execution -----------------------------------------------------------

    def run_sandbox(self, desc: SandboxDescriptor, fuel: int) -> str:
        """Run one sandbox; traps are routed through handle_violation."""
        self._require_live(desc)
        status = desc.vm.run(fuel)
        if status == TRAPPED and not isinstance(desc.vm.trap, FuelExhausted):
            self.handle_violation(desc, desc.vm.trap)
        return status

    def run_round_robin(self, slice_steps: int = 64,
                        max_rounds: int = 10_000) -> None:
        """Cooperative scheduler: cycle live runnable sandboxes."""
        for _ in range(max_rounds):
            progressed = False
            for desc in list(self.sandboxes.values()):
                if desc.status != LIVE or desc.vm.status != RUNNING:
                    continue
                status = desc.vm.run_slice(slice_steps)
                progressed = True
                if status == TRAPPED and not isinstance(desc.vm.trap, FuelExhausted):
                    self.handle_violation(desc, desc.vm.trap)
            if not progressed:
                return

    # -- introspection ------------------------------------------------------------

    def allocator_stats(self) -> dict:
        return {
            "heap_pages": len(self.heap.page_occ),
            "live_chunks": len(self.heap.chunks),
            "lines_in_use": self.heap.lines_in_use(),
            "free_pages": len(self._free_pages),
        }

    def line_ownership(self) -> dict[int, int]:
        """Allocator's view: physical line index -> owner keyid (heap only)."""
        owners: dict[int, int] = {}
        for chunk in self.heap.chunks.values():
            for line in range(chunk.line_start, chunk.line_end):
                owners[line] = chunk.owner
        return owners
