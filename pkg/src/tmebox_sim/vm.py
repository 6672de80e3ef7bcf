"""Interpreter for the register-machine ISA.

One ``VmState`` executes one sandbox's code against the shared memory
system.  Code lives in a per-sandbox instruction array addressed as
``code_base + index``; the array is padded with ``halt`` to a power of
two so that ``maskcode`` can confine any 64-bit value to the region
with a single bitwise AND.  When the loaded program carries landing
sites (instrumented programs do), ``maskcode`` additionally snaps the
masked index down to the nearest pseudo-instruction head, so a forged
branch target can never enter the middle of a guard sequence - the
software analog of bundle-aligned SFI masking.  Every fault raised by
the memory system or the engine is converted into a trap on the state,
never a host error, so a host can keep scheduling other sandboxes
after one traps.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from .errors import CodeFault, FuelExhausted, SandboxEscapeAssert, SimError
from .isa import (
    AliasRef,
    CodeIndex,
    Imm,
    Ins,
    Mem,
    Reg,
    RtTarget,
    RUNTIME_CALL_IDS,
    WRITABLE_REGISTERS,
)

if TYPE_CHECKING:
    from .memory import MemorySystem

_MASK64 = (1 << 64) - 1

RUNNING = "running"
HALTED = "halted"
TRAPPED = "trapped"

_HALT_INS = Ins("halt")


class ExitProgram(Exception):
    """Raised by the trusted runtime's exit call to stop the VM cleanly."""

    def __init__(self, code: int = 0):
        super().__init__(f"exit({code})")
        self.code = code


def padded_code_size(n: int) -> int:
    """Smallest power of two strictly greater than ``n``.

    The extra slot guarantees a label one past the last instruction
    still lands on halt padding inside the code region.
    """
    size = 1
    while size <= n:
        size <<= 1
    return size


def pad_code(instructions: list[Ins]) -> list[Ins]:
    out = list(instructions)
    out.extend([_HALT_INS] * (padded_code_size(len(out)) - len(out)))
    return out


@dataclass
class VmCounters:
    total: int = 0
    loads: int = 0
    stores: int = 0
    extra_instrumentation: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "total": self.total,
            "loads": self.loads,
            "stores": self.stores,
            "extra_instrumentation": self.extra_instrumentation,
        }


class VmState:
    """Register file, flag, code region, and trap status of one sandbox."""

    def __init__(self, *, code: list[Ins], code_base: int, alias: int,
                 offset_bits: int, mode: str, memsys: MemorySystem,
                 runtime=None, sandbox=None, audit: bool = False,
                 landing_sites: list[int] | None = None):
        self.code = pad_code(code)
        self.code_base = code_base
        self.code_size = len(self.code)
        if code_base % self.code_size != 0:
            raise ValueError("code_base must be aligned to the padded code size")
        if landing_sites is None:
            self.landing_sites = None
        else:
            # halt padding is always a safe landing area
            self.landing_sites = sorted(
                set(landing_sites) | set(range(len(code), self.code_size)) | {0})
        self.alias = alias
        self.offset_bits = offset_bits
        self.mode = mode
        self.memsys = memsys
        self.runtime = runtime
        self.sandbox = sandbox
        self.regs: dict[str, int] = {r: 0 for r in WRITABLE_REGISTERS}
        self.gs = 0
        self.pc = code_base
        self.zf = False
        self.status = RUNNING
        self.trap: SimError | None = None
        self.exit_code: int | None = None
        self.yielded = False
        self.counters = VmCounters()
        # audit trail for verification runs: effective addresses of every
        # completed data access, and every executed pc
        self.audit_accesses: list[int] | None = [] if audit else None
        self.audit_pcs: list[int] | None = [] if audit else None

    # -- operand evaluation --------------------------------------------------

    def _read(self, reg: str) -> int:
        return self.gs if reg == "gs" else self.regs[reg]

    def _write(self, reg: str, value: int) -> None:
        self.regs[reg] = value & _MASK64

    def _value(self, op: Reg | Imm) -> int:
        return op.value if isinstance(op, Imm) else self._read(op.name)

    def _ea(self, m: Mem) -> int:
        ea = self._read(m.base) + m.disp
        if m.index is not None:
            ea += self._read(m.index) * m.scale
        if m.segment == "gs":
            ea += self.gs
        return ea & _MASK64

    # -- execution -------------------------------------------------------------

    def step(self) -> str:
        """Fetch, decode, execute one instruction; returns the new status."""
        if self.status != RUNNING:
            return self.status
        idx = self.pc - self.code_base
        if not 0 <= idx < self.code_size:
            self.status = TRAPPED
            self.trap = CodeFault(self.pc)
            return self.status
        if self.audit_pcs is not None:
            self.audit_pcs.append(self.pc)
        ins = self.code[idx]
        self.counters.total += 1
        if ins.inserted:
            self.counters.extra_instrumentation += 1
        try:
            _DISPATCH[ins.op](self, ins)
        except ExitProgram as e:
            self.status = HALTED
            self.exit_code = e.code
        except SimError as e:
            self.status = TRAPPED
            self.trap = e
        return self.status

    def run(self, fuel: int) -> str:
        """Step until halt, trap, or the fuel budget is spent."""
        if fuel <= 0:
            raise ValueError("fuel must be positive")
        for _ in range(fuel):
            if self.step() != RUNNING:
                return self.status
        if self.status == RUNNING:
            self.status = TRAPPED
            self.trap = FuelExhausted(f"no halt within {fuel} instructions")
        return self.status

    def run_slice(self, max_steps: int) -> str:
        """Cooperative slice: stops early when the program yields."""
        self.yielded = False
        for _ in range(max_steps):
            if self.step() != RUNNING or self.yielded:
                break
        return self.status

    # -- instruction semantics ----------------------------------------------

    def _branch_to(self, target) -> None:
        if isinstance(target, CodeIndex):
            self.pc = (self.code_base + target.index) & _MASK64
        else:
            raise SimError(f"unresolved branch target {target}")

    def _runtime_call(self, call_id: int) -> None:
        if self.runtime is None:
            raise SimError("no trusted runtime attached")
        args = (self.regs["r1"], self.regs["r2"], self.regs["r3"])
        result = self.runtime.runtime_call(self.sandbox, call_id, args)
        self.regs["r0"] = result & _MASK64

    def _op_mov(self, ins: Ins) -> None:
        self._write(ins.ops[0].name, self._read(ins.ops[1].name))
        self.pc += 1

    def _op_movimm(self, ins: Ins) -> None:
        self._write(ins.ops[0].name, ins.ops[1].value)
        self.pc += 1

    def _op_add(self, ins: Ins) -> None:
        v = (self._read(ins.ops[1].name) + self._value(ins.ops[2])) & _MASK64
        self._write(ins.ops[0].name, v)
        self.zf = v == 0
        self.pc += 1

    def _op_and_keepflags(self, ins: Ins) -> None:
        v = self._read(ins.ops[1].name) & self._value(ins.ops[2])
        self._write(ins.ops[0].name, v)
        self.pc += 1

    def _op_or(self, ins: Ins) -> None:
        # bitwise ops leave the zero-flag untouched so base-insertion
        # sequences stay flags-transparent
        v = self._read(ins.ops[1].name) | self._value(ins.ops[2])
        self._write(ins.ops[0].name, v)
        self.pc += 1

    def _op_lea(self, ins: Ins) -> None:
        self._write(ins.ops[0].name, self._ea(ins.ops[1]))
        self.pc += 1

    def _op_load(self, ins: Ins) -> None:
        ea = self._ea(ins.ops[1])
        data = self.memsys.mem_read(ea, 8)
        self._write(ins.ops[0].name, int.from_bytes(data, "little"))
        self.counters.loads += 1
        if self.audit_accesses is not None:
            self.audit_accesses.append(ea)
        self.pc += 1

    def _op_store(self, ins: Ins) -> None:
        ea = self._ea(ins.ops[0])
        value = self._read(ins.ops[1].name)
        self.memsys.mem_write(ea, value.to_bytes(8, "little"))
        self.counters.stores += 1
        if self.audit_accesses is not None:
            self.audit_accesses.append(ea)
        self.pc += 1

    def _op_cmp(self, ins: Ins) -> None:
        self.zf = self._read(ins.ops[0].name) == (self._value(ins.ops[1]) & _MASK64)
        self.pc += 1

    def _op_jcc(self, ins: Ins) -> None:
        if self.zf:
            self._branch_to(ins.ops[0])
        else:
            self.pc += 1

    def _op_jmp(self, ins: Ins) -> None:
        self._branch_to(ins.ops[0])

    def _op_jmpreg(self, ins: Ins) -> None:
        self.pc = self._read(ins.ops[0].name)

    def _op_call(self, ins: Ins) -> None:
        target = ins.ops[0]
        if isinstance(target, RtTarget):
            self._runtime_call(RUNTIME_CALL_IDS[target.name])
            self.pc += 1
            return
        self._push(self.pc + 1)
        self._branch_to(target)

    def _op_callreg(self, ins: Ins) -> None:
        target = self._read(ins.ops[0].name)
        self._push(self.pc + 1)
        self.pc = target

    def _push(self, value: int) -> None:
        rsp = (self.regs["rsp"] - 8) & _MASK64
        self.memsys.mem_write(rsp, (value & _MASK64).to_bytes(8, "little"))
        self.regs["rsp"] = rsp
        if self.audit_accesses is not None:
            self.audit_accesses.append(rsp)

    def _pop(self) -> int:
        rsp = self.regs["rsp"]
        data = self.memsys.mem_read(rsp, 8)
        self.regs["rsp"] = (rsp + 8) & _MASK64
        if self.audit_accesses is not None:
            self.audit_accesses.append(rsp)
        return int.from_bytes(data, "little")

    def _op_push(self, ins: Ins) -> None:
        self._push(self._read(ins.ops[0].name))
        self.pc += 1

    def _op_pop(self, ins: Ins) -> None:
        self._write(ins.ops[0].name, self._pop())
        self.pc += 1

    def _op_ret(self, ins: Ins) -> None:
        self.pc = self._pop()

    def _op_maskcode(self, ins: Ins) -> None:
        idx = self._read(ins.ops[0].name) & (self.code_size - 1)
        if self.landing_sites is not None:
            idx = self.landing_sites[bisect_right(self.landing_sites, idx) - 1]
        self._write(ins.ops[0].name, self.code_base + idx)
        self.pc += 1

    def _op_syscall(self, ins: Ins) -> None:
        self._runtime_call(self.regs["r0"])
        self.pc += 1

    def _op_assert_alias(self, ins: Ins) -> None:
        ref: AliasRef = ins.ops[0]
        v = self._read(ref.reg)
        if ref.gs:
            v = (v + self.gs) & _MASK64
        if v >> self.offset_bits != self.alias:
            raise SandboxEscapeAssert(v, self.alias)
        self.pc += 1

    def _op_halt(self, ins: Ins) -> None:
        self.status = HALTED


_DISPATCH: dict[str, Callable[[VmState, Ins], None]] = {
    name[4:]: func
    for name, func in vars(VmState).items()
    if name.startswith("_op_")
}
