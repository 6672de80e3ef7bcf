"""Rewrites programs so every memory access stays inside its sandbox.

Data confinement: each load/store whose base register is not rsp/rbp
gets its pointer truncated to the in-window offset width and rebased,
either implicitly through gs-relative addressing (one inserted
instruction) or explicitly by OR-ing in the reserved base register r15
(two inserted instructions).  Stack-relative operands are trusted and
left alone; instead, every instruction that restores rsp or rbp from
memory or another register is followed by the same truncate-and-rebase
sequence on that register.

Code confinement (``isolate_code``): indirect branch targets are passed
through ``maskcode`` first, returns are expanded into a
pop/maskcode/jmpreg sequence, and direct targets are checked at rewrite
time against the code region and the trusted-runtime call table.

r14 is the designated scratch register: input programs may use it, but
its value is clobbered at every instrumentation point (a documented
calling convention).  Inserted instructions never touch the zero-flag.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import RewriteError
from .isa import (
    AliasRef,
    BASE_REGISTER,
    CodeIndex,
    GP_REGISTERS,
    Imm,
    Ins,
    Label,
    Mem,
    Program,
    Reg,
    RtTarget,
    SCRATCH_REGISTER,
    STACK_REGISTERS,
)

MODE_GS = "gs"
MODE_R15 = "r15"


@dataclass(frozen=True)
class InstrumentationConfig:
    mode: str = MODE_GS
    offset_bits: int = 48
    emit_assertions: bool = False
    isolate_code: bool = True
    code_capacity: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in (MODE_GS, MODE_R15):
            raise RewriteError(f"unknown mode {self.mode!r}")

    @property
    def truncation_mask(self) -> int:
        return (1 << self.offset_bits) - 1


@dataclass
class InstrumentationReport:
    rewritten_loads: int = 0
    rewritten_stores: int = 0
    inserted_instructions: int = 0
    masked_branches: int = 0
    rets_expanded: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "rewritten_loads": self.rewritten_loads,
            "rewritten_stores": self.rewritten_stores,
            "inserted_instructions": self.inserted_instructions,
            "masked_branches": self.masked_branches,
            "rets_expanded": self.rets_expanded,
        }


def _uses_register(ins: Ins, reg: str) -> bool:
    for op in ins.ops:
        if isinstance(op, Reg) and op.name == reg:
            return True
        if isinstance(op, AliasRef) and op.reg == reg:
            return True
        if isinstance(op, Mem) and (op.base == reg or op.index == reg):
            return True
    return False


def _restored_stack_register(ins: Ins) -> str | None:
    """Stack register written from memory or a general register, if any.

    Moves between rsp and rbp themselves (frame setup and teardown) are
    trusted, as both registers are maintained by instrumented code.
    """
    if ins.op in ("pop", "load") and ins.ops[0].name in STACK_REGISTERS:
        return ins.ops[0].name
    if (ins.op == "mov" and ins.ops[0].name in STACK_REGISTERS
            and ins.ops[1].name in GP_REGISTERS):
        return ins.ops[0].name
    return None


class _Rewriter:
    def __init__(self, config: InstrumentationConfig):
        self.config = config
        self.report = InstrumentationReport()
        self.out: list[Ins] = []
        self.index_map: list[int] = []  # original index -> new index

    def _emit(self, ins: Ins) -> None:
        self.out.append(ins)

    def _insert(self, op: str, *ops) -> None:
        self._emit(Ins(op, tuple(ops), inserted=True))
        self.report.inserted_instructions += 1

    def _mask_into_scratch(self, src: str) -> None:
        """Truncate ``src`` into r14 and, in r15 mode, rebase it."""
        self._insert("and_keepflags", Reg(SCRATCH_REGISTER), Reg(src),
                     Imm(self.config.truncation_mask))
        if self.config.mode == MODE_R15:
            self._insert("or", Reg(SCRATCH_REGISTER), Reg(SCRATCH_REGISTER),
                         Reg(BASE_REGISTER))

    def _assert_scratch(self) -> None:
        if self.config.emit_assertions:
            self._insert("assert_alias",
                         AliasRef(SCRATCH_REGISTER, gs=self.config.mode == MODE_GS))

    def _rewrite_access(self, ins: Ins, mem_pos: int) -> None:
        mem: Mem = ins.ops[mem_pos]
        if mem.index is None:
            # spec form: mask the pointer register, keep the displacement
            self._mask_into_scratch(mem.base)
            new_mem = Mem(base=SCRATCH_REGISTER, disp=mem.disp,
                          segment=MODE_GS if self.config.mode == MODE_GS else None)
        else:
            # fold the full effective address first, then confine it
            self._insert("lea", Reg(SCRATCH_REGISTER), mem)
            self._mask_into_scratch(SCRATCH_REGISTER)
            new_mem = Mem(base=SCRATCH_REGISTER,
                          segment=MODE_GS if self.config.mode == MODE_GS else None)
        self._assert_scratch()
        ops = list(ins.ops)
        ops[mem_pos] = new_mem
        self._emit(Ins(ins.op, tuple(ops)))
        if ins.op == "load":
            self.report.rewritten_loads += 1
        else:
            self.report.rewritten_stores += 1

    def _instrument_restore(self, reg: str) -> None:
        self._insert("and_keepflags", Reg(reg), Reg(reg),
                     Imm(self.config.truncation_mask))
        base = Reg("gs") if self.config.mode == MODE_GS else Reg(BASE_REGISTER)
        self._insert("or", Reg(reg), Reg(reg), base)
        if self.config.emit_assertions:
            self._insert("assert_alias", AliasRef(reg, gs=False))

    def _check_direct_target(self, ins: Ins, program: Program) -> None:
        target = ins.ops[0]
        if isinstance(target, RtTarget):
            if ins.op != "call":
                raise RewriteError(f"{ins.op} cannot target the runtime call table")
            return
        if isinstance(target, Label):
            index = program.labels[target.name]
        else:
            index = target.index
        # a target one past the end lands on the halt padding, which is fine
        if not 0 <= index <= len(program.instructions):
            raise RewriteError(
                f"direct target {index} outside code region of "
                f"{len(program.instructions)} instructions")

    def run(self, program: Program) -> Program:
        cfg = self.config
        for i, ins in enumerate(program.instructions):
            self.index_map.append(len(self.out))
            if cfg.mode == MODE_R15 and _uses_register(ins, BASE_REGISTER):
                raise RewriteError(
                    f"instruction {i} uses reserved register {BASE_REGISTER}")
            if ins.op in ("load", "store"):
                mem_pos = 1 if ins.op == "load" else 0
                mem: Mem = ins.ops[mem_pos]
                if mem.base not in STACK_REGISTERS:
                    self._rewrite_access(ins, mem_pos)
                else:
                    self._emit(ins)
            elif cfg.isolate_code and ins.op in ("jmpreg", "callreg"):
                self._insert("maskcode", ins.ops[0])
                self.report.masked_branches += 1
                self._emit(ins)
            elif cfg.isolate_code and ins.op == "ret":
                # pop stands in for the original return's stack effect;
                # the masked jump is the inserted confinement
                self._emit(Ins("pop", (Reg(SCRATCH_REGISTER),)))
                self._insert("maskcode", Reg(SCRATCH_REGISTER))
                self._insert("jmpreg", Reg(SCRATCH_REGISTER))
                self.report.rets_expanded += 1
            else:
                if cfg.isolate_code and ins.op in ("jmp", "jcc", "call"):
                    self._check_direct_target(ins, program)
                self._emit(ins)
            restored = _restored_stack_register(ins)
            if restored is not None:
                self._instrument_restore(restored)
        self.index_map.append(len(self.out))
        if cfg.code_capacity is not None and len(self.out) > cfg.code_capacity:
            raise RewriteError(
                f"instrumented program ({len(self.out)} instructions) exceeds "
                f"code capacity {cfg.code_capacity}")

        new_labels = {name: self.index_map[idx] for name, idx in program.labels.items()}
        rewritten = self._remap_targets(self.out, program)
        return Program(instructions=rewritten, labels=new_labels,
                       static_data=program.static_data,
                       landing_sites=self.index_map[:-1])

    def _remap_targets(self, instructions: list[Ins], program: Program) -> list[Ins]:
        out = []
        for ins in instructions:
            if ins.op in ("jmp", "jcc", "call") and isinstance(ins.ops[0], CodeIndex):
                old = ins.ops[0].index
                if 0 <= old < len(self.index_map):
                    ins = Ins(ins.op, (CodeIndex(self.index_map[old]),), ins.inserted)
            out.append(ins)
        return out


def instrument(program: Program,
               config: InstrumentationConfig) -> tuple[Program, InstrumentationReport]:
    """Rewrite ``program`` for sandboxed execution under ``config``.

    Returns the instrumented program (labels remapped to their new
    positions) and a report of what was rewritten.
    """
    rewriter = _Rewriter(config)
    result = rewriter.run(program)
    return result, rewriter.report
