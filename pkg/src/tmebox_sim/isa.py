"""Register-machine instruction set: data model, assembler, formatter.

The textual format is one instruction per line, ``;`` comments, and
``name:`` labels; the exact grammar is documented in docs/isa.md.
Instructions are immutable; the instrumenter builds new sequences
rather than mutating parsed ones.  Direct branch targets stay symbolic
(label name, raw index, or ``rt.<call>`` trusted-runtime entry) until a
program is loaded into a sandbox.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ParseError

GP_REGISTERS = tuple(f"r{i}" for i in range(16))
STACK_REGISTERS = ("rsp", "rbp")
WRITABLE_REGISTERS = frozenset(GP_REGISTERS + STACK_REGISTERS)
READABLE_REGISTERS = WRITABLE_REGISTERS | {"gs"}

SCRATCH_REGISTER = "r14"
BASE_REGISTER = "r15"

OPCODES = frozenset({
    "mov", "movimm", "add", "and_keepflags", "or", "lea", "load", "store",
    "cmp", "jcc", "jmp", "jmpreg", "call", "callreg", "push", "pop", "ret",
    "maskcode", "syscall", "assert_alias", "halt",
})

RUNTIME_CALLS = ("alloc", "free", "write_out", "yield", "exit")
RUNTIME_CALL_IDS = {name: i + 1 for i, name in enumerate(RUNTIME_CALLS)}

_MASK64 = (1 << 64) - 1
_DISP_MIN, _DISP_MAX = -(1 << 31), (1 << 31) - 1


@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return hex(self.value) if abs(self.value) > 255 else str(self.value)


@dataclass(frozen=True)
class Mem:
    """Memory operand: optional gs segment, base, optional index*scale, disp."""

    base: str
    index: str | None = None
    scale: int = 1
    disp: int = 0
    segment: str | None = None

    def __str__(self) -> str:
        inner = self.base
        if self.index is not None:
            inner += f"+{self.index}*{self.scale}"
        if self.disp:
            inner += f"+{self.disp}" if self.disp > 0 else str(self.disp)
        prefix = "gs:" if self.segment == "gs" else ""
        return f"{prefix}[{inner}]"


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class CodeIndex:
    index: int

    def __str__(self) -> str:
        return str(self.index)


@dataclass(frozen=True)
class RtTarget:
    name: str

    def __str__(self) -> str:
        return f"rt.{self.name}"


@dataclass(frozen=True)
class AliasRef:
    """assert_alias operand: a register, optionally gs-adjusted."""

    reg: str
    gs: bool = False

    def __str__(self) -> str:
        return f"gs:{self.reg}" if self.gs else self.reg


Operand = Reg | Imm | Mem | Label | CodeIndex | RtTarget | AliasRef


@dataclass(frozen=True)
class Ins:
    op: str
    ops: tuple[Operand, ...] = ()
    # marks instructions the instrumenter added; survives the textual
    # format as a "+" prefix so rewritten files keep their accounting
    inserted: bool = False

    def __str__(self) -> str:
        if not self.ops:
            return self.op
        return f"{self.op} " + ", ".join(str(o) for o in self.ops)

    def text(self) -> str:
        return ("+" if self.inserted else "") + str(self)


@dataclass
class Program:
    instructions: list[Ins] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)
    static_data: bytes = b""
    # indices that masked indirect branches may land on (the heads of
    # the instrumenter's pseudo-instruction groups, the software analog
    # of SFI bundle alignment); None means every index is a valid target
    landing_sites: list[int] | None = None

    def __len__(self) -> int:
        return len(self.instructions)

    def resolved(self) -> list[Ins]:
        """Copy with Label targets replaced by CodeIndex operands."""
        out = []
        for ins in self.instructions:
            ops = tuple(
                CodeIndex(self.labels[o.name]) if isinstance(o, Label) else o
                for o in ins.ops)
            out.append(Ins(ins.op, ops, ins.inserted) if ops != ins.ops else ins)
        return out


_LABEL_RE = re.compile(r"^([A-Za-z_][\w.]*):")
_MEM_RE = re.compile(
    r"^(?:(gs):)?\[\s*(\w+)\s*"
    r"(?:\+\s*(\w+)\s*\*\s*([1248]))?\s*"
    r"(?:([+-])\s*(0x[0-9a-fA-F]+|\d+))?\s*\]$")
_INT_RE = re.compile(r"^-?(?:0x[0-9a-fA-F]+|\d+)$")


def _parse_int(text: str, line: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(f"bad integer {text!r}", line) from None


def _parse_reg(text: str, line: int, *, writable: bool) -> Reg:
    allowed = WRITABLE_REGISTERS if writable else READABLE_REGISTERS
    if text not in allowed:
        raise ParseError(f"bad register {text!r}", line)
    return Reg(text)


def _parse_mem(text: str, line: int, *, allow_segment: bool = True) -> Mem:
    m = _MEM_RE.match(text)
    if not m:
        raise ParseError(f"bad memory operand {text!r}", line)
    segment, base, index, scale, sign, disp = m.groups()
    if segment and not allow_segment:
        raise ParseError("segment prefix not allowed here", line)
    if base not in READABLE_REGISTERS - {"gs"}:
        raise ParseError(f"bad base register {base!r}", line)
    if index is not None and index not in READABLE_REGISTERS - {"gs"}:
        raise ParseError(f"bad index register {index!r}", line)
    d = 0
    if disp is not None:
        d = _parse_int(disp, line)
        if sign == "-":
            d = -d
        if not _DISP_MIN <= d <= _DISP_MAX:
            raise ParseError(f"displacement {d} outside signed 32 bits", line)
    return Mem(base=base, index=index, scale=int(scale) if scale else 1,
               disp=d, segment=segment)


def _parse_target(text: str, line: int) -> Label | CodeIndex | RtTarget:
    if text.startswith("rt."):
        name = text[3:]
        if name not in RUNTIME_CALL_IDS:
            raise ParseError(f"unknown runtime entry {text!r}", line)
        return RtTarget(name)
    if _INT_RE.match(text):
        return CodeIndex(_parse_int(text, line))
    if re.match(r"^[A-Za-z_][\w.]*$", text) and text not in READABLE_REGISTERS:
        return Label(text)
    raise ParseError(f"bad branch target {text!r}", line)


def _parse_value(text: str, line: int) -> Reg | Imm:
    if text in READABLE_REGISTERS:
        return Reg(text)
    if _INT_RE.match(text):
        v = _parse_int(text, line)
        if not -(1 << 63) <= v < (1 << 64):
            raise ParseError(f"immediate {text} outside 64 bits", line)
        return Imm(v & _MASK64)
    raise ParseError(f"bad value operand {text!r}", line)


def _split_operands(text: str) -> list[str]:
    # split on commas outside brackets; empty segments surface as
    # arity or operand errors rather than being silently dropped
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur).strip())
    return parts


def _parse_instruction(op: str, args: list[str], line: int) -> Ins:
    def need(n: int) -> None:
        if len(args) != n:
            raise ParseError(f"{op} expects {n} operand(s), got {len(args)}", line)

    if op in ("halt", "ret", "syscall"):
        need(0)
        return Ins(op)
    if op == "mov":
        need(2)
        return Ins(op, (_parse_reg(args[0], line, writable=True),
                        _parse_reg(args[1], line, writable=False)))
    if op == "movimm":
        need(2)
        val = _parse_value(args[1], line)
        if not isinstance(val, Imm):
            raise ParseError("movimm source must be an immediate", line)
        return Ins(op, (_parse_reg(args[0], line, writable=True), val))
    if op in ("add", "and_keepflags", "or"):
        need(3)
        return Ins(op, (_parse_reg(args[0], line, writable=True),
                        _parse_reg(args[1], line, writable=False),
                        _parse_value(args[2], line)))
    if op == "lea":
        need(2)
        return Ins(op, (_parse_reg(args[0], line, writable=True),
                        _parse_mem(args[1], line, allow_segment=False)))
    if op == "load":
        need(2)
        return Ins(op, (_parse_reg(args[0], line, writable=True),
                        _parse_mem(args[1], line)))
    if op == "store":
        need(2)
        return Ins(op, (_parse_mem(args[0], line),
                        _parse_reg(args[1], line, writable=False)))
    if op == "cmp":
        need(2)
        return Ins(op, (_parse_reg(args[0], line, writable=False),
                        _parse_value(args[1], line)))
    if op in ("jcc", "jmp", "call"):
        need(1)
        return Ins(op, (_parse_target(args[0], line),))
    if op in ("jmpreg", "callreg", "push"):
        need(1)
        return Ins(op, (_parse_reg(args[0], line, writable=False),))
    if op in ("pop", "maskcode"):
        need(1)
        return Ins(op, (_parse_reg(args[0], line, writable=True),))
    if op == "assert_alias":
        need(1)
        text = args[0]
        gs = text.startswith("gs:")
        reg = text[3:] if gs else text
        if reg not in WRITABLE_REGISTERS:
            raise ParseError(f"bad register {reg!r}", line)
        return Ins(op, (AliasRef(reg, gs),))
    raise ParseError(f"unknown opcode {op!r}", line)


def parse_program(text: str) -> Program:
    """Assemble source text into a Program.

    Labels may stand alone or prefix an instruction; a label at the end
    of the file refers one past the last instruction.  ``.static``
    directives append hex bytes to the program's static data image.
    """
    prog = Program()
    pending_labels: list[tuple[str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".static"):
            blob = line[len(".static"):].strip()
            try:
                prog.static_data += bytes.fromhex(blob)
            except ValueError:
                raise ParseError(f"bad hex in .static: {blob!r}", lineno) from None
            continue
        if line.startswith(".landing"):
            try:
                prog.landing_sites = [int(t, 0)
                                      for t in line[len(".landing"):].split()]
            except ValueError:
                raise ParseError("bad .landing index list", lineno) from None
            continue
        while (m := _LABEL_RE.match(line)):
            name = m.group(1)
            if name in prog.labels or any(n == name for n, _ in pending_labels):
                raise ParseError(f"duplicate label {name!r}", lineno)
            pending_labels.append((name, lineno))
            line = line[m.end():].strip()
        if not line:
            continue
        inserted = line.startswith("+")
        if inserted:
            line = line[1:].lstrip()
        parts = line.split(None, 1)
        op = parts[0]
        args = _split_operands(parts[1]) if len(parts) > 1 else []
        ins = _parse_instruction(op, args, lineno)
        if inserted:
            ins = Ins(ins.op, ins.ops, inserted=True)
        for name, _ in pending_labels:
            prog.labels[name] = len(prog.instructions)
        pending_labels.clear()
        prog.instructions.append(ins)
    for name, _ in pending_labels:
        prog.labels[name] = len(prog.instructions)
    _check_label_refs(prog)
    return prog


def _check_label_refs(prog: Program) -> None:
    for i, ins in enumerate(prog.instructions):
        for o in ins.ops:
            if isinstance(o, Label) and o.name not in prog.labels:
                raise ParseError(f"undefined label {o.name!r} (instruction {i})")


def format_program(prog: Program) -> str:
    """Render a Program back to assembly text (inverse of parse_program)."""
    by_index: dict[int, list[str]] = {}
    for name, idx in prog.labels.items():
        by_index.setdefault(idx, []).append(name)
    lines = []
    for i, ins in enumerate(prog.instructions):
        for name in sorted(by_index.get(i, [])):
            lines.append(f"{name}:")
        lines.append(f"  {ins.text()}")
    for name in sorted(by_index.get(len(prog.instructions), [])):
        lines.append(f"{name}:")
    if prog.static_data:
        lines.append(f".static {prog.static_data.hex()}")
    if prog.landing_sites is not None:
        lines.append(".landing " + " ".join(str(i) for i in prog.landing_sites))
    return "\n".join(lines) + "\n"
