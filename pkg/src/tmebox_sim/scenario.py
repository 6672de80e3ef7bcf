"""Scenario files: a line-oriented command language driving the runtime.

One command per line, ``#`` comments.  Commands name sandboxes and heap
chunks symbolically; every READ / FORGE_READ carries an expectation
(``ok`` or ``violation``) that is checked, and any mismatch fails the
scenario while execution continues so all mismatches get listed.

Cross-sandbox accesses express the attack surface: a READ or WRITE
issued by a sandbox other than the chunk's owner computes the address
the attacker's *instrumented* code would use - the chunk's in-window
offset rebased into the acting sandbox's own window - so the access
runs under the actor's keyID and the isolation claim is what is being
tested.  FORGE_READ does the same for a raw 64-bit pointer.

The runner keeps a shadow copy of every chunk written through it and
checks successful reads against it (differential oracle).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    IntegrityViolation,
    MixedKeyAccessError,
    PageFault,
    ParseError,
    ProtectionFault,
    SimError,
    UninitializedLineError,
)
from .instrument import MODE_GS, MODE_R15
from .isa import Program, parse_program
from .runtime import RuntimeConfig, SandboxRuntime, TERMINATED, trap_reason
from .vm import TRAPPED

SCHEMA_VERSION = 1

_VIOLATION_TYPES = (IntegrityViolation, PageFault, ProtectionFault,
                    MixedKeyAccessError, UninitializedLineError)

_HALT_PROGRAM = "halt\n"


@dataclass(frozen=True)
class ScenarioConfig:
    keyid_bits: int = 6
    mac_bits: int = 28
    mode: str = MODE_GS
    seed: int = 0
    phys_pages: int = 1 << 16
    stack_pages: int = 2

    def runtime_config(self) -> RuntimeConfig:
        return RuntimeConfig(
            keyid_bits=self.keyid_bits,
            mac_bits=self.mac_bits,
            mode=self.mode,
            rng_seed=self.seed,
            phys_pages=self.phys_pages,
            stack_pages=self.stack_pages,
        )


@dataclass
class CommandOutcome:
    line: int
    text: str
    ok: bool
    detail: str = ""

    def as_dict(self) -> dict:
        return {"line": self.line, "text": self.text, "ok": self.ok,
                "detail": self.detail}


@dataclass
class ScenarioResult:
    passed: bool
    commands: list[CommandOutcome]
    violations: list[dict]
    counters: dict[str, int]
    allocator: dict
    pages_reclaimed: list[int]
    trace: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "passed": self.passed,
            "commands": [c.as_dict() for c in self.commands],
            "violations": self.violations,
            "counters": self.counters,
            "allocator": self.allocator,
            "pages_reclaimed": self.pages_reclaimed,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class _Var:
    owner: str
    vaddr: int
    size: int
    shadow: bytearray
    corrupted: bool = False


class _ScenarioRunner:
    def __init__(self, config: ScenarioConfig, base_dir: Path):
        self.config = config
        self.base_dir = base_dir
        self.runtime = SandboxRuntime(config.runtime_config())
        self.sandboxes: dict[str, object] = {}
        self.vars: dict[str, _Var] = {}
        self.outcomes: list[CommandOutcome] = []
        self.trace: list[str] = []
        self.pages_reclaimed: list[int] = []

    # -- helpers ---------------------------------------------------------------

    def _sandbox(self, name: str):
        desc = self.sandboxes.get(name)
        if desc is None:
            raise ParseError(f"unknown sandbox {name!r}")
        return desc

    def _var(self, name: str) -> _Var:
        var = self.vars.get(name)
        if var is None:
            raise ParseError(f"unknown chunk {name!r}")
        return var

    def _actor_address(self, desc, var: _Var, offset: int) -> int:
        """Address the actor's instrumented code would use for this chunk."""
        layout = self.runtime.layout
        return desc.base + layout.offset_of(var.vaddr + offset)

    def _load_program(self, spec: str) -> Program:
        if spec == "@halt":
            return parse_program(_HALT_PROGRAM)
        return parse_program((self.base_dir / spec).read_text())

    def _log(self, message: str) -> None:
        self.trace.append(message)

    # -- command execution -------------------------------------------------------

    def execute(self, lineno: int, text: str) -> CommandOutcome:
        parts = text.split()
        cmd = parts[0]
        handler = getattr(self, f"_cmd_{cmd.lower()}", None)
        if handler is None:
            raise ParseError(f"unknown command {cmd!r}", lineno)
        try:
            detail = handler(parts[1:], lineno) or ""
            outcome = CommandOutcome(lineno, text, True, detail)
        except ParseError:
            raise
        except SimError as e:
            outcome = CommandOutcome(lineno, text, False,
                                     f"{type(e).__name__}: {e}")
        except _ExpectationFailed as e:
            outcome = CommandOutcome(lineno, text, False, str(e))
        self.outcomes.append(outcome)
        self._log(f"{lineno}: {text} -> {'ok' if outcome.ok else 'FAIL'}"
                  + (f" ({outcome.detail})" if outcome.detail else ""))
        return outcome

    def _cmd_create_sandbox(self, args: list[str], lineno: int) -> str:
        if len(args) not in (2, 3):
            raise ParseError("CREATE_SANDBOX name program [gs|r15]", lineno)
        name, progspec = args[0], args[1]
        mode = args[2] if len(args) == 3 else self.config.mode
        if mode not in (MODE_GS, MODE_R15):
            raise ParseError(f"bad mode {mode!r}", lineno)
        if name in self.sandboxes:
            raise ParseError(f"sandbox {name!r} already exists", lineno)
        program = self._load_program(progspec)
        desc = self.runtime.sandbox_create(program, mode=mode, name=name)
        self.sandboxes[name] = desc
        return f"keyid={desc.keyid} base={desc.base:#x}"

    def _cmd_alloc(self, args: list[str], lineno: int) -> str:
        if len(args) != 3:
            raise ParseError("ALLOC name var size", lineno)
        name, var, size = args[0], args[1], int(args[2], 0)
        if var in self.vars:
            raise ParseError(f"chunk {var!r} already exists", lineno)
        desc = self._sandbox(name)
        vaddr = self.runtime.sbx_alloc(desc, size)
        rounded = -(-size // 64) * 64
        self.vars[var] = _Var(owner=name, vaddr=vaddr, size=rounded,
                              shadow=bytearray(rounded))
        return f"vaddr={vaddr:#x} bytes={rounded}"

    def _cmd_write(self, args: list[str], lineno: int) -> str:
        if len(args) != 4:
            raise ParseError("WRITE name var offset hexbytes", lineno)
        name, varname, offset = args[0], args[1], int(args[2], 0)
        data = bytes.fromhex(args[3])
        desc = self._sandbox(name)
        var = self._var(varname)
        addr = self._actor_address(desc, var, offset)
        self.runtime.memsys.mem_write(addr, data)
        if name == var.owner and not var.corrupted:
            var.shadow[offset:offset + len(data)] = data
        elif name != var.owner:
            var.corrupted = True
        return f"addr={addr:#x} len={len(data)}"

    def _read_with_expect(self, addr: int, length: int, expect: str,
                          lineno: int, shadow: bytes | None) -> str:
        try:
            data = self.runtime.memsys.mem_read(addr, length)
        except _VIOLATION_TYPES as e:
            if expect != "violation":
                raise _ExpectationFailed(
                    f"expected ok, got {type(e).__name__}: {e}")
            return f"violation={type(e).__name__}"
        if expect != "ok":
            raise _ExpectationFailed("expected violation, read succeeded")
        if shadow is not None and data != shadow:
            raise _ExpectationFailed(
                f"readback {data.hex()} differs from shadow {shadow.hex()}")
        return f"read={data.hex() if length <= 32 else f'{length} bytes'}"

    def _cmd_read(self, args: list[str], lineno: int) -> str:
        if len(args) != 5 or args[4] not in ("ok", "violation"):
            raise ParseError("READ name var offset len ok|violation", lineno)
        name, varname = args[0], args[1]
        offset, length, expect = int(args[2], 0), int(args[3], 0), args[4]
        desc = self._sandbox(name)
        var = self._var(varname)
        addr = self._actor_address(desc, var, offset)
        shadow = None
        if name == var.owner and not var.corrupted:
            shadow = bytes(var.shadow[offset:offset + length])
        return self._read_with_expect(addr, length, expect, lineno, shadow)

    def _cmd_forge_read(self, args: list[str], lineno: int) -> str:
        if len(args) != 3 or args[2] not in ("ok", "violation"):
            raise ParseError("FORGE_READ name rawaddr ok|violation", lineno)
        name, raw, expect = args[0], int(args[1], 0), args[2]
        desc = self._sandbox(name)
        addr = desc.base + self.runtime.layout.offset_of(raw)
        return self._read_with_expect(addr, 8, expect, lineno, None)

    def _cmd_free(self, args: list[str], lineno: int) -> str:
        if len(args) != 2:
            raise ParseError("FREE name var", lineno)
        name, varname = args[0], args[1]
        desc = self._sandbox(name)
        var = self._var(varname)
        self.runtime.sbx_free(desc, var.vaddr)
        del self.vars[varname]
        return f"vaddr={var.vaddr:#x}"

    def _cmd_relocate(self, args: list[str], lineno: int) -> str:
        if not args:
            return "empty plan"
        plan = []
        for entry in args:
            fields = entry.split(":")
            if len(fields) != 3:
                raise ParseError(f"bad plan entry {entry!r} "
                                 "(want name:var:ppn[+ppn...])", lineno)
            desc = self._sandbox(fields[0])
            var = self._var(fields[1])
            dests = [int(p, 0) for p in fields[2].split("+")]
            plan.append((desc, var.vaddr, dests))
        reclaimed = self.runtime.relocate(plan)
        self.pages_reclaimed.extend(reclaimed)
        return f"reclaimed={reclaimed}"

    def _cmd_run(self, args: list[str], lineno: int) -> str:
        if len(args) != 2:
            raise ParseError("RUN name fuel", lineno)
        desc = self._sandbox(args[0])
        status = self.runtime.run_sandbox(desc, int(args[1], 0))
        if status == TRAPPED:
            return f"trapped={trap_reason(desc.vm.trap)}"
        return status

    def _cmd_expect_terminated(self, args: list[str], lineno: int) -> str:
        if len(args) != 2:
            raise ParseError("EXPECT_TERMINATED name reason", lineno)
        desc = self._sandbox(args[0])
        if desc.status != TERMINATED:
            raise _ExpectationFailed(f"sandbox {args[0]!r} is {desc.status}")
        if desc.termination_reason != args[1]:
            raise _ExpectationFailed(
                f"terminated({desc.termination_reason}), expected {args[1]!r}")
        return f"terminated={desc.termination_reason}"


class _ExpectationFailed(Exception):
    pass


def run_scenario(path: str | Path,
                 config: ScenarioConfig | None = None) -> ScenarioResult:
    """Execute a scenario file; result.passed iff every expectation held."""
    path = Path(path)
    config = config or ScenarioConfig()
    runner = _ScenarioRunner(config, path.parent)
    text = path.read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        runner.execute(lineno, line)

    counters = {"total": 0, "loads": 0, "stores": 0, "extra_instrumentation": 0}
    for desc in runner.sandboxes.values():
        if desc.vm is not None:
            for key, value in desc.vm.counters.as_dict().items():
                counters[key] += value
    passed = all(o.ok for o in runner.outcomes)
    return ScenarioResult(
        passed=passed,
        commands=runner.outcomes,
        violations=list(runner.runtime.events),
        counters=counters,
        allocator=runner.runtime.allocator_stats(),
        pages_reclaimed=runner.pages_reclaimed,
        trace=runner.trace,
    )


def run_overhead_report(corpus_dir: str | Path, *, fuel: int = 100_000,
                        seed: int = 0, keyid_bits: int = 4) -> dict:
    """Dynamic instrumentation cost for every program in a corpus.

    Each program runs under both register modes and both isolation
    scopes; the figure of merit is the fraction of executed
    instructions that the instrumenter inserted.
    """
    corpus = sorted(Path(corpus_dir).glob("*.s"))
    report: dict = {"schema": SCHEMA_VERSION, "fuel": fuel, "programs": {}}
    for prog_path in corpus:
        source = prog_path.read_text()
        entry: dict = {}
        for mode in (MODE_GS, MODE_R15):
            for isolate_code, scope in ((False, "data_only"), (True, "code_data")):
                runtime = SandboxRuntime(RuntimeConfig(
                    keyid_bits=keyid_bits, mode=mode, rng_seed=seed,
                    isolate_code=isolate_code, stack_pages=2,
                    phys_pages=1 << 10))
                desc = runtime.sandbox_create(parse_program(source), mode=mode)
                status = runtime.run_sandbox(desc, fuel)
                c = desc.vm.counters
                entry.setdefault(mode, {})[scope] = {
                    "status": status,
                    "total": c.total,
                    "loads": c.loads,
                    "stores": c.stores,
                    "extra": c.extra_instrumentation,
                    "extra_fraction": (c.extra_instrumentation / c.total
                                       if c.total else 0.0),
                }
        report["programs"][prog_path.name] = entry
    return report
