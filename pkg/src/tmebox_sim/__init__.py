"""Desk-scale simulator of multi-key memory encryption for in-process
sandbox isolation: encryption engine with per-line integrity, keyID
page tables with aliasing, a small register-machine ISA with compiler
instrumentation, and a trusted runtime with a cache-line-granular
allocator."""

from .engine import (
    CacheLineCell,
    Engine,
    EngineConfig,
    LINE_SIZE,
    PAGE_SIZE,
    PhysicalMemory,
    engine_new,
)
from .errors import SimError
from .instrument import InstrumentationConfig, InstrumentationReport, instrument
from .isa import Program, format_program, parse_program
from .memory import AddressLayout, MemorySystem, PageTableEntry, PERM_R, PERM_W, PERM_X
from .runtime import RuntimeConfig, SandboxDescriptor, SandboxRuntime
from .scenario import ScenarioConfig, run_overhead_report, run_scenario
from .vm import VmState

__all__ = [
    "AddressLayout",
    "CacheLineCell",
    "Engine",
    "EngineConfig",
    "InstrumentationConfig",
    "InstrumentationReport",
    "LINE_SIZE",
    "MemorySystem",
    "PAGE_SIZE",
    "PERM_R",
    "PERM_W",
    "PERM_X",
    "PageTableEntry",
    "PhysicalMemory",
    "Program",
    "RuntimeConfig",
    "SandboxDescriptor",
    "SandboxRuntime",
    "ScenarioConfig",
    "SimError",
    "VmState",
    "engine_new",
    "format_program",
    "instrument",
    "parse_program",
    "run_overhead_report",
    "run_scenario",
]
