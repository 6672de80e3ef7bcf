"""Exception hierarchy shared by all simulator components.

Every fault the simulated hardware or trusted runtime can raise derives
from SimError, so VM dispatch can catch one type and convert it into a
trap without ever masking a genuine programming error in the host.
"""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulated faults."""


class ConfigError(SimError):
    """Invalid engine, layout, or runtime configuration."""


class AlignmentError(SimError):
    """Address violates a required alignment."""


class PhysRangeError(SimError):
    """Physical address outside the configured memory size."""


class KeyIdError(SimError):
    """Key identifier outside the key table."""


class UninitializedLineError(SimError):
    """Read or partial write of a cache line that has no MAC yet."""


class IntegrityViolation(SimError):
    """MAC mismatch on a line read.

    Carries the physical line address and the keyID that issued the
    failing access.
    """

    def __init__(self, paddr_line: int, keyid: int):
        super().__init__(f"MAC mismatch at line {paddr_line:#x} with keyid {keyid}")
        self.paddr_line = paddr_line
        self.keyid = keyid


class PageFault(SimError):
    """Translation of an unmapped virtual address."""

    def __init__(self, vaddr: int, detail: str = "unmapped"):
        super().__init__(f"page fault at {vaddr:#x}: {detail}")
        self.vaddr = vaddr


class ProtectionFault(SimError):
    """Access incompatible with the page permissions."""

    def __init__(self, vaddr: int, access: str):
        super().__init__(f"protection fault at {vaddr:#x} for {access}")
        self.vaddr = vaddr
        self.access = access


class MixedKeyAccessError(SimError):
    """Single access straddles pages carrying different keyIDs."""


class WxViolationError(SimError):
    """Mapping would make a page both writable and executable."""


class SandboxEscapeAssert(SimError):
    """Verification-mode alias assertion failed."""

    def __init__(self, value: int, expected_alias: int):
        super().__init__(
            f"address {value:#x} does not carry alias {expected_alias}")
        self.value = value
        self.expected_alias = expected_alias


class FuelExhausted(SimError):
    """Instruction budget ran out before the program stopped."""


class CodeFault(SimError):
    """Program counter left the sandbox code region."""

    def __init__(self, pc: int):
        super().__init__(f"pc {pc:#x} outside code region")
        self.pc = pc


class ParseError(SimError):
    """Malformed assembly or scenario input."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RewriteError(SimError):
    """Program cannot be instrumented as requested."""


class CapacityError(SimError):
    """No free keyID left for another sandbox."""


class SandboxStateError(SimError):
    """Operation on a sandbox that is not live."""


class OomError(SimError):
    """Physical memory pool exhausted."""


class InvalidFreeError(SimError):
    """Free of an unknown, foreign, or already-freed chunk."""


class RelocationError(SimError):
    """Relocation plan is incomplete or its destination is occupied."""


class ArgValidationError(SimError):
    """Runtime-call argument points outside the caller's alias window."""
