"""Typed error hierarchy shared by all pipeline stages.

Every failure the toolchain can produce is a subclass of ChestnutError,
carrying the process exit code the CLI maps it to (3 = analysis error,
4 = enforcement error).  Unresolved analysis facts are values, not errors.
"""

from __future__ import annotations


class ChestnutError(Exception):
    """Base class for all typed toolchain errors."""

    exit_code = 3


# --- elf-io -----------------------------------------------------------------

class NotElf(ChestnutError):
    """File is not an ELF object (bad magic or too short)."""


class UnsupportedArch(ChestnutError):
    """ELF class/encoding/machine outside the supported set."""


class Truncated(ChestnutError):
    """A structure (named in the message) points outside the file."""


class NoRoomForNote(ChestnutError):
    """In-place annotation requested but the file has no slack."""


class StaticBinary(ChestnutError):
    """Dependency injection is undefined for static executables."""


# --- callgraph --------------------------------------------------------------

class DuplicateStrongSymbol(ChestnutError):
    def __init__(self, name: str):
        super().__init__(f"duplicate global-strong symbol: {name}")
        self.name = name


class MissingEntry(ChestnutError):
    def __init__(self, name: str):
        super().__init__(f"entry function not defined: {name}")
        self.name = name


# --- merge ------------------------------------------------------------------

class MissingLibrary(ChestnutError):
    def __init__(self, name: str):
        super().__init__(f"shared library not found on search path: {name}")
        self.name = name


class UnresolvedImport(ChestnutError):
    def __init__(self, name: str):
        super().__init__(f"import not provided by any dependency: {name}")
        self.name = name


class MissingExportMap(ChestnutError):
    def __init__(self, library: str):
        super().__init__(f"no export syscall map available for: {library}")
        self.library = library


# --- filtergen / enforcement ------------------------------------------------

class TooManyRules(ChestnutError):
    """Filter encoding exceeds the kernel's 4096-instruction limit."""


class LoadRejected(ChestnutError):
    """Kernel (or the reference validator) refused the BPF program."""

    exit_code = 4


class TargetNotFound(ChestnutError):
    exit_code = 4


# --- tracer -----------------------------------------------------------------

class AttachFailed(ChestnutError):
    exit_code = 4


class TraceeVanished(ChestnutError):
    exit_code = 4
