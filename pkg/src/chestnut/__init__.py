"""Static syscall extraction and seccomp-BPF allowlist generation for ELF binaries."""

__version__ = "0.1.0"
