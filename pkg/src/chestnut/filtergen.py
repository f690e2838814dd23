"""seccomp-BPF allowlist filters: builder, reference interpreter, raw IO.

The builder emits a balanced binary search over maximal consecutive
number runs, so lookup cost is logarithmic instead of growing with a
rule's position, and a full 349-entry list stays far under the kernel's
4096-instruction ceiling.

The interpreter mirrors kernel classic-BPF semantics over the seccomp
data buffer and doubles as the test oracle for the builder.
"""

from __future__ import annotations

import json
import struct
import weakref
from dataclasses import dataclass
from pathlib import Path

from .errors import LoadRejected, TooManyRules
from .syscalls import MAX_SYSCALL_NUMBER

# <linux/bpf_common.h>
BPF_LD = 0x00
BPF_LDX = 0x01
BPF_ST = 0x02
BPF_STX = 0x03
BPF_ALU = 0x04
BPF_JMP = 0x05
BPF_RET = 0x06
BPF_MISC = 0x07

BPF_W = 0x00
BPF_H = 0x08
BPF_B = 0x10

BPF_IMM = 0x00
BPF_ABS = 0x20
BPF_IND = 0x40
BPF_MEM = 0x60
BPF_LEN = 0x80

BPF_ADD = 0x00
BPF_SUB = 0x10
BPF_MUL = 0x20
BPF_DIV = 0x30
BPF_OR = 0x40
BPF_AND = 0x50
BPF_LSH = 0x60
BPF_RSH = 0x70
BPF_NEG = 0x80
BPF_XOR = 0xA0

BPF_JA = 0x00
BPF_JEQ = 0x10
BPF_JGT = 0x20
BPF_JGE = 0x30
BPF_JSET = 0x40

BPF_K = 0x00
BPF_X = 0x08
BPF_A = 0x10

BPF_TAX = 0x00
BPF_TXA = 0x80

BPF_MAXINSNS = 4096

# <linux/seccomp.h>
SECCOMP_RET_KILL_PROCESS = 0x80000000
SECCOMP_RET_KILL_THREAD = 0x00000000
SECCOMP_RET_TRAP = 0x00030000
SECCOMP_RET_ERRNO = 0x00050000
SECCOMP_RET_TRACE = 0x7FF00000
SECCOMP_RET_LOG = 0x7FFC0000
SECCOMP_RET_ALLOW = 0x7FFF0000
SECCOMP_RET_ACTION_FULL = 0xFFFF0000
SECCOMP_RET_DATA = 0x0000FFFF

# <linux/audit.h>
AUDIT_ARCH_X86_64 = 0xC000003E
AUDIT_ARCH_AARCH64 = 0xC00000B7

SECCOMP_DATA_NR = 0
SECCOMP_DATA_ARCH = 4
SECCOMP_DATA_IP = 8
SECCOMP_DATA_ARGS = 16
SECCOMP_DATA_SIZE = 64

ARCH_TOKENS = {"x86_64": AUDIT_ARCH_X86_64, "aarch64": AUDIT_ARCH_AARCH64}

KILL_PROCESS = "kill-process"


@dataclass(frozen=True)
class SockFilter:
    code: int
    jt: int
    jf: int
    k: int

    def encode(self) -> bytes:
        return struct.pack("<HBBI", self.code, self.jt, self.jf, self.k)


@dataclass(frozen=True)
class Verdict:
    action: str  # ALLOW | KILL | ERRNO | TRAP | TRACE | LOG
    data: int = 0

    def __repr__(self):
        return f"Verdict({self.action}{f', {self.data}' if self.data else ''})"


ALLOW = Verdict("ALLOW")
KILL = Verdict("KILL")


@dataclass(frozen=True)
class Allowlist:
    arch: str
    numbers: frozenset[int]

    def __post_init__(self):
        if self.arch not in ARCH_TOKENS:
            raise ValueError(f"unsupported allowlist arch: {self.arch}")
        bad = [n for n in self.numbers if not (0 <= n <= MAX_SYSCALL_NUMBER)]
        if bad:
            raise ValueError(f"allowlist numbers out of range [0, {MAX_SYSCALL_NUMBER}]: {sorted(bad)}")

    def to_json(self) -> dict:
        return {"arch": self.arch, "numbers": sorted(self.numbers)}

    @classmethod
    def from_json(cls, doc: dict) -> "Allowlist":
        return cls(doc.get("arch", "x86_64"), frozenset(doc.get("numbers", ())))


def write_allowlist(path, allowlist: Allowlist) -> None:
    with open(path, "w") as f:
        json.dump(allowlist.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_allowlist(path) -> Allowlist:
    with open(path) as f:
        return Allowlist.from_json(json.load(f))


@dataclass(frozen=True)
class FilterProgram:
    instructions: tuple[SockFilter, ...]
    default_action: object  # KILL_PROCESS or ("errno", n)
    arch_token: int

    def encode(self) -> bytes:
        return b"".join(i.encode() for i in self.instructions)


def _default_ret(default_action) -> int:
    if default_action == KILL_PROCESS:
        return SECCOMP_RET_KILL_PROCESS
    if isinstance(default_action, tuple) and default_action[0] == "errno":
        return SECCOMP_RET_ERRNO | (default_action[1] & SECCOMP_RET_DATA)
    raise ValueError(f"unsupported default action: {default_action!r}")


def _runs(numbers: list[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for n in numbers:
        if runs and runs[-1][1] + 1 == n:
            runs[-1] = (runs[-1][0], n)
        else:
            runs.append((n, n))
    return runs


def _emit_tree(runs: list[tuple[int, int]], ret_default: int) -> list[SockFilter]:
    if not runs:
        return [SockFilter(BPF_RET | BPF_K, 0, 0, ret_default)]
    if len(runs) == 1:
        lo, hi = runs[0]
        allow = SockFilter(BPF_RET | BPF_K, 0, 0, SECCOMP_RET_ALLOW)
        deny = SockFilter(BPF_RET | BPF_K, 0, 0, ret_default)
        if lo == hi:
            return [SockFilter(BPF_JMP | BPF_JEQ | BPF_K, 0, 1, lo), allow, deny]
        return [
            SockFilter(BPF_JMP | BPF_JGE | BPF_K, 0, 2, lo),
            SockFilter(BPF_JMP | BPF_JGT | BPF_K, 1, 0, hi),
            allow,
            deny,
        ]
    mid = len(runs) // 2
    pivot = runs[mid][0]
    left = _emit_tree(runs[:mid], ret_default)
    right = _emit_tree(runs[mid:], ret_default)
    if len(left) <= 255:
        head = [SockFilter(BPF_JMP | BPF_JGE | BPF_K, len(left), 0, pivot)]
    else:
        head = [
            SockFilter(BPF_JMP | BPF_JGE | BPF_K, 0, 1, pivot),
            SockFilter(BPF_JMP | BPF_JA, 0, 0, len(left)),
        ]
    return head + left + right


def build_filter(allowlist: Allowlist, default_action=KILL_PROCESS) -> FilterProgram:
    """Allowlist membership filter: ALLOW iff nr is listed, arch must match."""
    ret_default = _default_ret(default_action)
    arch_token = ARCH_TOKENS[allowlist.arch]
    body = _emit_tree(_runs(sorted(allowlist.numbers)), ret_default)
    instructions = [
        SockFilter(BPF_LD | BPF_W | BPF_ABS, 0, 0, SECCOMP_DATA_ARCH),
        SockFilter(BPF_JMP | BPF_JEQ | BPF_K, 1, 0, arch_token),
        SockFilter(BPF_RET | BPF_K, 0, 0, ret_default),
        SockFilter(BPF_LD | BPF_W | BPF_ABS, 0, 0, SECCOMP_DATA_NR),
        *body,
    ]
    if len(instructions) > BPF_MAXINSNS:
        raise TooManyRules(
            f"{len(instructions)} instructions exceed the {BPF_MAXINSNS} kernel limit"
        )
    program = FilterProgram(tuple(instructions), default_action, arch_token)
    validate_program(program)
    return program


_VALIDATED: "weakref.WeakValueDictionary[int, FilterProgram]" = weakref.WeakValueDictionary()


def validate_program(program: FilterProgram) -> None:
    """The checks the kernel applies at filter-attach time."""
    if _VALIDATED.get(id(program)) is program:
        return
    insns = program.instructions
    if not insns:
        raise LoadRejected("empty BPF program")
    if len(insns) > BPF_MAXINSNS:
        raise LoadRejected(f"program longer than {BPF_MAXINSNS} instructions")
    for pc, ins in enumerate(insns):
        cls = ins.code & 0x07
        if cls == BPF_JMP:
            if ins.code & 0xF0 == BPF_JA:
                if pc + 1 + ins.k >= len(insns):
                    raise LoadRejected(f"pc {pc}: JA target out of range")
            else:
                if pc + 1 + ins.jt >= len(insns) or pc + 1 + ins.jf >= len(insns):
                    raise LoadRejected(f"pc {pc}: conditional jump target out of range")
        elif cls == BPF_LD and ins.code & 0xE0 == BPF_ABS:
            if ins.code & 0x18 != BPF_W:
                raise LoadRejected(f"pc {pc}: seccomp allows only 32-bit loads")
            if ins.k % 4 or ins.k + 4 > SECCOMP_DATA_SIZE:
                raise LoadRejected(f"pc {pc}: load outside seccomp data at {ins.k}")
    last = insns[-1].code & 0x07
    if last != BPF_RET:
        raise LoadRejected("program does not end in a return")
    _VALIDATED[id(program)] = program


def interpret(
    program: FilterProgram,
    arch: int,
    nr: int,
    args: tuple[int, ...] = (),
    instruction_pointer: int = 0,
) -> Verdict:
    """Faithful classic-BPF evaluation over the seccomp data layout."""
    validate_program(program)
    padded = (tuple(args) + (0,) * 6)[:6]
    m32 = 0xFFFFFFFF
    # The seccomp data buffer as pre-split 32-bit words (validation pins
    # loads to 4-aligned offsets within it).
    words = [nr & m32, arch & m32, instruction_pointer & m32, (instruction_pointer >> 32) & m32]
    for a in padded:
        words.append(a & m32)
        words.append((a >> 32) & m32)

    insns = program.instructions
    A = X = 0
    mem = [0] * 16
    pc = 0
    steps = 0
    while pc < len(insns):
        steps += 1
        if steps > len(insns) + 1:
            raise LoadRejected("interpreter step bound exceeded (loop?)")
        ins = insns[pc]
        code = ins.code
        cls = code & 0x07
        if cls == BPF_LD:
            mode = code & 0xE0
            if mode == BPF_ABS:
                A = words[ins.k >> 2]
            elif mode == BPF_LEN:
                A = SECCOMP_DATA_SIZE
            elif mode == BPF_IMM:
                A = ins.k & m32
            elif mode == BPF_MEM:
                A = mem[ins.k & 15]
            else:
                raise LoadRejected(f"pc {pc}: load mode {mode:#x} not valid under seccomp")
        elif cls == BPF_LDX:
            mode = code & 0xE0
            if mode == BPF_LEN:
                X = SECCOMP_DATA_SIZE
            elif mode == BPF_IMM:
                X = ins.k & m32
            elif mode == BPF_MEM:
                X = mem[ins.k & 15]
            else:
                raise LoadRejected(f"pc {pc}: ldx mode {mode:#x} not valid under seccomp")
        elif cls == BPF_ST:
            mem[ins.k & 15] = A
        elif cls == BPF_STX:
            mem[ins.k & 15] = X
        elif cls == BPF_ALU:
            op = code & 0xF0
            operand = X if code & BPF_X else ins.k & m32
            if op == BPF_ADD:
                A = (A + operand) & m32
            elif op == BPF_SUB:
                A = (A - operand) & m32
            elif op == BPF_MUL:
                A = (A * operand) & m32
            elif op == BPF_DIV:
                if operand == 0:
                    raise LoadRejected("division by zero")
                A = A // operand
            elif op == BPF_AND:
                A &= operand
            elif op == BPF_OR:
                A |= operand
            elif op == BPF_XOR:
                A ^= operand
            elif op == BPF_LSH:
                A = (A << (operand & 31)) & m32
            elif op == BPF_RSH:
                A >>= operand & 31
            elif op == BPF_NEG:
                A = (-A) & m32
            else:
                raise LoadRejected(f"pc {pc}: alu op {op:#x} unsupported")
        elif cls == BPF_JMP:
            op = code & 0xF0
            if op == BPF_JA:
                pc += ins.k
            else:
                operand = X if code & BPF_X else ins.k & m32
                if op == BPF_JEQ:
                    taken = A == operand
                elif op == BPF_JGT:
                    taken = A > operand
                elif op == BPF_JGE:
                    taken = A >= operand
                elif op == BPF_JSET:
                    taken = bool(A & operand)
                else:
                    raise LoadRejected(f"pc {pc}: jump op {op:#x} unsupported")
                pc += ins.jt if taken else ins.jf
        elif cls == BPF_RET:
            value = A if code & BPF_A else ins.k & m32
            return _verdict(value)
        elif cls == BPF_MISC:
            if code & 0xF8 == BPF_TAX:
                X = A
            else:
                A = X
        else:
            raise LoadRejected(f"pc {pc}: instruction class {cls} unsupported")
        pc += 1
    raise LoadRejected("fell off the end of the program")


def _verdict(value: int) -> Verdict:
    action = value & SECCOMP_RET_ACTION_FULL
    data = value & SECCOMP_RET_DATA
    if action == SECCOMP_RET_ALLOW:
        return ALLOW
    if action in (SECCOMP_RET_KILL_PROCESS, SECCOMP_RET_KILL_THREAD):
        return KILL
    if action == SECCOMP_RET_ERRNO:
        return Verdict("ERRNO", data)
    if action == SECCOMP_RET_TRAP:
        return Verdict("TRAP", data)
    if action == SECCOMP_RET_TRACE:
        return Verdict("TRACE", data)
    if action == SECCOMP_RET_LOG:
        return Verdict("LOG", data)
    return KILL  # unknown actions fall back to kill, like the kernel


def emit_raw(program: FilterProgram, path) -> Path:
    out = Path(path)
    out.write_bytes(program.encode())
    return out


def parse_raw(raw: bytes, default_action=KILL_PROCESS, arch_token=AUDIT_ARCH_X86_64) -> FilterProgram:
    if len(raw) % 8:
        raise LoadRejected(f"raw filter length {len(raw)} not a multiple of 8")
    insns = [
        SockFilter(*struct.unpack_from("<HBBI", raw, off)) for off in range(0, len(raw), 8)
    ]
    return FilterProgram(tuple(insns), default_action, arch_token)
