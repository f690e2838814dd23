"""x86_64 instruction decoder for the backward register walk.

Not a general disassembler: it recovers instruction boundaries across the
full opcode space plus the operand facts the syscall-number recovery needs
(register writes, immediate values, direct branch targets).  Anything it
cannot model precisely is reported with `writes_unknown`, which makes the
backward walk give up rather than guess.

A register write carries two masks over the 64-bit register: `write_mask`
is the set of bits the instruction stores, `src_bits` the subset whose
value comes from the instruction's source operand.  Bits written outside
`src_bits` are architecturally zero (32-bit results clear the upper half)
unless `sign_extend` marks them as sign-fill.  For `move-imm` the value of
the `src_bits` portion is `imm` (already positioned and sign-folded); for
`move-reg` it is the source register's low bits; for every other class it
is unknown.
"""

from __future__ import annotations

from dataclasses import dataclass

FULL = 0xFFFF_FFFF_FFFF_FFFF

# Architectural register families by encoding number.
RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)

REG_NAMES = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
]

CLASS_MOVE_IMM = "move-imm"
CLASS_MOVE_REG = "move-reg"
CLASS_ARITH = "arith"
CLASS_SYSCALL = "syscall"
CLASS_BRANCH = "branch"
CLASS_CALL = "call"
CLASS_RETURN = "return"
CLASS_OTHER = "other"


@dataclass(frozen=True)
class RegRef:
    family: int
    bits: int  # operand width in bits
    high8: bool = False

    @property
    def src_mask(self) -> int:
        if self.high8:
            return 0xFF00
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class RegWrite:
    family: int
    write_mask: int
    src_bits: int
    sign_mask: int = 0  # written bits that are sign-fill of the source


@dataclass(frozen=True)
class DecodedInstruction:
    vaddr: int
    length: int
    klass: str
    mnemonic: str = "?"
    writes: tuple[RegWrite, ...] = ()
    writes_unknown: bool = False
    src_reg: RegRef | None = None
    imm: int | None = None
    sign_extend: bool = False
    arith_op: str | None = None
    target: int | None = None
    lea_target: int | None = None
    mem_ref: int | None = None  # rip-relative memory operand address
    barrier: bool = False

    @property
    def end(self) -> int:
        return self.vaddr + self.length


@dataclass
class _ModRM:
    mod: int
    reg: int
    rm: int
    riprel: int | None


_PREFIXES = frozenset({0x66, 0x67, 0xF0, 0xF2, 0xF3, 0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65})

_ONE_MODRM = frozenset(
    list(range(0x00, 0x04)) + list(range(0x08, 0x0C)) + list(range(0x10, 0x14))
    + list(range(0x18, 0x1C)) + list(range(0x20, 0x24)) + list(range(0x28, 0x2C))
    + list(range(0x30, 0x34)) + list(range(0x38, 0x3C))
    + [0x63, 0x69, 0x6B, 0x80, 0x81, 0x83]
    + list(range(0x84, 0x90))
    + [0xC0, 0xC1, 0xC6, 0xC7]
    + list(range(0xD0, 0xD4)) + list(range(0xD8, 0xE0))
    + [0xF6, 0xF7, 0xFE, 0xFF]
)

_IMM_B = frozenset(
    [0x04, 0x0C, 0x14, 0x1C, 0x24, 0x2C, 0x34, 0x3C, 0x6A, 0x6B, 0x80, 0x83,
     0xA8, 0xC0, 0xC1, 0xC6, 0xCD, 0xE4, 0xE5, 0xE6, 0xE7]
    + list(range(0xB0, 0xB8))
)
_IMM_Z = frozenset([0x05, 0x0D, 0x15, 0x1D, 0x25, 0x2D, 0x35, 0x3D, 0x68, 0x69, 0x81, 0xA9, 0xC7])
_IMM_V = frozenset(range(0xB8, 0xC0))
_IMM_W = frozenset([0xC2, 0xCA])
_REL8 = frozenset(list(range(0x70, 0x80)) + [0xE0, 0xE1, 0xE2, 0xE3, 0xEB])
_REL32 = frozenset([0xE8, 0xE9])
_MOFFS = frozenset([0xA0, 0xA1, 0xA2, 0xA3])

_INVALID64 = frozenset(
    [0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F,
     0x60, 0x61, 0x62, 0x82, 0x9A, 0xCE, 0xD4, 0xD5, 0xD6, 0xEA]
)

_TWO_NO_MODRM = frozenset(
    [0x05, 0x06, 0x07, 0x08, 0x09, 0x0B, 0x0E, 0x30, 0x31, 0x32, 0x33, 0x34,
     0x35, 0x37, 0x77, 0xA0, 0xA1, 0xA2, 0xA8, 0xA9, 0xAA]
    + list(range(0xC8, 0xD0))
)
_TWO_IMM_B = frozenset([0x0F, 0x70, 0x71, 0x72, 0x73, 0xA4, 0xAC, 0xBA, 0xC2, 0xC4, 0xC5, 0xC6])
# Two-byte SSE opcodes with a general-purpose destination; the rest of the
# SSE space writes no GP registers.
_TWO_GP_DEST = frozenset([0x2C, 0x2D, 0x50, 0x7E, 0xC5, 0xD7])


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value ^ sign) - sign


def _reg(num: int, bits: int, rex: int) -> RegRef:
    if bits == 8 and rex == 0 and 4 <= num <= 7:
        return RegRef(num & 3, 8, high8=True)
    return RegRef(num, bits, high8=False)


def _unknown_write(ref: RegRef) -> RegWrite:
    """Write of an unmodeled value, with 32-bit upper-half zeroing."""
    if ref.bits == 32:
        return RegWrite(ref.family, FULL, 0xFFFFFFFF)
    if ref.bits == 64:
        return RegWrite(ref.family, FULL, FULL)
    return RegWrite(ref.family, ref.src_mask, ref.src_mask)


def _full_unknown(family: int) -> RegWrite:
    return RegWrite(family, FULL, FULL)


def _value_write(ref: RegRef) -> RegWrite:
    """Write whose src portion is carried by imm / src_reg."""
    if ref.bits == 32:
        return RegWrite(ref.family, FULL, 0xFFFFFFFF)
    if ref.bits == 64:
        return RegWrite(ref.family, FULL, FULL)
    return RegWrite(ref.family, ref.src_mask, ref.src_mask)


def _widening_write(dest: RegRef, src_width: int, signed: bool = False) -> RegWrite:
    """Write of a narrower source into `dest` (movzx/movsx family)."""
    write_mask = FULL if dest.bits >= 32 else dest.src_mask
    src = (1 << src_width) - 1
    sign = (((1 << dest.bits) - 1) & ~src) if signed else 0
    return RegWrite(dest.family, write_mask, src, sign)


class _Cursor:
    __slots__ = ("code", "pos", "end")

    def __init__(self, code: bytes, pos: int, end: int):
        self.code = code
        self.pos = pos
        self.end = end

    def u8(self) -> int:
        if self.pos >= self.end:
            raise IndexError
        b = self.code[self.pos]
        self.pos += 1
        return b

    def bytes_le(self, n: int) -> int:
        if self.pos + n > self.end:
            raise IndexError
        v = int.from_bytes(self.code[self.pos : self.pos + n], "little")
        self.pos += n
        return v


def _parse_modrm(cur: _Cursor, addr32: bool) -> _ModRM:
    m = cur.u8()
    mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
    riprel = None
    if mod != 3:
        base5 = False
        if rm == 4:
            sib = cur.u8()
            base5 = (sib & 7) == 5
        if mod == 0 and (rm == 5 or base5):
            disp = _sext(cur.bytes_le(4), 32)
            if rm == 5:
                riprel = disp
        elif mod == 1:
            cur.bytes_le(1)
        elif mod == 2:
            cur.bytes_le(4)
    return _ModRM(mod, reg, rm, riprel)


def _bad(vaddr: int, length: int = 1) -> DecodedInstruction:
    return DecodedInstruction(vaddr, length, CLASS_OTHER, "(bad)", writes_unknown=True, barrier=True)


def decode(code: bytes, offset: int, vaddr: int) -> DecodedInstruction:
    """Decode one instruction at code[offset], mapped at vaddr."""
    try:
        return _decode(code, offset, vaddr)
    except IndexError:
        return _bad(vaddr, max(1, len(code) - offset))


def _decode(code: bytes, offset: int, vaddr: int) -> DecodedInstruction:
    cur = _Cursor(code, offset, len(code))
    start = offset

    opsize16 = False
    addr32 = False
    rep = 0
    rex = 0
    while True:
        b = cur.u8()
        if b in _PREFIXES:
            if b == 0x66:
                opsize16 = True
            elif b == 0x67:
                addr32 = True
            elif b in (0xF2, 0xF3):
                rep = b
            continue
        if 0x40 <= b <= 0x4F:
            rex = b
            b = cur.u8()
        break
    op = b
    rex_w = bool(rex & 8)
    rex_r = 8 if rex & 4 else 0
    rex_b = 8 if rex & 1 else 0

    def osize() -> int:
        if rex_w:
            return 64
        return 16 if opsize16 else 32

    def length() -> int:
        return cur.pos - start

    def done(klass, mnem, **kw) -> DecodedInstruction:
        return DecodedInstruction(vaddr, length(), klass, mnem, **kw)

    # --- VEX -----------------------------------------------------------
    if op in (0xC4, 0xC5):
        if op == 0xC4:
            b1 = cur.u8()
            cur.u8()
            vmap = b1 & 0x1F
        else:
            cur.u8()
            vmap = 1
        vop = cur.u8()
        _parse_modrm(cur, addr32)
        if vmap == 3 or (vmap == 1 and vop in _TWO_IMM_B):
            cur.u8()
        return done(CLASS_OTHER, "(vex)", writes_unknown=True)

    # --- two / three byte maps -------------------------------------------
    if op == 0x0F:
        op2 = cur.u8()
        if op2 == 0x38:
            op3 = cur.u8()
            mrm = _parse_modrm(cur, addr32)
            if op3 in (0xF0, 0xF1):  # movbe / crc32
                ref = _reg(mrm.reg + rex_r, 64 if rex_w else 32, rex)
                return done(CLASS_OTHER, "movbe", writes=(_unknown_write(ref),))
            return done(CLASS_OTHER, "(0f38)")
        if op2 == 0x3A:
            cur.u8()
            _parse_modrm(cur, addr32)
            cur.u8()
            return done(CLASS_OTHER, "(0f3a)")
        return _decode_two(cur, op2, vaddr, length, done, rex, rex_w, rex_r, rex_b, opsize16, addr32, rep)

    # --- one byte map ------------------------------------------------------
    if op in _INVALID64:
        return _bad(vaddr, cur.pos - start)

    mrm: _ModRM | None = None
    if op in _ONE_MODRM:
        mrm = _parse_modrm(cur, addr32)

    imm = None
    imm_bits = 0
    if op in (0xF6, 0xF7) and mrm is not None and mrm.reg in (0, 1):
        imm_bits = 8 if op == 0xF6 else (16 if opsize16 else 32)
        imm = cur.bytes_le(imm_bits // 8)
    elif op in _IMM_B:
        imm, imm_bits = cur.bytes_le(1), 8
    elif op in _IMM_Z:
        imm_bits = 16 if opsize16 else 32
        imm = cur.bytes_le(imm_bits // 8)
    elif op in _IMM_V:
        imm_bits = 64 if rex_w else (16 if opsize16 else 32)
        imm = cur.bytes_le(imm_bits // 8)
    elif op in _IMM_W:
        imm, imm_bits = cur.bytes_le(2), 16
    elif op in _REL8:
        rel = _sext(cur.bytes_le(1), 8)
        mnem = "jmp" if op == 0xEB else ("jcc" if op < 0xE0 else "loop")
        return done(CLASS_BRANCH, mnem, target=vaddr + length() + rel)
    elif op in _REL32:
        rel = _sext(cur.bytes_le(4), 32)
        tgt = vaddr + length() + rel
        if op == 0xE8:
            return done(CLASS_CALL, "call", target=tgt)
        return done(CLASS_BRANCH, "jmp", target=tgt)
    elif op in _MOFFS:
        cur.bytes_le(4 if addr32 else 8)
        if op == 0xA0:
            return done(CLASS_OTHER, "mov", writes=(RegWrite(RAX, 0xFF, 0xFF),))
        if op == 0xA1:
            return done(CLASS_OTHER, "mov", writes=(_unknown_write(RegRef(RAX, osize())),))
        return done(CLASS_OTHER, "mov")
    elif op == 0xC8:
        cur.bytes_le(3)
        return done(CLASS_OTHER, "enter", writes=(_full_unknown(RSP), _full_unknown(RBP)))

    if op <= 0x3D and (op & 7) <= 5:
        return _alu_block(op, mrm, imm, imm_bits, rex, rex_w, rex_r, rex_b, opsize16, done)

    if 0x50 <= op <= 0x57:
        return done(CLASS_OTHER, "push", writes=(_full_unknown(RSP),))
    if 0x58 <= op <= 0x5F:
        fam = (op - 0x58) + rex_b
        return done(CLASS_OTHER, "pop", writes=(_full_unknown(RSP), _full_unknown(fam)))

    if op == 0x63:  # movsxd r, r/m32
        dref = RegRef(mrm.reg + rex_r, 64 if rex_w else 32)
        if mrm.mod == 3:
            sref = RegRef(mrm.rm + rex_b, 32)
            return done(
                CLASS_MOVE_REG, "movsxd",
                writes=(_widening_write(dref, 32, signed=rex_w),), src_reg=sref, sign_extend=rex_w,
            )
        return done(CLASS_OTHER, "movsxd", writes=(_unknown_write(dref),))

    if op in (0x68, 0x6A):
        return done(CLASS_OTHER, "push", writes=(_full_unknown(RSP),))
    if op in (0x69, 0x6B):  # imul r, r/m, imm
        dref = _reg(mrm.reg + rex_r, osize(), rex)
        return done(CLASS_OTHER, "imul", writes=(_unknown_write(dref),))
    if 0x6C <= op <= 0x6F:
        return done(CLASS_OTHER, "ins", writes=(_full_unknown(RSI), _full_unknown(RDI)))

    if op in (0x80, 0x81, 0x83):
        return _grp1(op, mrm, imm, imm_bits, rex, rex_b, osize, done)

    if op in (0x84, 0x85):
        return done(CLASS_OTHER, "test")
    if op in (0x86, 0x87):  # xchg
        bits = 8 if op == 0x86 else osize()
        writes = [_unknown_write(_reg(mrm.reg + rex_r, bits, rex))]
        if mrm.mod == 3:
            writes.append(_unknown_write(_reg(mrm.rm + rex_b, bits, rex)))
        return done(CLASS_OTHER, "xchg", writes=tuple(writes))

    if op in (0x88, 0x89, 0x8A, 0x8B):
        return _mov_rr(op, mrm, rex, rex_r, rex_b, osize, done)

    if op == 0x8C:
        writes = ()
        if mrm.mod == 3:
            writes = (_unknown_write(_reg(mrm.rm + rex_b, osize(), rex)),)
        return done(CLASS_OTHER, "mov", writes=writes)
    if op == 0x8D:  # lea
        dref = _reg(mrm.reg + rex_r, osize(), rex)
        tgt = None
        if mrm.riprel is not None:
            tgt = (vaddr + length() + mrm.riprel) & FULL
        return done(CLASS_OTHER, "lea", writes=(_unknown_write(dref),), lea_target=tgt)
    if op == 0x8E:
        return done(CLASS_OTHER, "mov")
    if op == 0x8F:  # pop r/m
        writes = [_full_unknown(RSP)]
        if mrm.mod == 3:
            writes.append(_full_unknown(mrm.rm + rex_b))
        return done(CLASS_OTHER, "pop", writes=tuple(writes))

    if op == 0x90 and not rex_b:
        return done(CLASS_OTHER, "nop")
    if 0x90 <= op <= 0x97:  # xchg rAX, r
        other = _reg((op - 0x90) + rex_b, osize(), rex)
        return done(CLASS_OTHER, "xchg", writes=(_unknown_write(RegRef(RAX, osize())), _unknown_write(other)))

    if op == 0x98:  # cbw/cwde/cdqe: rAX = sext(narrower rAX)
        bits = osize()
        src_bits = {16: 8, 32: 16, 64: 32}[bits]
        return done(
            CLASS_MOVE_REG, "cdqe",
            writes=(_widening_write(RegRef(RAX, bits), src_bits, signed=True),),
            src_reg=RegRef(RAX, src_bits), sign_extend=True,
        )
    if op == 0x99:
        return done(CLASS_OTHER, "cdq", writes=(_full_unknown(RDX),))

    if op in (0x9B, 0x9C, 0x9E, 0xF5, 0xF8, 0xF9, 0xFA, 0xFB, 0xFC, 0xFD):
        return done(CLASS_OTHER, "flags")
    if op == 0x9D:
        return done(CLASS_OTHER, "popf", writes=(_full_unknown(RSP),))
    if op == 0x9F:
        return done(CLASS_OTHER, "lahf", writes=(RegWrite(RAX, 0xFF00, 0xFF00),))

    if 0xA4 <= op <= 0xA7 or 0xAA <= op <= 0xAF:
        writes = [_full_unknown(RSI), _full_unknown(RDI)]
        if rep:
            writes.append(_full_unknown(RCX))
        if op in (0xAC, 0xAD):  # lods
            writes.append(_unknown_write(RegRef(RAX, 8 if op == 0xAC else osize())))
        return done(CLASS_OTHER, "string", writes=tuple(writes))
    if op in (0xA8, 0xA9):
        return done(CLASS_OTHER, "test")

    if 0xB0 <= op <= 0xB7:  # mov r8, imm8
        ref = _reg((op - 0xB0) + rex_b, 8, rex)
        value = (imm & 0xFF) << (8 if ref.high8 else 0)
        return done(CLASS_MOVE_IMM, "mov", writes=(_value_write(ref),), imm=value)
    if 0xB8 <= op <= 0xBF:  # mov r, imm
        ref = RegRef((op - 0xB8) + rex_b, osize())
        mask = (1 << ref.bits) - 1
        return done(CLASS_MOVE_IMM, "mov", writes=(_value_write(ref),), imm=imm & mask)

    if op in (0xC0, 0xC1):
        writes = ()
        if mrm.mod == 3:
            bits = 8 if op == 0xC0 else osize()
            writes = (_unknown_write(_reg(mrm.rm + rex_b, bits, rex)),)
        return done(CLASS_OTHER, "shift", writes=writes)
    if op in (0xC2, 0xC3, 0xCA, 0xCB, 0xCF):
        return done(CLASS_RETURN, "ret")
    if op in (0xC6, 0xC7):
        if mrm.reg != 0:
            return _bad(vaddr, length())
        if mrm.mod != 3:
            return done(CLASS_OTHER, "mov")
        bits = 8 if op == 0xC6 else osize()
        ref = _reg(mrm.rm + rex_b, bits, rex)
        if bits == 8:
            value = (imm & 0xFF) << (8 if ref.high8 else 0)
        elif bits == 64:
            value = _sext(imm, 32) & FULL
        else:
            value = imm & ((1 << bits) - 1)
        return done(CLASS_MOVE_IMM, "mov", writes=(_value_write(ref),), imm=value)

    if op == 0xC9:
        return done(CLASS_OTHER, "leave", writes=(_full_unknown(RSP), _full_unknown(RBP)))
    if op == 0xCC:
        return done(CLASS_OTHER, "int3", barrier=True)
    if op == 0xCD:
        return done(CLASS_OTHER, "int", imm=imm, barrier=True)

    if 0xD0 <= op <= 0xD3:
        writes = ()
        if mrm.mod == 3:
            bits = 8 if op in (0xD0, 0xD2) else osize()
            writes = (_unknown_write(_reg(mrm.rm + rex_b, bits, rex)),)
        return done(CLASS_OTHER, "shift", writes=writes)
    if op == 0xD7:
        return done(CLASS_OTHER, "xlat", writes=(RegWrite(RAX, 0xFF, 0xFF),))
    if 0xD8 <= op <= 0xDF:
        # DF covers fnstsw ax; the rest never writes GP registers.
        return done(CLASS_OTHER, "x87", writes_unknown=(op == 0xDF))

    if op in (0xE4, 0xE5, 0xEC, 0xED):
        bits = 8 if op in (0xE4, 0xEC) else osize()
        return done(CLASS_OTHER, "in", writes=(_unknown_write(RegRef(RAX, bits)),))
    if op in (0xE6, 0xE7, 0xEE, 0xEF):
        return done(CLASS_OTHER, "out")

    if op == 0xF1:
        return done(CLASS_OTHER, "int1", barrier=True)
    if op == 0xF4:
        return done(CLASS_OTHER, "hlt", barrier=True)

    if op in (0xF6, 0xF7):
        bits = 8 if op == 0xF6 else osize()
        if mrm.reg in (0, 1):
            return done(CLASS_OTHER, "test")
        if mrm.reg in (2, 3):  # not / neg
            writes = ()
            if mrm.mod == 3:
                writes = (_unknown_write(_reg(mrm.rm + rex_b, bits, rex)),)
            return done(CLASS_OTHER, "neg", writes=writes)
        return done(CLASS_OTHER, "muldiv", writes=(_full_unknown(RAX), _full_unknown(RDX)))

    if op == 0xFE:
        writes = ()
        if mrm.mod == 3 and mrm.reg in (0, 1):
            writes = (_unknown_write(_reg(mrm.rm + rex_b, 8, rex)),)
        return done(CLASS_OTHER, "incdec", writes=writes)
    if op == 0xFF:
        if mrm.reg in (0, 1):  # inc/dec r/m
            if mrm.mod == 3:
                ref = _reg(mrm.rm + rex_b, osize(), rex)
                return done(
                    CLASS_ARITH, "inc" if mrm.reg == 0 else "dec",
                    writes=(_value_write(ref),),
                    arith_op="+" if mrm.reg == 0 else "-", imm=1,
                )
            return done(CLASS_OTHER, "incdec")
        ref = None
        if mrm.riprel is not None:
            ref = (vaddr + length() + mrm.riprel) & FULL
        if mrm.reg in (2, 3):
            return done(CLASS_CALL, "call", mem_ref=ref)
        if mrm.reg in (4, 5):
            return done(CLASS_BRANCH, "jmp", mem_ref=ref)
        if mrm.reg == 6:
            return done(CLASS_OTHER, "push", writes=(_full_unknown(RSP),))
        return _bad(vaddr, length())

    return done(CLASS_OTHER, "(unmodeled)", writes_unknown=True)


def _alu_block(op, mrm, imm, imm_bits, rex, rex_w, rex_r, rex_b, opsize16, done):
    names = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"]
    kind = names[op >> 3]
    form = op & 7
    bits = 8 if form in (0, 2, 4) else (64 if rex_w else (16 if opsize16 else 32))

    if kind == "cmp":
        return done(CLASS_OTHER, "cmp")

    if form in (4, 5):  # op rAX, imm
        ref = RegRef(RAX, bits)
        if kind in ("add", "sub") and bits >= 32:
            val = _sext(imm, imm_bits) if bits == 64 else imm
            return done(CLASS_ARITH, kind, writes=(_value_write(ref),),
                        arith_op="+" if kind == "add" else "-", imm=val)
        return done(CLASS_OTHER, kind, writes=(_unknown_write(ref),))

    dest_is_rm = form in (0, 1)
    if kind == "xor" and mrm.mod == 3:
        a = _reg(mrm.reg + rex_r, bits, rex)
        b = _reg(mrm.rm + rex_b, bits, rex)
        if a == b and not a.high8:
            return done(CLASS_MOVE_IMM, "xor", writes=(_value_write(a),), imm=0)

    writes = ()
    if dest_is_rm:
        if mrm.mod == 3:
            writes = (_unknown_write(_reg(mrm.rm + rex_b, bits, rex)),)
    else:
        writes = (_unknown_write(_reg(mrm.reg + rex_r, bits, rex)),)
    return done(CLASS_OTHER, kind, writes=writes)


def _grp1(op, mrm, imm, imm_bits, rex, rex_b, osize, done):
    names = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"]
    kind = names[mrm.reg]
    if kind == "cmp":
        return done(CLASS_OTHER, "cmp")
    bits = 8 if op == 0x80 else osize()
    if mrm.mod != 3:
        return done(CLASS_OTHER, kind)
    ref = _reg(mrm.rm + rex_b, bits, rex)
    if kind in ("add", "sub") and not ref.high8 and bits >= 32:
        val = _sext(imm, imm_bits) if (op == 0x83 or bits == 64) else imm
        return done(CLASS_ARITH, kind, writes=(_value_write(ref),),
                    arith_op="+" if kind == "add" else "-", imm=val)
    return done(CLASS_OTHER, kind, writes=(_unknown_write(ref),))


def _mov_rr(op, mrm, rex, rex_r, rex_b, osize, done):
    bits = 8 if op in (0x88, 0x8A) else osize()
    if mrm.mod != 3:
        if op in (0x88, 0x89):  # store: no register write
            return done(CLASS_OTHER, "mov")
        dref = _reg(mrm.reg + rex_r, bits, rex)  # load: value unknown
        return done(CLASS_OTHER, "mov", writes=(_unknown_write(dref),))
    if op in (0x88, 0x89):
        dref = _reg(mrm.rm + rex_b, bits, rex)
        sref = _reg(mrm.reg + rex_r, bits, rex)
    else:
        dref = _reg(mrm.reg + rex_r, bits, rex)
        sref = _reg(mrm.rm + rex_b, bits, rex)
    if dref.high8 or sref.high8:
        return done(CLASS_OTHER, "mov", writes=(_unknown_write(dref),))
    return done(CLASS_MOVE_REG, "mov", writes=(_value_write(dref),), src_reg=sref)


def _decode_two(cur, op2, vaddr, length, done, rex, rex_w, rex_r, rex_b, opsize16, addr32, rep):
    osize = 64 if rex_w else (16 if opsize16 else 32)

    if op2 == 0x05:
        return done(CLASS_SYSCALL, "syscall")
    if 0x80 <= op2 <= 0x8F:
        rel = _sext(cur.bytes_le(4), 32)
        return done(CLASS_BRANCH, "jcc", target=vaddr + length() + rel)
    if op2 in _TWO_NO_MODRM:
        if op2 == 0x0B:
            return done(CLASS_OTHER, "ud2", barrier=True)
        if op2 in (0x07, 0x35):  # sysret / sysexit
            return done(CLASS_RETURN, "sysret")
        if op2 == 0xA2:
            return done(CLASS_OTHER, "cpuid", writes=(
                _full_unknown(RAX), _full_unknown(RBX), _full_unknown(RCX), _full_unknown(RDX)))
        if op2 in (0x31, 0x32, 0x33):
            return done(CLASS_OTHER, "rdtsc", writes=(_full_unknown(RAX), _full_unknown(RDX)))
        if 0xC8 <= op2 <= 0xCF:
            return done(CLASS_OTHER, "bswap", writes=(_full_unknown((op2 - 0xC8) + rex_b),))
        if op2 in (0xA0, 0xA1, 0xA8, 0xA9):
            return done(CLASS_OTHER, "pushpop", writes=(_full_unknown(RSP),))
        return done(CLASS_OTHER, "sys")

    # Everything else in the two-byte map takes a ModRM byte.
    mrm = _parse_modrm(cur, addr32)
    if op2 in _TWO_IMM_B:
        cur.bytes_le(1)

    if op2 == 0x0F:
        return done(CLASS_OTHER, "(3dnow)", writes_unknown=True)
    if op2 in (0xB6, 0xB7, 0xBE, 0xBF):  # movzx / movsx
        src_bits = 8 if op2 in (0xB6, 0xBE) else 16
        signed = op2 in (0xBE, 0xBF)
        dref = _reg(mrm.reg + rex_r, osize, rex)
        if mrm.mod == 3 and not dref.high8:
            sref = _reg(mrm.rm + rex_b, src_bits, rex)
            if not sref.high8:
                return done(CLASS_MOVE_REG, "movsx" if signed else "movzx",
                            writes=(_widening_write(dref, src_bits, signed=signed),),
                            src_reg=sref, sign_extend=signed)
        return done(CLASS_OTHER, "movzx", writes=(_unknown_write(dref),))
    if 0x40 <= op2 <= 0x4F:  # cmov
        dref = _reg(mrm.reg + rex_r, osize, rex)
        return done(CLASS_OTHER, "cmov", writes=(_unknown_write(dref),))
    if 0x90 <= op2 <= 0x9F:  # setcc
        writes = ()
        if mrm.mod == 3:
            writes = (_unknown_write(_reg(mrm.rm + rex_b, 8, rex)),)
        return done(CLASS_OTHER, "setcc", writes=writes)
    if op2 in (0xA3, 0xBA):
        return done(CLASS_OTHER, "bt")
    if op2 in (0xAB, 0xB3, 0xBB):  # bts/btr/btc
        writes = ()
        if mrm.mod == 3:
            writes = (_unknown_write(_reg(mrm.rm + rex_b, osize, rex)),)
        return done(CLASS_OTHER, "btx", writes=writes)
    if op2 in (0xA4, 0xA5, 0xAC, 0xAD):  # shld/shrd
        writes = ()
        if mrm.mod == 3:
            writes = (_unknown_write(_reg(mrm.rm + rex_b, osize, rex)),)
        return done(CLASS_OTHER, "shxd", writes=writes)
    if op2 in (0xAF, 0xB8, 0xBC, 0xBD):  # imul / popcnt / bsf / bsr
        dref = _reg(mrm.reg + rex_r, osize, rex)
        return done(CLASS_OTHER, "imul", writes=(_unknown_write(dref),))
    if op2 == 0xB9:
        return done(CLASS_OTHER, "ud1", barrier=True)
    if op2 in (0xB0, 0xB1):  # cmpxchg
        writes = [_full_unknown(RAX)]
        if mrm.mod == 3:
            bits = 8 if op2 == 0xB0 else osize
            writes.append(_unknown_write(_reg(mrm.rm + rex_b, bits, rex)))
        return done(CLASS_OTHER, "cmpxchg", writes=tuple(writes))
    if op2 in (0xC0, 0xC1):  # xadd
        bits = 8 if op2 == 0xC0 else osize
        writes = [_unknown_write(_reg(mrm.reg + rex_r, bits, rex))]
        if mrm.mod == 3:
            writes.append(_unknown_write(_reg(mrm.rm + rex_b, bits, rex)))
        return done(CLASS_OTHER, "xadd", writes=tuple(writes))
    if op2 == 0xC7:  # grp9: cmpxchg8b/16b, rdrand, rdseed
        if mrm.mod == 3 and mrm.reg in (6, 7):
            return done(CLASS_OTHER, "rdrand", writes=(_unknown_write(_reg(mrm.rm + rex_b, osize, rex)),))
        return done(CLASS_OTHER, "cmpxchg8b", writes=(_full_unknown(RAX), _full_unknown(RDX)))
    if op2 in (0x20, 0x21):  # mov r, cr/dr
        return done(CLASS_OTHER, "movcr", writes=(_full_unknown(mrm.rm + rex_b),))
    if op2 in _TWO_GP_DEST:
        if op2 == 0x7E:
            if rep == 0xF3:
                return done(CLASS_OTHER, "movq")
            writes = ()
            if mrm.mod == 3:
                writes = (_unknown_write(RegRef(mrm.rm + rex_b, 64 if rex_w else 32)),)
            return done(CLASS_OTHER, "movd", writes=writes)
        dref = RegRef(mrm.reg + rex_r, 64 if rex_w else 32)
        return done(CLASS_OTHER, "cvt", writes=(_unknown_write(dref),))
    # Remaining two-byte opcodes (SSE arithmetic, prefetch/nop hints,
    # system table ops) write no general-purpose registers.
    return done(CLASS_OTHER, "(sse)")


def linear_sweep(code: bytes, vaddr: int) -> list[DecodedInstruction]:
    """Decode a byte region front to back, one instruction after another."""
    out = []
    pos = 0
    while pos < len(code):
        ins = decode(code, pos, vaddr + pos)
        if ins.length <= 0:
            break
        out.append(ins)
        pos += ins.length
    return out
