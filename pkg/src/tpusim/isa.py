"""CISC instruction set: encoding, decoding, program container, and the
static program validator.

Every instruction encodes to exactly 12 bytes, little-endian:

    byte 0      opcode
    byte 1      flags (meaning depends on opcode, see below)
    bytes 2-4   unified-buffer address, 24-bit (row granularity)
    bytes 5-6   accumulator address, 16-bit
    bytes 7-10  length, 32-bit (two 16-bit dims for convolutions)
    byte 11     repeat

Some opcodes reinterpret fields:

* host DMA opcodes use the accumulator-address field as a host row address;
* ReadWeights uses the unified-buffer field as a weight-memory tile index;
* SetConfig uses the accumulator field as a config-register id and the
  length field as the register payload.

``repeat`` re-executes the instruction ``repeat`` extra times, advancing
the unified-buffer and accumulator/host addresses by ``length`` rows per
iteration. It is legal on matrix and DMA opcodes only.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

FRAME_BYTES = 12
PROGRAM_MAGIC = b"TPUP"
PROGRAM_VERSION = 1


class IsaError(ValueError):
    pass


class EncodeError(IsaError):
    """Instruction field outside its encodable range."""


class DecodeError(IsaError):
    """Frame cannot decode to a valid instruction."""


class UnknownOpcode(DecodeError):
    pass


class ReservedFlagSet(DecodeError):
    pass


class Opcode(Enum):
    NOP = "Nop"
    READ_HOST_MEMORY = "ReadHostMemory"
    READ_WEIGHTS = "ReadWeights"
    MATRIX_MULTIPLY = "MatrixMultiply"
    CONVOLVE = "Convolve"
    ACTIVATE = "Activate"
    WRITE_HOST_MEMORY = "WriteHostMemory"
    READ_HOST_MEMORY_ALT = "ReadHostMemoryAlt"
    WRITE_HOST_MEMORY_ALT = "WriteHostMemoryAlt"
    SET_CONFIG = "SetConfig"
    SYNC_A = "SyncA"
    SYNC_B = "SyncB"
    INTERRUPT_HOST = "InterruptHost"
    DEBUG_TAG = "DebugTag"
    HALT = "Halt"


# Wire byte per opcode. Convolve shares the MatrixMultiply byte and is
# distinguished by the convolve flag bit, giving 14 distinct encodings.
_OPCODE_BYTE = {
    Opcode.NOP: 0x00,
    Opcode.READ_HOST_MEMORY: 0x01,
    Opcode.READ_WEIGHTS: 0x02,
    Opcode.MATRIX_MULTIPLY: 0x03,
    Opcode.CONVOLVE: 0x03,
    Opcode.ACTIVATE: 0x04,
    Opcode.WRITE_HOST_MEMORY: 0x05,
    Opcode.READ_HOST_MEMORY_ALT: 0x06,
    Opcode.WRITE_HOST_MEMORY_ALT: 0x07,
    Opcode.SET_CONFIG: 0x08,
    Opcode.SYNC_A: 0x09,
    Opcode.SYNC_B: 0x0A,
    Opcode.INTERRUPT_HOST: 0x0B,
    Opcode.DEBUG_TAG: 0x0C,
    Opcode.HALT: 0x0D,
}

_BYTE_OPCODE = {}
for _op, _b in _OPCODE_BYTE.items():
    if _op is not Opcode.CONVOLVE:
        _BYTE_OPCODE[_b] = _op


# Matrix-unit flag bits (MatrixMultiply / Convolve).
MM_FLAG_ACT16 = 0x01        # activations are 16-bit
MM_FLAG_WEIGHT16 = 0x02     # weights are 16-bit
MM_FLAG_ACT_UNSIGNED = 0x04
MM_FLAG_WEIGHT_UNSIGNED = 0x08
MM_FLAG_CONVOLVE = 0x10     # selects Convolve on the shared wire byte
MM_FLAG_ACCUMULATE = 0x20   # add into accumulators instead of overwrite
MM_FLAG_SWITCH_TILE = 0x40  # latch the next weight tile before computing
_MM_FLAG_MASK = 0x7F

# Activation-unit flag bits (Activate).
ACT_FN_MASK = 0x03          # 0 identity, 1 relu, 2 sigmoid, 3 tanh
ACT_FN_IDENTITY = 0
ACT_FN_RELU = 1
ACT_FN_SIGMOID = 2
ACT_FN_TANH = 3
ACT_FLAG_POOL = 0x04
ACT_FLAG_POOL_AVG = 0x08    # 0 = max pooling
ACT_FLAG_OUT16 = 0x10
ACT_FLAG_OUT_UNSIGNED = 0x20
_ACT_FLAG_MASK = 0x3F


class ConfigReg(IntEnum):
    """SetConfig register ids (carried in the accumulator-address field)."""

    REQUANT_SCALE = 0   # int32 multiplier applied to accumulator values
    REQUANT_SHIFT = 1   # arithmetic right shift, 0..31
    CONV_GEOM = 2       # packed input-image geometry, see pack_conv_geom
    CONV_SLICE = 3      # bits 0..15 patch-vector offset, bits 16..31 channels
    POOL_GRID = 4       # packed pooled-grid geometry, see pack_pool_grid


def pack_conv_geom(h: int, w: int, r: int, s: int, stride: int,
                   pad_same: bool) -> int:
    """Input-image geometry register: H, W in 8 bits each, kernel R, S and
    stride in 4 bits each, plus a same-padding flag."""
    if not (1 <= h <= 255 and 1 <= w <= 255):
        raise EncodeError("conv image dims must be 1..255")
    if not (1 <= r <= 15 and 1 <= s <= 15):
        raise EncodeError("conv kernel dims must be 1..15")
    if not (1 <= stride <= 15):
        raise EncodeError("conv stride must be 1..15")
    return (h | (w << 8) | (r << 16) | (s << 20) | (stride << 24)
            | (int(bool(pad_same)) << 28))


def unpack_conv_geom(v: int) -> tuple[int, int, int, int, int, bool]:
    return (v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xF, (v >> 20) & 0xF,
            (v >> 24) & 0xF, bool((v >> 28) & 0x1))


def pack_conv_slice(k_offset: int, channels: int) -> int:
    if not (0 <= k_offset <= 0xFFFF):
        raise EncodeError("conv slice offset must fit 16 bits")
    if not (1 <= channels <= 0xFFFF):
        raise EncodeError("conv channel count must fit 16 bits")
    return k_offset | (channels << 16)


def unpack_conv_slice(v: int) -> tuple[int, int]:
    return v & 0xFFFF, (v >> 16) & 0xFFFF


def pack_pool_grid(h: int, w: int, batch: int) -> int:
    """Pooled-grid register: the (H, W) grid and image count the pooling
    Activate operates over, 8 bits each."""
    if not (1 <= h <= 255 and 1 <= w <= 255 and 1 <= batch <= 255):
        raise EncodeError("pool grid dims and batch must be 1..255")
    return h | (w << 8) | (batch << 16)


def unpack_pool_grid(v: int) -> tuple[int, int, int]:
    return v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF


def pack_dims(lo: int, hi: int) -> int:
    """Pack two 16-bit dimensions into the length field."""
    if not (0 <= lo <= 0xFFFF and 0 <= hi <= 0xFFFF):
        raise EncodeError("dimension does not fit 16 bits")
    return lo | (hi << 16)


def unpack_dims(length: int) -> tuple[int, int]:
    return length & 0xFFFF, (length >> 16) & 0xFFFF


def pack_pool_length(rows: int, win_h: int, win_w: int, grid_w: int) -> int:
    """Activate length for pooling: row count, window dims, grid width."""
    if not (0 <= rows <= 0xFFFF):
        raise EncodeError("pooled activate row count must fit 16 bits")
    if not (1 <= win_h <= 15 and 1 <= win_w <= 15):
        raise EncodeError("pool window dims must be 1..15")
    if not (1 <= grid_w <= 255):
        raise EncodeError("pool grid width must be 1..255")
    return rows | (win_h << 16) | (win_w << 20) | (grid_w << 24)


def unpack_pool_length(length: int) -> tuple[int, int, int, int]:
    return (length & 0xFFFF, (length >> 16) & 0xF, (length >> 20) & 0xF,
            (length >> 24) & 0xFF)


_REPEATABLE = {
    Opcode.MATRIX_MULTIPLY, Opcode.CONVOLVE, Opcode.READ_HOST_MEMORY,
    Opcode.WRITE_HOST_MEMORY, Opcode.READ_HOST_MEMORY_ALT,
    Opcode.WRITE_HOST_MEMORY_ALT,
}


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    ub_addr: int = 0
    acc_addr: int = 0
    length: int = 0
    flags: int = 0
    repeat: int = 0

    # Field aliases for opcodes that reinterpret the encoding slots.
    @property
    def host_addr(self) -> int:
        return self.acc_addr

    @property
    def wmem_tile(self) -> int:
        return self.ub_addr

    @property
    def reg_id(self) -> int:
        return self.acc_addr

    def check_fields(self) -> None:
        if not (0 <= self.ub_addr < 1 << 24):
            raise EncodeError(f"ub_addr {self.ub_addr} exceeds 24 bits")
        if not (0 <= self.acc_addr < 1 << 16):
            raise EncodeError(f"acc_addr {self.acc_addr} exceeds 16 bits")
        if not (0 <= self.length < 1 << 32):
            raise EncodeError(f"length {self.length} exceeds 32 bits")
        if not (0 <= self.flags < 1 << 8):
            raise EncodeError(f"flags {self.flags} exceeds 8 bits")
        if not (0 <= self.repeat < 1 << 8):
            raise EncodeError(f"repeat {self.repeat} exceeds 8 bits")
        _check_flags(self.opcode, self.flags)
        if self.repeat and self.opcode not in _REPEATABLE:
            raise EncodeError(f"repeat not supported on {self.opcode.value}")
        if self.opcode is Opcode.CONVOLVE and not self.flags & MM_FLAG_CONVOLVE:
            raise EncodeError("Convolve requires the convolve flag bit")
        if (self.opcode is Opcode.MATRIX_MULTIPLY
                and self.flags & MM_FLAG_CONVOLVE):
            raise EncodeError("convolve flag set on MatrixMultiply")


def _check_flags(opcode: Opcode, flags: int) -> None:
    if opcode in (Opcode.MATRIX_MULTIPLY, Opcode.CONVOLVE):
        mask = _MM_FLAG_MASK
    elif opcode is Opcode.ACTIVATE:
        mask = _ACT_FLAG_MASK
    else:
        mask = 0x00
    if flags & ~mask:
        raise ReservedFlagSet(
            f"reserved flag bits 0x{flags & ~mask:02x} set for {opcode.value}")


def encode(instr: Instruction) -> bytes:
    """Encode to the fixed 12-byte frame; decode(encode(i)) == i."""
    instr.check_fields()
    return struct.pack(
        "<BB3sHIB",
        _OPCODE_BYTE[instr.opcode],
        instr.flags,
        instr.ub_addr.to_bytes(3, "little"),
        instr.acc_addr,
        instr.length,
        instr.repeat,
    )


def decode(frame: bytes) -> Instruction:
    """Decode a 12-byte frame. Raises UnknownOpcode / ReservedFlagSet but
    never aborts on arbitrary input."""
    if len(frame) != FRAME_BYTES:
        raise DecodeError(f"frame must be {FRAME_BYTES} bytes, got {len(frame)}")
    op_byte, flags, ub3, acc_addr, length, repeat = struct.unpack(
        "<BB3sHIB", frame)
    opcode = _BYTE_OPCODE.get(op_byte)
    if opcode is None:
        raise UnknownOpcode(f"unknown opcode byte 0x{op_byte:02x}")
    if opcode is Opcode.MATRIX_MULTIPLY and flags & MM_FLAG_CONVOLVE:
        opcode = Opcode.CONVOLVE
    _check_flags(opcode, flags)
    instr = Instruction(
        opcode=opcode,
        ub_addr=int.from_bytes(ub3, "little"),
        acc_addr=acc_addr,
        length=length,
        flags=flags,
        repeat=repeat,
    )
    if repeat and opcode not in _REPEATABLE:
        raise DecodeError(f"repeat field set on {opcode.value}")
    return instr


@dataclass
class Program:
    """Ordered instruction sequence; the last instruction must be Halt."""

    instructions: list[Instruction] = field(default_factory=list)
    name: str = ""
    target_config_hash: str = ""

    def __iter__(self):
        return iter(self.instructions)

    def __len__(self):
        return len(self.instructions)

    def to_bytes(self) -> bytes:
        parts = [PROGRAM_MAGIC, struct.pack("<HI", PROGRAM_VERSION,
                                            len(self.instructions))]
        parts.extend(encode(i) for i in self.instructions)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, name: str = "") -> "Program":
        if blob[:4] != PROGRAM_MAGIC:
            raise DecodeError("bad program magic")
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != PROGRAM_VERSION:
            raise DecodeError(f"unsupported program version {version}")
        body = blob[10:]
        if len(body) != count * FRAME_BYTES:
            raise DecodeError(
                f"program body holds {len(body)} bytes, expected {count} frames")
        instrs = [decode(body[i * FRAME_BYTES:(i + 1) * FRAME_BYTES])
                  for i in range(count)]
        return cls(instructions=instrs, name=name)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Program":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def config_hash(cfg) -> str:
    """Stable short hash of a TpuConfig for program metadata."""
    from .archconfig import config_to_dict
    import json
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# Static validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    code: str
    index: int  # instruction index, -1 for program-level findings
    message: str

    def __str__(self):
        where = f"@{self.index}" if self.index >= 0 else ""
        return f"[{self.code}{where}] {self.message}"


def _expanded_spans(instr: Instruction):
    """Yield (ub_base, acc_base) for each repeat iteration."""
    if instr.opcode in (Opcode.MATRIX_MULTIPLY, Opcode.CONVOLVE):
        step = instr.length & 0xFFFF if instr.opcode is Opcode.CONVOLVE \
            else instr.length
    else:
        step = instr.length
    for it in range(instr.repeat + 1):
        yield instr.ub_addr + it * step, instr.acc_addr + it * step


def validate(program: Program, cfg) -> list[Diagnostic]:
    """Static checks: bounds, Halt discipline, FIFO credit, and reads of
    rows nothing has written. Returns diagnostics instead of raising."""
    import numpy as np

    out: list[Diagnostic] = []
    instrs = program.instructions
    if not instrs or instrs[-1].opcode is not Opcode.HALT:
        out.append(Diagnostic("MissingHalt", -1, "program must end with Halt"))
    for i, ins in enumerate(instrs[:-1]):
        if ins.opcode is Opcode.HALT:
            out.append(Diagnostic("InstrAfterHalt", i,
                                  "instructions follow Halt"))
            break

    ub_rows = cfg.ub_rows
    tiles_total = cfg.weight_mem_bytes  # recomputed per width below
    ub_written = np.zeros(ub_rows, dtype=bool)
    acc_written = np.zeros(cfg.acc_entries, dtype=bool)
    fifo_credit = 0
    regs: dict[int, int] = {}

    def err(code, i, msg):
        out.append(Diagnostic(code, i, msg))

    for i, ins in enumerate(instrs):
        try:
            ins.check_fields()
        except IsaError as exc:
            err("BadFields", i, str(exc))
            continue
        op = ins.opcode
        if op in (Opcode.READ_HOST_MEMORY, Opcode.READ_HOST_MEMORY_ALT):
            for ub, _ in _expanded_spans(ins):
                if ub + ins.length > ub_rows:
                    err("UbOutOfRange", i,
                        f"rows [{ub}, {ub + ins.length}) exceed {ub_rows}")
                    break
                ub_written[ub:ub + ins.length] = True
        elif op in (Opcode.WRITE_HOST_MEMORY, Opcode.WRITE_HOST_MEMORY_ALT):
            for ub, _ in _expanded_spans(ins):
                if ub + ins.length > ub_rows:
                    err("UbOutOfRange", i,
                        f"rows [{ub}, {ub + ins.length}) exceed {ub_rows}")
                    break
                if not ub_written[ub:ub + ins.length].all():
                    err("ReadUnwrittenUb", i,
                        "host write reads rows never written")
        elif op is Opcode.READ_WEIGHTS:
            wbits = 16 if ins.flags & MM_FLAG_WEIGHT16 else 8
            tiles_total = cfg.weight_mem_bytes // cfg.tile_bytes(8)
            if ins.wmem_tile + ins.length > tiles_total:
                err("WmemOutOfRange", i,
                    f"tiles [{ins.wmem_tile}, {ins.wmem_tile + ins.length}) "
                    f"exceed weight memory")
            fifo_credit += ins.length
        elif op in (Opcode.MATRIX_MULTIPLY, Opcode.CONVOLVE):
            rows = (ins.length & 0xFFFF) * (ins.length >> 16) \
                if op is Opcode.CONVOLVE else ins.length
            if rows == 0:
                err("ZeroLength", i, "matrix operation covers zero rows")
            if ins.flags & MM_FLAG_SWITCH_TILE:
                if fifo_credit <= 0:
                    err("FifoUnderflow", i,
                        "tile switch without a queued weight tile")
                else:
                    fifo_credit -= 1
            act_rows_per_row = 2 if ins.flags & MM_FLAG_ACT16 else 1
            for ub, acc in _expanded_spans(ins):
                span = rows * act_rows_per_row
                if ub + span > ub_rows:
                    err("UbOutOfRange", i,
                        f"rows [{ub}, {ub + span}) exceed {ub_rows}")
                    break
                if acc + rows > cfg.acc_entries:
                    err("AccOutOfRange", i,
                        f"accumulator rows [{acc}, {acc + rows}) exceed "
                        f"{cfg.acc_entries}")
                    break
                if op is Opcode.MATRIX_MULTIPLY and \
                        not ub_written[ub:ub + span].all():
                    err("ReadUnwrittenUb", i,
                        "matrix input rows never written by host DMA or "
                        "activation output")
                if op is Opcode.CONVOLVE:
                    geom = regs.get(ConfigReg.CONV_GEOM)
                    cslice = regs.get(ConfigReg.CONV_SLICE)
                    if geom is None or cslice is None:
                        err("BadConv", i,
                            "convolve without geometry/slice registers")
                    else:
                        h, w, r, s, stride, pad = unpack_conv_geom(geom)
                        _, channels = unpack_conv_slice(cslice)
                        pos, imgs = unpack_dims(ins.length)
                        ph = h + (r - 1 if pad else 0)
                        pw = w + (s - 1 if pad else 0)
                        oh = (ph - r) // stride + 1
                        ow = (pw - s) // stride + 1
                        if pos != oh * ow:
                            err("BadConv", i,
                                f"convolve positions {pos} != grid {oh}x{ow}")
                        n_planes = -(-channels // cfg.matrix_dim)
                        img_rows = n_planes * h * w * imgs
                        if ub + img_rows > ub_rows:
                            err("UbOutOfRange", i,
                                "convolve image exceeds unified buffer")
                        elif not ub_written[ub:ub + img_rows].all():
                            err("ReadUnwrittenUb", i,
                                "convolve image rows never written")
                acc_written[acc:acc + rows] = True
        elif op is Opcode.ACTIVATE:
            pooled = bool(ins.flags & ACT_FLAG_POOL)
            rows, win_h, win_w, grid_w = unpack_pool_length(ins.length)
            if not pooled:
                rows = ins.length  # full 32-bit row count when not pooling
            out_rows = rows
            if pooled:
                grid = regs.get(ConfigReg.POOL_GRID)
                if grid is None:
                    err("BadPool", i, "pooled activate without grid register")
                    continue
                gh, gw, gb = unpack_pool_grid(grid)
                if gw != grid_w or rows != gh * gw * gb or win_h == 0 \
                        or win_w == 0 or gh % win_h or gw % win_w:
                    err("BadPool", i,
                        f"pool window {win_h}x{win_w} does not tile grid "
                        f"{gh}x{gw} over {gb} images ({rows} rows)")
                    continue
                out_rows = rows // (win_h * win_w)
            if ins.acc_addr + rows > cfg.acc_entries:
                err("AccOutOfRange", i,
                    f"accumulator rows [{ins.acc_addr}, "
                    f"{ins.acc_addr + rows}) exceed {cfg.acc_entries}")
                continue
            if rows and not acc_written[ins.acc_addr:ins.acc_addr + rows].all():
                err("ReadUnwrittenAcc", i,
                    "activate reads accumulator rows never written")
            out_span = out_rows * (2 if ins.flags & ACT_FLAG_OUT16 else 1)
            if ins.ub_addr + out_span > ub_rows:
                err("UbOutOfRange", i,
                    f"rows [{ins.ub_addr}, {ins.ub_addr + out_span}) "
                    f"exceed {ub_rows}")
                continue
            ub_written[ins.ub_addr:ins.ub_addr + out_span] = True
        elif op is Opcode.SET_CONFIG:
            regs[ins.reg_id] = ins.length
        # Sync, InterruptHost, DebugTag, Nop, Halt need no static checks.
    return out
