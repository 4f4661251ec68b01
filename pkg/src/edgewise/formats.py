"""Little-endian binary files for multi-bit models (MBN1) and prefix-ordered sparse tensors (DCSR1).

Floating values are stored as 32-bit floats, so a model round-trips bit-exactly
once its coordinates and biases are 32-bit representable (always true after
one load).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from edgewise.alq import QuantModel
from edgewise.dress import DressCsr
from edgewise.mbq import WORD_BITS, GroupedLayer, GroupingStructure, pack_bits, unpack_bits

MBN_MAGIC = b"MBN1"
DCSR_MAGIC = b"DCSR1"
VERSION = 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("truncated file")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        if self.pos + dt.itemsize * count > len(self.buf):
            raise FormatError("truncated file")
        out = np.frombuffer(self.buf, dt, count, self.pos).copy()
        self.pos += dt.itemsize * count
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def _check_header(r: _Reader, magic: bytes):
    if r.buf[:len(magic)] != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    r.pos = len(magic)
    (version,) = r.take("<H")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")


def dump_mbn(qm: QuantModel) -> bytes:
    out = bytearray(MBN_MAGIC)
    out += struct.pack("<HI", VERSION, len(qm.layers))
    for layer, bias in zip(qm.layers, qm.biases):
        s = layer.structure
        out += struct.pack("<BIB", s.code, s.param, len(layer.shape))
        out += struct.pack(f"<{len(layer.shape)}I", *layer.shape)
        out += struct.pack("<IIB", layer.group_size, layer.num_groups, layer.slots)
        for g in range(layer.num_groups):
            grp = layer.group(g)
            out += struct.pack("<B", grp.bits)
            for i in range(grp.bits):
                out += pack_bits(grp.basis[:, i], WORD_BITS).astype("<u8").tobytes()
            out += grp.alpha.astype("<f4").tobytes()
        out += struct.pack("<I", bias.size)
        out += np.asarray(bias).astype("<f4").tobytes()
    return bytes(out)


def parse_mbn(buf: bytes) -> QuantModel:
    r = _Reader(buf)
    _check_header(r, MBN_MAGIC)
    (count,) = r.take("<I")
    layers, biases = [], []
    for _ in range(count):
        code, param, ndim = r.take("<BIB")
        shape = r.take(f"<{ndim}I")
        n, G, slots = r.take("<IIB")
        structure = GroupingStructure.from_code(code, param)
        if structure.group_index(shape).shape != (G, n):
            raise FormatError("group layout does not match the stored shape")
        words = -(-n // WORD_BITS)
        basis = np.ones((G, n, slots), dtype=np.int8)
        alpha = np.zeros((G, slots))
        active = np.zeros((G, slots), dtype=bool)
        for g in range(G):
            (bits,) = r.take("<B")
            if bits > slots:
                raise FormatError("group bitwidth exceeds slot count")
            for i in range(bits):
                basis[g, :, i] = unpack_bits(r.array("<u8", words), n, WORD_BITS)
            alpha[g, :bits] = r.array("<f4", bits)
            active[g, :bits] = True
        layers.append(GroupedLayer(tuple(shape), structure, basis, alpha, active))
        (blen,) = r.take("<I")
        biases.append(r.array("<f4", blen).astype(np.float64))
    r.done()
    return QuantModel(layers, biases)


def save_mbn(path, qm: QuantModel) -> None:
    Path(path).write_bytes(dump_mbn(qm))


def load_mbn(path) -> QuantModel:
    return parse_mbn(Path(path).read_bytes())


def dump_dcsr(csr: DressCsr) -> bytes:
    if csr.row_size > 256:
        raise FormatError("DCSR1 stores 8-bit column indices; row size must be at most 256")
    out = bytearray(DCSR_MAGIC)
    out += struct.pack("<HIII", VERSION, csr.row_size, csr.rows, len(csr.nz))
    for s, c in zip(csr.levels, csr.nz):
        out += struct.pack("<fI", s, c)
    out += csr.indices.astype("<u1").tobytes()
    out += csr.values.astype("<f4").tobytes()
    return bytes(out)


def parse_dcsr(buf: bytes) -> DressCsr:
    r = _Reader(buf)
    _check_header(r, DCSR_MAGIC)
    row_size, rows, K = r.take("<III")
    levels, nz = [], []
    for _ in range(K):
        s, c = r.take("<fI")
        levels.append(s)
        nz.append(c)
    if not nz:
        raise FormatError("empty level table")
    indices = r.array("<u1", rows * nz[0]).reshape(rows, nz[0])
    values = r.array("<f4", rows * nz[0]).astype(np.float64).reshape(rows, nz[0])
    r.done()
    try:
        return DressCsr(row_size, levels, nz, indices, values)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_dcsr(path, csr: DressCsr) -> None:
    Path(path).write_bytes(dump_dcsr(csr))


def load_dcsr(path) -> DressCsr:
    return parse_dcsr(Path(path).read_bytes())
