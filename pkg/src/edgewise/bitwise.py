"""xnor/popcount kernels over bit-packed +-1 vectors and multi-bit layer execution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from edgewise.mbq import WORD_BITS, GroupedLayer, QuantGroup, pack_bits, unpack_bits


class LengthMismatchError(ValueError):
    pass


class IncompatibleGroupingError(ValueError):
    pass


def _dtype(word_bits):
    return np.uint64 if word_bits == 64 else np.uint32


def _tail_mask(n: int, word_bits: int) -> np.ndarray:
    """Per-word masks that keep only the first ``n`` logical bits."""
    words = -(-n // word_bits)
    dt = _dtype(word_bits)
    mask = np.full(words, np.iinfo(dt).max, dtype=dt)
    rem = n % word_bits
    if rem:
        mask[-1] = dt((1 << rem) - 1)
    return mask


@dataclass(frozen=True)
class PackedVector:
    n: int
    words: np.ndarray
    word_bits: int = WORD_BITS

    @classmethod
    def pack(cls, values, word_bits: int = WORD_BITS) -> "PackedVector":
        values = np.asarray(values)
        return cls(values.size, pack_bits(values, word_bits), word_bits)

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.words, self.n, self.word_bits)


def pm1_dot(a: PackedVector, b: PackedVector) -> int:
    """Exact +-1 inner product: ``2 * popcount(xnor(a, b)) - n`` over the first n bits."""
    if a.n != b.n or a.word_bits != b.word_bits:
        raise LengthMismatchError(f"lengths {a.n} and {b.n} differ")
    same = ~(a.words ^ b.words) & _tail_mask(a.n, a.word_bits)
    return 2 * int(np.bitwise_count(same).sum()) - a.n


@dataclass
class QuantizedActivation:
    """Activation in multi-bit form ``x_hat = x_ref + codes @ gamma``; codes are N x I_x over +-1."""

    x_ref: float
    codes: np.ndarray
    gamma: np.ndarray

    def values(self) -> np.ndarray:
        return self.x_ref + self.codes.astype(np.float64) @ self.gamma

    def segment(self, start: int, stop: int) -> "QuantizedActivation":
        return QuantizedActivation(self.x_ref, self.codes[start:stop], self.gamma)


def multibit_dot(group: QuantGroup, act: QuantizedActivation, word_bits: int = WORD_BITS) -> float:
    """``dot(B alpha, x_ref + D gamma)`` evaluated with packed popcounts only."""
    if act.codes.shape[0] != group.n:
        raise LengthMismatchError(f"segment of {act.codes.shape[0]} vs group of {group.n}")
    if group.bits == 0:
        return 0.0
    ones = PackedVector.pack(np.ones(group.n, dtype=np.int8), word_bits)
    betas = [PackedVector.pack(group.basis[:, i], word_bits) for i in range(group.bits)]
    ds = [PackedVector.pack(act.codes[:, j], word_bits) for j in range(act.codes.shape[1])]
    total = 0.0
    for a_i, beta in zip(group.alpha, betas):
        total += act.x_ref * a_i * pm1_dot(beta, ones)
        for g_j, d in zip(act.gamma, ds):
            total += a_i * g_j * pm1_dot(beta, d)
    return float(total)


def _pack_rows(pm1: np.ndarray, word_bits: int) -> np.ndarray:
    """Pack the last axis of a +-1 array into words; returns ``(..., words)``."""
    n = pm1.shape[-1]
    words = -(-n // word_bits)
    bits = np.zeros(pm1.shape[:-1] + (words * word_bits,), dtype=np.uint8)
    bits[..., :n] = pm1 > 0
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return packed.view(f"<u{word_bits // 8}").astype(_dtype(word_bits))


def multibit_matvec(layer: GroupedLayer, act: QuantizedActivation, word_bits: int = WORD_BITS):
    """Fully connected product of a multi-bit layer with a multi-bit activation.

    Returns ``(outputs, popcount_word_ops)``.
    """
    if len(layer.shape) != 2 or not layer.structure.row_aligned():
        raise IncompatibleGroupingError(f"{layer.structure} on {layer.shape} is not row aligned")
    c_out, c_in = layer.shape
    if act.codes.shape[0] != c_in:
        raise LengthMismatchError(f"activation of {act.codes.shape[0]} vs layer input {c_in}")
    n = layer.group_size
    per_row = c_in // n
    mask = _tail_mask(n, word_bits)
    words = mask.size

    # group bases: G x slots x words ; activation codes: per_row x I_x x words
    beta = _pack_rows(np.transpose(layer.basis, (0, 2, 1)), word_bits)
    segs = act.codes.reshape(per_row, n, -1).transpose(0, 2, 1)
    d = _pack_rows(segs, word_bits)
    d = np.tile(d, (c_out, 1, 1))

    ones_count = 2 * np.bitwise_count(beta & mask).sum(axis=-1).astype(np.int64) - n
    xnor = ~(beta[:, :, None, :] ^ d[:, None, :, :]) & mask
    cross = 2 * np.bitwise_count(xnor).sum(axis=-1).astype(np.int64) - n

    alpha = np.where(layer.active, layer.alpha, 0.0)
    per_group = act.x_ref * (alpha * ones_count).sum(axis=1)
    per_group += np.einsum("gi,gij,j->g", alpha, cross, act.gamma)
    out = per_group.reshape(c_out, per_row).sum(axis=1)

    ops = int(layer.bits().sum()) * (act.codes.shape[1] + 1) * words
    return out, ops
