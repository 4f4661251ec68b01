"""Weight grouping, greedy multi-bit sketching, bit packing, and storage/error analytics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from edgewise.numerics import SingularSystemError, least_squares

WORD_BITS = 64
DEFAULT_IMAX = 8
ZERO_GUARD = 1e-12


class IndivisibleShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GroupingStructure:
    """How a layer is cut into equal groups.

    ``kind`` is one of ``channelwise``, ``kernelwise``, ``pointwise``,
    ``subchannelwise`` (``param`` = pieces per output channel) or
    ``rowchunk`` (``param`` = group length within each output row).
    """

    kind: str
    param: int = 0

    CODES = {"channelwise": 0, "kernelwise": 1, "pointwise": 2, "subchannelwise": 3, "rowchunk": 4}

    def __post_init__(self):
        if self.kind not in self.CODES:
            raise ValueError(f"unknown grouping {self.kind!r}")
        if self.kind in ("subchannelwise", "rowchunk") and self.param < 1:
            raise ValueError(f"{self.kind} needs a positive parameter")

    @property
    def code(self) -> int:
        return self.CODES[self.kind]

    @classmethod
    def from_code(cls, code: int, param: int = 0) -> "GroupingStructure":
        for kind, c in cls.CODES.items():
            if c == code:
                return cls(kind, param)
        raise ValueError(f"unknown grouping code {code}")

    @classmethod
    def parse(cls, text: str) -> "GroupingStructure":
        """``channelwise`` or ``subchannelwise(2)`` style."""
        text = text.strip()
        if "(" in text:
            kind, arg = text.rstrip(")").split("(", 1)
            return cls(kind.strip(), int(arg))
        return cls(text)

    def __str__(self):
        return f"{self.kind}({self.param})" if self.kind in ("subchannelwise", "rowchunk") else self.kind

    def row_aligned(self) -> bool:
        """Groups are contiguous slices of one output row (fc execution friendly)."""
        return self.kind in ("channelwise", "subchannelwise", "rowchunk")

    def group_index(self, shape) -> np.ndarray:
        """``G x n`` array of flat (row-major) indices, one row per group."""
        shape = tuple(int(s) for s in shape)
        total = math.prod(shape)
        c_out = shape[0]
        row = total // c_out
        flat = np.arange(total).reshape(shape)
        if self.kind == "channelwise":
            return flat.reshape(c_out, row)
        if self.kind == "subchannelwise":
            if row % self.param:
                raise IndivisibleShapeError(f"row of {row} not divisible into {self.param} pieces")
            return flat.reshape(c_out * self.param, row // self.param)
        if self.kind == "rowchunk":
            if row % self.param:
                raise IndivisibleShapeError(f"row of {row} not divisible by chunk {self.param}")
            return flat.reshape(total // self.param, self.param)
        if len(shape) != 4:
            raise IndivisibleShapeError(f"{self.kind} grouping needs a conv-shaped tensor, got {shape}")
        c, d, kh, kw = shape
        if self.kind == "kernelwise":
            return flat.reshape(c * d, kh * kw)
        # pointwise: w[c, :, h, w]
        return flat.transpose(0, 2, 3, 1).reshape(c * kh * kw, d)


def partition(weights, structure: GroupingStructure) -> list:
    """Group views as a list of n-vectors in deterministic order."""
    w = np.asarray(weights, dtype=np.float64)
    idx = structure.group_index(w.shape)
    flat = w.reshape(-1)
    return [flat[row] for row in idx]


@dataclass
class QuantGroup:
    """One group in multi-bit form: ``w_hat = basis @ alpha``.

    ``basis`` is ``n x I_g`` over {-1, +1} (int8); ``alpha`` is positive.
    """

    basis: np.ndarray
    alpha: np.ndarray

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def bits(self) -> int:
        return self.basis.shape[1]


def _sign_pm1(x):
    return np.where(x < 0, -1, 1).astype(np.int8)


def relative_residual(eps, w) -> float:
    """``||eps / w||^2`` with near-zero weights contributing nothing."""
    safe = np.abs(w) >= ZERO_GUARD
    ratio = np.zeros_like(eps)
    ratio[safe] = eps[safe] / w[safe]
    return float(ratio @ ratio)


def sketch_group(w_g, i_max: int = DEFAULT_IMAX, sigma: float = 0.0, trace=None) -> QuantGroup:
    """Greedy residual-sign basis construction with a least-squares refit per basis.

    Stops when the relative residual is at most ``sigma``, at ``i_max`` bases,
    or once the residual vanishes (further bases would be linearly dependent).
    Negative coordinates are folded into their basis column.
    """
    if i_max < 1 or sigma < 0:
        raise ValueError("need i_max >= 1 and sigma >= 0")
    w = np.asarray(w_g, dtype=np.float64)
    n = w.size
    scale = float(np.abs(w).max()) if n else 0.0
    basis = np.zeros((n, 0), dtype=np.int8)
    alpha = np.zeros(0)
    eps = w.copy()
    while relative_residual(eps, w) > sigma and basis.shape[1] < min(i_max, n):
        if np.abs(eps).max() <= 1e-13 * scale:
            break
        candidate = np.column_stack([basis, _sign_pm1(eps)])
        try:
            new_alpha = least_squares(candidate.astype(np.float64), w)
        except SingularSystemError:
            break
        basis, alpha = candidate, new_alpha
        eps = w - basis @ alpha
        if trace is not None:
            trace.append(float(eps @ eps))
    return normalize_signs(QuantGroup(basis, alpha))


def normalize_signs(group: QuantGroup) -> QuantGroup:
    """Flip columns with negative coordinates so every coordinate is non-negative."""
    neg = group.alpha < 0
    if not neg.any():
        return group
    basis = group.basis.copy()
    basis[:, neg] *= -1
    return QuantGroup(basis, np.abs(group.alpha))


def reconstruct(group: QuantGroup) -> np.ndarray:
    if group.bits == 0:
        return np.zeros(group.n)
    return group.basis.astype(np.float64) @ group.alpha


@dataclass
class GroupedLayer:
    """All groups of one layer in slot form for vectorized training.

    ``basis`` is ``G x n x I_max`` int8, ``alpha`` is ``G x I_max`` and
    ``active`` marks live slots; pruning clears slots, so ``I_g`` is the
    number of active slots of group ``g``.
    """

    shape: tuple
    structure: GroupingStructure
    basis: np.ndarray
    alpha: np.ndarray
    active: np.ndarray

    @property
    def num_groups(self) -> int:
        return self.basis.shape[0]

    @property
    def group_size(self) -> int:
        return self.basis.shape[1]

    @property
    def slots(self) -> int:
        return self.basis.shape[2]

    def bits(self) -> np.ndarray:
        return self.active.sum(axis=1)

    def group(self, g: int) -> QuantGroup:
        keep = self.active[g]
        return QuantGroup(self.basis[g][:, keep], self.alpha[g][keep])

    def groups(self) -> list:
        return [self.group(g) for g in range(self.num_groups)]

    @classmethod
    def from_groups(cls, shape, structure, groups, slots: int | None = None) -> "GroupedLayer":
        n = groups[0].n
        slots = max([g.bits for g in groups] + [slots or 0, 1])
        basis = np.ones((len(groups), n, slots), dtype=np.int8)
        alpha = np.zeros((len(groups), slots))
        active = np.zeros((len(groups), slots), dtype=bool)
        for i, grp in enumerate(groups):
            basis[i, :, :grp.bits] = grp.basis
            alpha[i, :grp.bits] = grp.alpha
            active[i, :grp.bits] = True
        return cls(tuple(shape), structure, basis, alpha, active)

    def group_values(self) -> np.ndarray:
        """``G x n`` reconstructed group vectors."""
        a = np.where(self.active, self.alpha, 0.0)
        return np.einsum("gni,gi->gn", self.basis, a, optimize=True)

    def dense(self) -> np.ndarray:
        out = np.zeros(math.prod(self.shape))
        out[self.structure.group_index(self.shape)] = self.group_values()
        return out.reshape(self.shape)

    def copy(self) -> "GroupedLayer":
        return GroupedLayer(self.shape, self.structure, self.basis.copy(), self.alpha.copy(),
                            self.active.copy())


def sketch_layer(weights, structure: GroupingStructure, i_max: int = DEFAULT_IMAX,
                 sigma: float = 0.0) -> GroupedLayer:
    w = np.asarray(weights, dtype=np.float64)
    groups = [sketch_group(v, i_max, sigma) for v in partition(w, structure)]
    return GroupedLayer.from_groups(w.shape, structure, groups, slots=i_max)


def avg_bitwidth(layer: GroupedLayer) -> float:
    return float(layer.bits().mean())


def storage_ratio(N: int, n: int, I: float) -> float:
    """Compression of one layer vs 32-bit floats (bases plus one 32-bit coordinate per bit)."""
    if N <= 0 or n <= 0 or I <= 0 or N % n:
        raise ValueError("need N, n, I > 0 with n dividing N")
    return 32.0 * N / (I * N + I * 32.0 * N / n)


def error_bound(w_g, bits: int, lam: float = 0.0) -> float:
    """Upper bound on the squared sketch residual after ``bits`` greedy bases."""
    w = np.asarray(w_g, dtype=np.float64)
    n = w.size
    if not 0 <= lam < n:
        raise ValueError("need 0 <= lam < n")
    return float(w @ w) * (1.0 - 1.0 / (n - lam)) ** bits


def pack_bits(column, word_bits: int = WORD_BITS) -> np.ndarray:
    """Pack a +-1 vector into words: +1 -> 1, -1 -> 0, little-endian bit order, zero padding."""
    col = np.asarray(column)
    if col.ndim != 1 or not np.all((col == 1) | (col == -1)):
        raise ValueError("entries must be -1 or +1")
    dtype = np.uint64 if word_bits == 64 else np.uint32
    words = -(-col.size // word_bits)
    bits = np.zeros(words * word_bits, dtype=np.uint8)
    bits[:col.size] = col > 0
    packed = np.packbits(bits, bitorder="little")
    return packed.view(f"<u{word_bits // 8}").astype(dtype)


def unpack_bits(words, n: int, word_bits: int = WORD_BITS) -> np.ndarray:
    words = np.asarray(words).astype(f"<u{word_bits // 8}")
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")[:n]
    if bits.size < n:
        raise ValueError("not enough words for requested length")
    return np.where(bits == 1, 1, -1).astype(np.int8)
