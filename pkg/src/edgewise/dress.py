"""Nested sparse subnets trained in parallel, and the prefix-ordered CSR format that stores them.

Every layer is cut into rows of equal length. Each row keeps the same number
of nonzeros at a given sparsity level, and the masks of sparser levels are
subsets of the denser ones, so one importance-ordered index/value table per
layer serves every level by reading a row prefix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from edgewise.model import LabeledBatch, MlpModel, accuracy, loss_and_grads, minibatches
from edgewise.numerics import AmsGradState, amsgrad_step, make_rng

log = logging.getLogger(__name__)

INDEX_LIMIT = 256


class NonNestedMaskError(ValueError):
    pass


class LevelNotFoundError(IndexError):
    pass


class RowSizeError(ValueError):
    pass


def row_count(s: float, N: int) -> int:
    """Nonzeros kept per row of length ``N`` at sparsity ``s`` (round half up, at least one)."""
    return max(1, int(math.floor((1.0 - s) * N + 0.5)))


def default_row_size(c_in: int, limit: int = INDEX_LIMIT) -> int:
    """Output-neuron rows, split into the largest equal pieces that 8-bit indices can address."""
    if c_in <= limit:
        return c_in
    return max(d for d in range(1, limit + 1) if c_in % d == 0)


def as_rows(w, row_size: int) -> np.ndarray:
    w = np.asarray(w)
    if w.size % row_size or w.shape[-1] % row_size:
        raise RowSizeError(f"row size {row_size} does not divide {w.shape}")
    return w.reshape(-1, row_size)


def magnitude_order(rows: np.ndarray) -> np.ndarray:
    """Per-row positions by descending magnitude, ties by ascending index."""
    return np.argsort(-np.abs(rows), axis=1, kind="stable")


def row_sample_masks(w, levels, counts=None) -> list:
    """Nested boolean masks over the rows of ``w`` (G x N), one per sparsity level.

    ``counts`` overrides the per-level nonzeros per row (used with layer allocations).
    """
    rows = np.asarray(w, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("w must be rows x N")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    N = rows.shape[1]
    if counts is None:
        counts = [row_count(s, N) for s in levels]
    order = magnitude_order(rows)
    masks = []
    for c in counts:
        m = np.zeros(rows.shape, dtype=bool)
        np.put_along_axis(m, order[:, :c], True, axis=1)
        masks.append(m)
    return masks


def is_nested(masks) -> bool:
    return all(not np.any(b & ~a) for a, b in zip(masks, masks[1:]))


def allocate_layerwise_sparsity(weights, s: float) -> list:
    """Per-layer sparsities implied by keeping the globally largest ``(1 - s)`` share of magnitudes."""
    if not 0 <= s < 1:
        raise ValueError("s must lie in [0, 1)")
    flat = np.concatenate([np.abs(np.asarray(w, dtype=np.float64)).ravel() for w in weights])
    keep = int(math.floor((1.0 - s) * flat.size + 0.5))
    order = np.argsort(-flat, kind="stable")[:keep]
    kept = np.zeros(flat.size, dtype=bool)
    kept[order] = True
    out, pos = [], 0
    for w in weights:
        size = np.asarray(w).size
        out.append(float(1.0 - kept[pos:pos + size].sum() / size))
        pos += size
    return out


def loss_weights(gamma: float, levels) -> np.ndarray:
    """Normalized subnet loss weights proportional to ``(1 - s_k) ** gamma``."""
    levels = np.asarray(levels, dtype=np.float64)
    if np.any((levels <= 0) | (levels >= 1)):
        raise ValueError("levels must lie in (0, 1)")
    a = (1.0 - levels) ** gamma
    return a / a.sum()


@dataclass
class SparsityLadder:
    """Sparsity levels, their per-layer allocation, and the subnet loss weights."""

    levels: list
    gamma: float = 0.0
    allocations: list = field(default_factory=list)  # allocations[k][l]

    def __post_init__(self):
        if not self.levels or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be non-empty and strictly increasing")
        if any(not 0 <= s < 1 for s in self.levels):
            raise ValueError("levels must lie in [0, 1)")

    @property
    def pi(self) -> np.ndarray:
        if self.gamma == 0 or self.levels[0] == 0:
            # uniform weights; a zero level only appears in the dense reduction
            if self.gamma != 0:
                raise ValueError("a zero sparsity level needs gamma = 0")
            return np.full(len(self.levels), 1.0 / len(self.levels))
        return loss_weights(self.gamma, self.levels)

    def allocate(self, weights) -> None:
        self.allocations = [allocate_layerwise_sparsity(weights, s) for s in self.levels]

    def layer_levels(self, l: int) -> list:
        if self.allocations:
            return [alloc[l] for alloc in self.allocations]
        return list(self.levels)


def model_masks(model: MlpModel, ladder: SparsityLadder, row_sizes) -> list:
    """``masks[k][l]`` in each layer's weight shape, from the current magnitudes."""
    per_layer = []
    for l, (w, r) in enumerate(zip(model.weights, row_sizes)):
        counts = [row_count(s, r) for s in ladder.layer_levels(l)]
        # allocation rounding cannot break nesting; enforce it for safety
        counts = list(np.minimum.accumulate(counts))
        rows = as_rows(w, r)
        order = magnitude_order(rows)
        layer = []
        for c in counts:
            m = np.zeros(rows.shape, dtype=bool)
            np.put_along_axis(m, order[:, :c], True, axis=1)
            layer.append(m.reshape(w.shape))
        per_layer.append(layer)
    return [[per_layer[l][k] for l in range(len(per_layer))] for k in range(len(ladder.levels))]


def masked_model(model: MlpModel, masks) -> MlpModel:
    return MlpModel([w * m for w, m in zip(model.weights, masks)], [b.copy() for b in model.biases])


def accumulate_grads(grads_per_subnet, masks_per_subnet, pi) -> list:
    """Backbone gradient ``sum_k pi_k * grad_k (masked)``; biases are shared and unmasked."""
    out = None
    for p, grads, masks in zip(pi, grads_per_subnet, masks_per_subnet):
        terms = []
        for i, g in enumerate(grads):
            terms.append(p * g * masks[i // 2] if i % 2 == 0 else p * g)
        out = terms if out is None else [a + b for a, b in zip(out, terms)]
    return out


def dress_train_step(model: MlpModel, ladder: SparsityLadder, batch: LabeledBatch, states, lr: float,
                     row_sizes):
    """One parallel step over all subnets. Returns ``(model, states, losses, masks)``."""
    masks = model_masks(model, ladder, row_sizes)
    losses, grads = [], []
    for mk in masks:
        loss, g = loss_and_grads(masked_model(model, mk), batch)
        losses.append(loss)
        grads.append(g)
    total = accumulate_grads(grads, masks, ladder.pi)
    params = [p.copy() for p in model.params()]
    for i, g in enumerate(total):
        states[i], delta = amsgrad_step(states[i], g, lr)
        params[i] += delta
    return MlpModel.from_params(params), states, losses, masks


@dataclass
class DressConfig:
    levels: tuple = (0.5, 0.75, 0.875)
    gamma: float = 0.0
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 128
    milestones: tuple = (0.6, 0.85)
    decay: float = 0.1
    row_sizes: tuple = ()
    layerwise: bool = True
    log_every: int = 50
    seed: int = 0


def subnet_accuracies(model: MlpModel, masks, data: LabeledBatch) -> list:
    return [accuracy(masked_model(model, mk), data) for mk in masks]


def dress_train(model: MlpModel, data: LabeledBatch, config: DressConfig, val: LabeledBatch | None = None):
    """Stage-two training of the nested subnets from a dense pretrained model.

    Keeps the weights/masks with the best mean validation accuracy and
    re-allocates layer-wise sparsity after an epoch without improvement.
    Returns ``(model, masks, ladder, trace)``.
    """
    row_sizes = list(config.row_sizes) or [default_row_size(w.shape[1]) for w in model.weights]
    ladder = SparsityLadder(list(config.levels), config.gamma)
    if config.layerwise:
        ladder.allocate(model.weights)
    masks = model_masks(model, ladder, row_sizes)
    if config.epochs == 0:
        return model, masks, ladder, []
    rng = make_rng(config.seed)
    batches = minibatches(len(data), config.batch_size, rng)
    steps = -(-len(data) // config.batch_size)
    total = steps * config.epochs
    states = [AmsGradState.zeros(p.shape) for p in model.params()]
    eval_set = val if val is not None else data
    best_score, best = -1.0, (model, masks, list(ladder.allocations))
    trace = []
    step = 0
    for epoch in range(config.epochs):
        for _ in range(steps):
            lr = config.lr * config.decay ** sum(step >= f * total for f in config.milestones)
            model, states, losses, masks = dress_train_step(model, ladder, data.take(next(batches)), states,
                                                            lr, row_sizes)
            step += 1
            if config.log_every and step % config.log_every == 0:
                nested = all(is_nested([masks[k][l] for k in range(len(masks))]) for l in range(len(row_sizes)))
                trace.append({"iteration": step, "epoch": epoch, "losses": losses, "nested": nested})
        masks = model_masks(model, ladder, row_sizes)
        accs = subnet_accuracies(model, masks, eval_set)
        score = float(np.mean(accs))
        trace.append({"iteration": step, "epoch": epoch, "val_acc": accs,
                      "allocations": [list(a) for a in ladder.allocations],
                      "nested": all(is_nested([masks[k][l] for k in range(len(masks))])
                                    for l in range(len(row_sizes)))})
        log.info("epoch %d: subnet accuracies %s", epoch, ["%.4f" % a for a in accs])
        if score > best_score:
            best_score, best = score, (model, masks, list(ladder.allocations))
        elif config.layerwise:
            ladder.allocate(model.weights)
            log.info("validation stalled; re-allocated %s", ladder.allocations)
    model, masks, ladder.allocations = best
    return model, masks, ladder, trace


# ---------------------------------------------------------------------------
# prefix-ordered CSR


@dataclass
class SparseRows:
    """Standard row-sparse view with a uniform number of nonzeros per row."""

    row_size: int
    indices: np.ndarray
    values: np.ndarray

    @property
    def row_ptr(self) -> np.ndarray:
        return np.arange(self.indices.shape[0] + 1) * self.indices.shape[1]

    def densify(self) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], self.row_size))
        np.put_along_axis(out, self.indices.astype(np.int64), self.values, axis=1)
        return out


@dataclass
class DressCsr:
    """All levels of one row-sparse tensor in a single importance-ordered table.

    ``indices``/``values`` are ``rows x nz[0]``; level ``k`` is the first
    ``nz[k]`` entries of each row.
    """

    row_size: int
    levels: list
    nz: list
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint16 if self.row_size > INDEX_LIMIT else np.uint8)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.levels) != len(self.nz) or not self.nz:
            raise ValueError("one nonzero count per level")
        if any(b > a for a, b in zip(self.nz, self.nz[1:])) or self.nz[-1] < 1:
            raise ValueError("nonzeros per row must be non-increasing and positive")
        if self.indices.shape != self.values.shape or self.indices.shape[1] != self.nz[0]:
            raise ValueError("index/value tables must be rows x nz[0]")
        if self.indices.size and int(self.indices.max()) >= self.row_size:
            raise ValueError("column index out of range")
        srt = np.sort(self.indices, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ValueError("duplicate column index within a row")

    @property
    def rows(self) -> int:
        return self.indices.shape[0]


def build_dress_csr(w, masks, levels) -> DressCsr:
    """Pack nested masks of ``w`` (rows x N) so that each level is a per-row prefix."""
    rows = np.asarray(w, dtype=np.float64)
    masks = [np.asarray(m, dtype=bool).reshape(rows.shape) for m in masks]
    if not is_nested(masks):
        raise NonNestedMaskError("masks are not nested")
    nz = []
    for m in masks:
        counts = m.sum(axis=1)
        if np.any(counts != counts[0]):
            raise ValueError("per-row nonzero counts must be uniform")
        nz.append(int(counts[0]))
    # deepest level an entry survives to, then magnitude, then index
    depth = np.sum(masks, axis=0)
    key = np.lexsort((np.broadcast_to(np.arange(rows.shape[1]), rows.shape), -np.abs(rows), -depth), axis=1)
    order = key[:, :nz[0]]
    return DressCsr(rows.shape[1], [float(s) for s in levels], nz, order,
                    np.take_along_axis(rows, order, axis=1))


def fetch_subnet(csr: DressCsr, k: int) -> SparseRows:
    """Level ``k`` (0-based) as a standard row-sparse view, read as a prefix."""
    if not 0 <= k < len(csr.nz):
        raise LevelNotFoundError(f"level {k} not in 0..{len(csr.nz) - 1}")
    c = csr.nz[k]
    return SparseRows(csr.row_size, csr.indices[:, :c], csr.values[:, :c])


def sparse_matvec(view: SparseRows, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (view.row_size,):
        raise ValueError(f"vector of {x.shape} vs row size {view.row_size}")
    return (view.values * x[view.indices.astype(np.int64)]).sum(axis=1)


def layer_matvec(views, x, c_out: int) -> np.ndarray:
    """Fully connected product when a layer's rows are split into ``C_in / row_size`` pieces."""
    pieces = len(x) // views.row_size
    segs = np.asarray(x, dtype=np.float64).reshape(pieces, views.row_size)
    vals = views.values.reshape(c_out, pieces, -1)
    idx = views.indices.astype(np.int64).reshape(c_out, pieces, -1)
    return (vals * segs[np.arange(pieces)[None, :, None], idx]).sum(axis=(1, 2))


def csr_cost(csr: DressCsr, index_bits: int = 8, value_bytes: int = 4) -> dict:
    """Storage in bytes: shared table, per-level fetch, and independent per-level storage."""
    if csr.row_size > 2**index_bits:
        raise RowSizeError(f"row size {csr.row_size} exceeds {index_bits}-bit indices")
    entry = value_bytes + index_bits / 8
    per_level = [csr.rows * c * entry for c in csr.nz]
    table = len(csr.nz) * 8
    return {
        "total": csr.rows * csr.nz[0] * entry + table,
        "level_table": table,
        "per_level": per_level,
        "independent": sum(per_level),
        "index_entries": csr.rows * csr.nz[0],
        "independent_index_entries": csr.rows * sum(csr.nz),
    }


def model_csrs(model: MlpModel, masks, levels, row_sizes=None) -> list:
    """One DressCsr per layer from ``masks[k][l]``."""
    row_sizes = row_sizes or [default_row_size(w.shape[1]) for w in model.weights]
    out = []
    for l, (w, r) in enumerate(zip(model.weights, row_sizes)):
        out.append(build_dress_csr(as_rows(w, r), [as_rows(mk[l], r) for mk in masks], levels))
    return out
