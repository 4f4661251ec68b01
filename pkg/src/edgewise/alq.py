"""Adaptive loss-aware quantization of the MLP into multi-bit form.

The pipeline sketches every layer into up to ``i_max`` binary bases, then
alternates loss-aware pruning of coordinates (which lowers per-group
bitwidths) with projection-based retraining of bases and coordinates.
One AMSGrad instance supplies both the gradient term ``g = lr * m_hat``
and the diagonal curvature ``H = sqrt(v_hat)`` of the quadratic loss model.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from edgewise.bitwise import QuantizedActivation
from edgewise.mbq import (
    DEFAULT_IMAX,
    GroupedLayer,
    GroupingStructure,
    avg_bitwidth,
    sketch_layer,
    storage_ratio,
)
from edgewise.model import (
    LabeledBatch,
    MlpModel,
    accuracy,
    cross_entropy,
    forward,
    loss_and_grads,
    minibatches,
)
from edgewise.numerics import AmsGradState, amsgrad_step, least_squares, make_rng, SingularSystemError

log = logging.getLogger(__name__)

RIDGE = 1e-6
ENUM_CHUNK = 1 << 22


class TargetInfeasibleError(ValueError):
    pass


@dataclass
class QuantModel:
    """Multi-bit layers plus full-precision biases (and optional activation quantizers)."""

    layers: list
    biases: list
    act_quantizers: list = field(default_factory=list)

    def weights(self) -> list:
        return [layer.dense() for layer in self.layers]

    def as_mlp(self) -> MlpModel:
        return MlpModel(self.weights(), [b.copy() for b in self.biases])

    def total_alphas(self) -> int:
        return int(sum(layer.active.sum() for layer in self.layers))

    def avg_bitwidths(self) -> list:
        return [avg_bitwidth(layer) for layer in self.layers]

    def model_bitwidth(self) -> float:
        """Bits per weight over the whole model (layer averages weighted by weight count)."""
        sizes = [math.prod(layer.shape) for layer in self.layers]
        return float(np.dot(sizes, self.avg_bitwidths()) / sum(sizes))

    def copy(self) -> "QuantModel":
        return QuantModel([l.copy() for l in self.layers], [b.copy() for b in self.biases],
                          [q.copy() for q in self.act_quantizers])

    def act_hook(self, update: bool):
        if not self.act_quantizers:
            return None

        def hook(l, x):
            if update:
                x_hat, self.act_quantizers[l] = act_quantize(x.reshape(-1), self.act_quantizers[l])
            else:
                x_hat = self.act_quantizers[l].quantize(x.reshape(-1))
            return x_hat.reshape(x.shape)

        return hook

    def accuracy(self, data: LabeledBatch) -> float:
        return accuracy(self.as_mlp(), data, self.act_hook(update=False))

    def loss(self, data: LabeledBatch) -> float:
        logits, _ = forward(self.as_mlp(), data.inputs, self.act_hook(update=False))
        return cross_entropy(logits, data.labels)


def sketch_model(model: MlpModel, structures, i_max: int = DEFAULT_IMAX, sigma: float = 0.0) -> QuantModel:
    layers = [sketch_layer(w, s, i_max, sigma) for w, s in zip(model.weights, structures)]
    return QuantModel(layers, [b.copy() for b in model.biases])


# ---------------------------------------------------------------------------
# row projection


def sign_patterns(bits: int) -> np.ndarray:
    """All +-1 rows of length ``bits`` in lexicographic order, all-(+1) first."""
    if bits == 0:
        return np.zeros((1, 0), dtype=np.int8)
    rows = np.array(list(itertools.product((1, -1), repeat=bits)), dtype=np.int8)
    return rows


def row_project(alpha, targets) -> np.ndarray:
    """For each target r, the row b in {-1,+1}^I minimizing ``|b @ alpha - r|``.

    Ties go to the lexicographically smallest pattern (all-(+1) first).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    pats = sign_patterns(alpha.size)
    values = pats @ alpha
    choice = np.abs(values[None, :] - targets[:, None]).argmin(axis=1)
    return pats[choice]


def _compact_slots(active: np.ndarray, bits: int) -> np.ndarray:
    """Slot indices of the first ``bits`` active entries per row, in slot order."""
    order = np.argsort(~active, axis=1, kind="stable")
    return order[:, :bits]


def _buckets(layer: GroupedLayer):
    bits = layer.bits()
    for b in np.unique(bits):
        if b == 0:
            continue
        rows = np.flatnonzero(bits == b)
        yield int(b), rows, _compact_slots(layer.active[rows], int(b))


def project_layer_rows(layer: GroupedLayer, targets: np.ndarray) -> None:
    """Replace every basis row with its enumerated best fit to ``targets`` (G x n), in place."""
    n = layer.group_size
    for bits, rows, slots in _buckets(layer):
        pats = sign_patterns(bits).astype(np.float64)
        alpha = np.take_along_axis(layer.alpha[rows], slots, axis=1)
        values = alpha @ pats.T
        chunk = max(1, ENUM_CHUNK // (n * pats.shape[0]))
        for start in range(0, len(rows), chunk):
            sl = slice(start, start + chunk)
            dist = np.abs(values[sl, None, :] - targets[rows[sl], :, None])
            best = pats[dist.argmin(axis=2)].astype(np.int8)
            g_idx = rows[sl]
            basis = layer.basis[g_idx]
            np.put_along_axis(basis, np.broadcast_to(slots[sl, None, :], best.shape), best, axis=2)
            layer.basis[g_idx] = basis


def modeled_increase(layer: GroupedLayer, g: np.ndarray, H: np.ndarray, w_ref: np.ndarray,
                     alpha=None) -> np.ndarray:
    """Per-group quadratic model ``g.(B a - w_ref) + 1/2 (B a - w_ref)' H (B a - w_ref)``."""
    a = layer.alpha if alpha is None else alpha
    a = np.where(layer.active, a, 0.0)
    d = np.einsum("gni,gi->gn", layer.basis, a, optimize=True) - w_ref
    return (g * d).sum(axis=1) + 0.5 * (H * d * d).sum(axis=1)


def flip_negative(layer: GroupedLayer) -> None:
    """Restore positive coordinates by negating the matching basis columns."""
    neg = (layer.alpha < 0) & layer.active
    if neg.any():
        layer.alpha[neg] = -layer.alpha[neg]
        g, s = np.nonzero(neg)
        layer.basis[g, :, s] *= -1


def refresh_alpha(layer: GroupedLayer, g: np.ndarray, H: np.ndarray, w_ref: np.ndarray,
                  lam: float = RIDGE) -> None:
    """Closed-form coordinate update for fixed bases (ridge ``lam``), in place.

    ``alpha = -(B'HB + lam I)^-1 B'(g - H w_ref)``. A group keeps its old
    coordinates when the ridge solution does not lower the quadratic model.
    """
    before = modeled_increase(layer, g, H, w_ref)
    old = layer.alpha.copy()
    for bits, rows, slots in _buckets(layer):
        B = np.take_along_axis(layer.basis[rows], np.broadcast_to(slots[:, None, :], (len(rows), layer.group_size, bits)), axis=2)
        B = B.astype(np.float64)
        Hr = H[rows]
        gram = np.einsum("gni,gn,gnj->gij", B, Hr, B, optimize=True) + lam * np.eye(bits)
        rhs = -np.einsum("gni,gn->gi", B, g[rows] - Hr * w_ref[rows], optimize=True)
        sol = np.linalg.solve(gram, rhs[..., None])[..., 0]
        new = layer.alpha[rows]
        np.put_along_axis(new, slots, sol, axis=1)
        layer.alpha[rows] = new
    after = modeled_increase(layer, g, H, w_ref)
    worse = after > before
    layer.alpha[worse] = old[worse]
    flip_negative(layer)


# ---------------------------------------------------------------------------
# pruning in the coordinate domain


def alpha_cost(g, H, alpha):
    """Modeled loss increase from zeroing coordinate ``alpha``: ``-g a + 1/2 H a^2``."""
    return -np.asarray(g) * alpha + 0.5 * np.asarray(H) * np.asarray(alpha) ** 2


def select_prune(costs: list, count: int, k_percent: float = 1.0) -> list:
    """Pick ``count`` (layer, position) pairs with the smallest costs.

    Each layer first contributes its cheapest ``ceil(k% * size)`` candidates;
    when that pool is smaller than ``count`` every layer contributes up to
    ``count`` so the global choice stays exact.
    """
    if count <= 0:
        return []
    per_layer = [max(1, math.ceil(k_percent / 100.0 * c.size)) for c in costs]
    if sum(min(p, c.size) for p, c in zip(per_layer, costs)) < count:
        per_layer = [count] * len(costs)
    pool = []
    for l, (c, take) in enumerate(zip(costs, per_layer)):
        order = np.argsort(c, kind="stable")[:take]
        pool += [(float(c[i]), l, int(i)) for i in order]
    pool.sort()
    return [(l, i) for _, l, i in pool[:count]]


@dataclass
class PruneSchedule:
    """Outer-round targets for the total number of surviving coordinates."""

    targets: list
    iterations: int
    k_percent: float = 1.0

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.targets, self.targets[1:])) or (self.targets and self.targets[-1] < 0):
            raise ValueError("targets must be strictly decreasing and non-negative")

    @classmethod
    def geometric(cls, m0: int, ratio: float, rounds: int, iterations: int, k_percent: float = 1.0):
        targets = [int(math.floor(m0 * (1.0 - ratio) ** r + 0.5)) for r in range(1, rounds + 1)]
        return cls(targets, iterations, k_percent)


def _group_grads(qm: QuantModel, grads) -> list:
    return [grads[2 * l].reshape(-1)[layer.structure.group_index(layer.shape)]
            for l, layer in enumerate(qm.layers)]


def _alpha_grads(qm: QuantModel, w_grads: list) -> list:
    return [np.where(layer.active, np.einsum("gni,gn->gi", layer.basis, gw, optimize=True), 0.0)
            for layer, gw in zip(qm.layers, w_grads)]


def prune_alpha_round(qm: QuantModel, batches, target: int, iterations: int, k_percent: float = 1.0,
                      lr: float = 1e-3, states=None):
    """Remove coordinates until at most ``target`` survive, over ``iterations`` minibatches.

    ``batches`` yields LabeledBatch objects. Returns ``(qm, states, removed_per_iteration)``;
    ``qm`` is modified in place. Surviving coordinates keep their moments.
    """
    if target < 0:
        raise TargetInfeasibleError(f"target {target} < 0")
    m0 = qm.total_alphas()
    if m0 <= target:
        return qm, states, []
    if states is None:
        states = [AmsGradState.zeros(layer.alpha.shape) for layer in qm.layers]
    per_iter = int(math.floor((m0 - target) / iterations + 0.5))
    removed_log = []
    for t in range(iterations):
        batch = next(batches)
        _, grads = loss_and_grads(qm.as_mlp(), batch, qm.act_hook(update=True))
        a_grads = _alpha_grads(qm, _group_grads(qm, grads))
        costs, where = [], []
        for l, layer in enumerate(qm.layers):
            states[l], _ = amsgrad_step(states[l], a_grads[l], lr)
            g = lr * states[l].first_moment()
            H = states[l].curvature()
            pos = np.flatnonzero(layer.active.reshape(-1))
            where.append(pos)
            costs.append(alpha_cost(g.reshape(-1)[pos], H.reshape(-1)[pos], layer.alpha.reshape(-1)[pos]))
        remaining = qm.total_alphas()
        count = per_iter if t < iterations - 1 else remaining - target
        count = min(max(count, 0), remaining - target) if t == iterations - 1 else min(count, remaining)
        chosen = select_prune(costs, count, k_percent)
        for l, i in chosen:
            flat = where[l][i]
            layer = qm.layers[l]
            layer.active.reshape(-1)[flat] = False
            layer.alpha.reshape(-1)[flat] = 0.0
            for arr in (states[l].m, states[l].v, states[l].v_max):
                arr.reshape(-1)[flat] = 0.0
        removed_log.append(len(chosen))
        if qm.total_alphas() <= target:
            break
    return qm, states, removed_log


# ---------------------------------------------------------------------------
# optimization of bases and coordinates


def _bias_step(qm, grads, bias_states, lr):
    for l in range(len(qm.biases)):
        bias_states[l], delta = amsgrad_step(bias_states[l], grads[2 * l + 1], lr)
        qm.biases[l] = qm.biases[l] + delta


def optimize_bases(qm: QuantModel, batches, iterations: int, lr: float = 1e-3, lam: float = RIDGE,
                   states=None, bias_states=None, check=None):
    """Projection retraining of bases, each followed by the closed-form coordinate refresh.

    ``check``, if given, is called per iteration with
    ``(layer_index, layer_before, layer_after_projection, layer_after, g, H, w_ref)``.
    """
    if states is None:
        states = [AmsGradState.zeros(layer.shape) for layer in qm.layers]
    if bias_states is None:
        bias_states = [AmsGradState.zeros(b.shape) for b in qm.biases]
    for _ in range(iterations):
        batch = next(batches)
        _, grads = loss_and_grads(qm.as_mlp(), batch, qm.act_hook(update=True))
        for l, layer in enumerate(qm.layers):
            states[l], _ = amsgrad_step(states[l], grads[2 * l], lr)
            idx = layer.structure.group_index(layer.shape)
            g = (lr * states[l].first_moment()).reshape(-1)[idx]
            H = states[l].curvature().reshape(-1)[idx]
            w_ref = layer.group_values()
            before = layer.copy() if check else None
            project_layer_rows(layer, w_ref - g / H)
            projected = layer.copy() if check else None
            refresh_alpha(layer, g, H, w_ref, lam)
            if check:
                check(l, before, projected, layer, g, H, w_ref)
        _bias_step(qm, grads, bias_states, lr)
    return qm, states, bias_states


def optimize_coords(qm: QuantModel, batches, iterations: int, lr: float = 1e-3, l2: float = 0.0,
                    states=None, bias_states=None):
    """AMSGrad on coordinates only; negative coordinates flip their basis column."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if states is None:
        states = [AmsGradState.zeros(layer.alpha.shape) for layer in qm.layers]
    if bias_states is None:
        bias_states = [AmsGradState.zeros(b.shape) for b in qm.biases]
    for _ in range(iterations):
        batch = next(batches)
        _, grads = loss_and_grads(qm.as_mlp(), batch, qm.act_hook(update=True))
        a_grads = _alpha_grads(qm, _group_grads(qm, grads))
        for l, layer in enumerate(qm.layers):
            grad = np.where(layer.active, a_grads[l] + l2 * layer.alpha, 0.0)
            states[l], delta = amsgrad_step(states[l], grad, lr)
            layer.alpha += np.where(layer.active, delta, 0.0)
            flip_negative(layer)
        _bias_step(qm, grads, bias_states, lr)
    return qm, states, bias_states


# ---------------------------------------------------------------------------
# STE with loss-aware projection (baseline)


@dataclass
class SteState:
    shadow: list
    states: list
    bias_states: list

    @classmethod
    def start(cls, qm: QuantModel, shadow_weights=None) -> "SteState":
        shadow = [np.array(w, dtype=np.float64) for w in (shadow_weights or qm.weights())]
        return cls(shadow, [AmsGradState.zeros(w.shape) for w in shadow],
                   [AmsGradState.zeros(b.shape) for b in qm.biases])


def ste_loss_aware_step(ste: SteState, qm: QuantModel, batch: LabeledBatch, lr: float = 1e-3,
                        lam: float = RIDGE):
    """One straight-through step: the full-precision shadow takes a plain AMSGrad
    step with the gradient at the quantized weights, and the quantized layer is
    projected onto the updated shadow under the same quadratic model."""
    _, grads = loss_and_grads(qm.as_mlp(), batch, qm.act_hook(update=True))
    for l, layer in enumerate(qm.layers):
        ste.states[l], delta = amsgrad_step(ste.states[l], grads[2 * l], lr)
        idx = layer.structure.group_index(layer.shape)
        g = (lr * ste.states[l].first_moment()).reshape(-1)[idx]
        H = ste.states[l].curvature().reshape(-1)[idx]
        w_ref = ste.shadow[l].reshape(-1)[idx]
        project_layer_rows(layer, w_ref - g / H)
        refresh_alpha(layer, g, H, w_ref, lam)
        ste.shadow[l] = ste.shadow[l] + delta
    _bias_step(qm, grads, ste.bias_states, lr)
    return ste, qm


# ---------------------------------------------------------------------------
# activation quantization


@dataclass
class ActQuantizer:
    """Multi-bit activation quantizer with levels ``x_ref + sum_i b_i gamma_i``."""

    bits: int
    coeffs: np.ndarray  # [x_ref, gamma_1, ..., gamma_I]
    momentum: float = 0.9

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.bits + 1,) or not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coeffs must be finite with length bits + 1")

    @property
    def x_ref(self) -> float:
        return float(self.coeffs[0])

    @property
    def gamma(self) -> np.ndarray:
        return self.coeffs[1:]

    def levels(self) -> np.ndarray:
        return np.sort(self.x_ref + sign_patterns(self.bits) @ self.gamma)

    def codes(self, x) -> np.ndarray:
        """Nearest-level assignment as a +-1 code matrix (N x bits)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        pats = sign_patterns(self.bits)
        values = self.x_ref + pats @ self.gamma
        return pats[np.abs(x[:, None] - values[None, :]).argmin(axis=1)]

    def quantize(self, x) -> np.ndarray:
        return self.x_ref + self.codes(x).astype(np.float64) @ self.gamma

    def encode(self, x) -> QuantizedActivation:
        return QuantizedActivation(self.x_ref, self.codes(x), self.gamma.copy())

    def copy(self) -> "ActQuantizer":
        return ActQuantizer(self.bits, self.coeffs.copy(), self.momentum)

    @classmethod
    def init(cls, sample, bits: int, iters: int = 20) -> "ActQuantizer":
        """Fit levels to a calibration sample (running average disabled)."""
        x = np.asarray(sample, dtype=np.float64).reshape(-1)
        spread = float(x.std()) or 1.0
        coeffs = np.concatenate([[x.mean()], spread * 0.5 ** np.arange(bits)])
        q = cls(bits, coeffs, momentum=0.0)
        for _ in range(iters):
            _, q = act_quantize(x, q)
        q.momentum = 0.9
        return q


def act_quantize(x, q: ActQuantizer):
    """Quantize ``x`` with the current levels, then move the coefficients toward
    the least-squares fit of the new assignment by a running average."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    codes = q.codes(x)
    x_hat = q.x_ref + codes.astype(np.float64) @ q.gamma
    design = np.column_stack([np.ones(len(x)), codes.astype(np.float64)])
    try:
        fresh = least_squares(design, x)
    except SingularSystemError:
        return x_hat, q
    # a negative gamma is the same level set with its code column negated
    fresh[1:] = np.abs(fresh[1:])
    coeffs = q.momentum * q.coeffs + (1.0 - q.momentum) * fresh
    return x_hat, ActQuantizer(q.bits, coeffs, q.momentum)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class AlqConfig:
    structures: list
    i_max: int = DEFAULT_IMAX
    sigma: float = 0.0
    rounds: int = 4
    prune_ratio: float = 0.3
    prune_iters: int = 100
    k_percent: float = 1.0
    bases_iters: int = 400
    coords_iters: int = 200
    init_iters: int = 400
    final_iters: int = 800
    lr: float = 1e-3
    final_lr: float = 1e-4
    l2: float = 0.0
    lam: float = RIDGE
    batch_size: int = 128
    act_bits: int = 0
    reset_moments: bool = True
    seed: int = 0


def _batch_stream(data: LabeledBatch, batch_size: int, rng):
    for idx in minibatches(len(data), batch_size, rng):
        yield data.take(idx)


def alq_pipeline(model: MlpModel, data: LabeledBatch, config: AlqConfig, val: LabeledBatch | None = None,
                 test: LabeledBatch | None = None):
    """Sketch, then ``rounds`` x (prune, optimize bases, optimize coordinates), then final retraining.

    Returns the quantized model and one trace row per stage.
    """
    rng = make_rng(config.seed)
    batches = _batch_stream(data, config.batch_size, rng)
    qm = sketch_model(model, config.structures, config.i_max, config.sigma)
    if config.act_bits:
        _, cache = forward(model, data.inputs[:2048])
        qm.act_quantizers = [ActQuantizer.init(np.maximum(y, 0.0), config.act_bits)
                             for y in cache["ys"][:-1]]
    trace = []

    def record(stage, r):
        row = {"round": r, "stage": stage, "total_alphas": qm.total_alphas(),
               "avg_bitwidth": qm.avg_bitwidths(),
               "model_bitwidth": qm.model_bitwidth(), "loss": qm.loss(data.take(np.arange(min(len(data), 10000))))}
        if val is not None:
            row["val_acc"] = qm.accuracy(val)
        if test is not None:
            row["test_acc"] = qm.accuracy(test)
        trace.append(row)
        log.info("round %d %s: bits=%s val=%s", r, stage,
                 ["%.3f" % b for b in row["avg_bitwidth"]], row.get("val_acc"))

    record("sketch", 0)
    w_states = b_states = None
    if config.init_iters:
        qm, w_states, b_states = optimize_bases(qm, batches, config.init_iters, config.lr, config.lam)
        record("init", 0)
    schedule = PruneSchedule.geometric(qm.total_alphas(), config.prune_ratio, config.rounds,
                                       config.prune_iters, config.k_percent)
    a_states = None
    for r, target in enumerate(schedule.targets, start=1):
        if config.reset_moments:
            a_states = None
        qm, a_states, _ = prune_alpha_round(qm, batches, target, schedule.iterations,
                                            schedule.k_percent, config.lr, a_states)
        record("prune", r)
        if config.reset_moments:
            w_states = b_states = None
        if config.bases_iters:
            qm, w_states, b_states = optimize_bases(qm, batches, config.bases_iters, config.lr,
                                                    config.lam, w_states, b_states)
        if config.coords_iters:
            qm, _, b_states = optimize_coords(qm, batches, config.coords_iters, config.lr, config.l2,
                                              None if config.reset_moments else a_states, b_states)
        record("optimize", r)
    if config.final_iters:
        qm, _, _ = optimize_bases(qm, batches, config.final_iters, config.final_lr, config.lam)
        record("final", config.rounds)
    return qm, trace


def layer_storage_ratios(qm: QuantModel) -> list:
    out = []
    for layer in qm.layers:
        bits = avg_bitwidth(layer)
        N = math.prod(layer.shape)
        out.append(storage_ratio(N, layer.group_size, bits) if bits > 0 else float("inf"))
    return out
