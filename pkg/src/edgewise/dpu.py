"""Deep partial updating: pick a small share of weights to send to the device each round.

A round trains the server copy with full updates while recording each
weight's contribution, keeps the top ``k * I`` weights of the combined
contribution score, rewinds everything else to the deployed values and
fine-tunes only the selected weights. The selected values and an encoded
index set form the payload.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from edgewise.model import LabeledBatch, MlpModel, accuracy, loss_and_grads, minibatches
from edgewise.numerics import AmsGradState, amsgrad_step, make_rng

log = logging.getLogger(__name__)

MAGIC = b"DPU1"
KIND_BITMAP = 0
KIND_DELTA = 1
SEED_FLAG = 0x80
VALUE_DTYPES = {16: "<f2", 32: "<f4", 64: "<f8"}
ARMS = ("FULL", "DPU", "GCPU", "RPU", "PRUNE")


class CorruptPayloadError(ValueError):
    pass


class PayloadLengthError(ValueError):
    pass


class StreamExhaustedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# contributions and masks


@dataclass
class ContributionLedger:
    c_global: np.ndarray
    c_local: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int) -> "ContributionLedger":
        return cls(np.zeros(size), np.zeros(size))


def global_contribution(delta_w) -> np.ndarray:
    d = np.asarray(delta_w, dtype=np.float64)
    return d * d


def accumulate_local(ledger: ContributionLedger, g, dw) -> ContributionLedger:
    """Subtract ``g * dw`` (first-order loss change of one step) from the local contribution."""
    g = np.asarray(g, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    if g.shape != ledger.c_local.shape or dw.shape != g.shape:
        raise ValueError("gradient, step and ledger shapes differ")
    return ContributionLedger(ledger.c_global, ledger.c_local - g * dw, ledger.step_count + 1)


def combine(c_global, c_local):
    """Sum of the two contributions, each normalized to unit mass.

    Returns ``(c, fell_back)``; when the local mass is not positive the
    global contribution alone is used and ``fell_back`` is True.
    """
    c_global = np.asarray(c_global, dtype=np.float64)
    c_local = np.asarray(c_local, dtype=np.float64)
    sg, sl = c_global.sum(), c_local.sum()
    if sl <= 0:
        return (c_global / sg if sg > 0 else c_global.copy()), True
    if sg <= 0:
        return c_local / sl, True
    return c_global / sg + c_local / sl, False


def top_k_mask(c, count: int) -> np.ndarray:
    """Boolean mask of the ``count`` largest entries, ties by ascending index."""
    c = np.asarray(c, dtype=np.float64).ravel()
    if not 0 <= count <= c.size:
        raise ValueError(f"count {count} outside 0..{c.size}")
    mask = np.zeros(c.size, dtype=bool)
    mask[np.argsort(-c, kind="stable")[:count]] = True
    return mask


def update_count(k: float, I: int) -> int:
    return int(math.floor(k * I + 0.5))


# ---------------------------------------------------------------------------
# training rounds


@dataclass
class StageConfig:
    """Optimizer settings shared by both stages of a round (learning rate schedule is replayed)."""

    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    milestones: tuple = (0.5, 0.75)
    decay: float = 0.1

    def steps(self, n: int) -> int:
        return self.epochs * -(-n // self.batch_size)

    def lr_at(self, step: int, total: int) -> float:
        return self.lr * self.decay ** sum(step >= f * total for f in self.milestones)


def run_steps(model: MlpModel, data: LabeledBatch, cfg: StageConfig, seed, mask=None, ledger=None):
    """AMSGrad on the flat parameter vector. Entries outside ``mask`` are never written.

    Returns ``(model, ledger)``; ``ledger.c_local`` accumulates ``-g * dw``.
    """
    rng = make_rng(seed)
    flat = model.flat()
    state = AmsGradState.zeros(flat.size)
    total = cfg.steps(len(data))
    batches = minibatches(len(data), cfg.batch_size, rng)
    for step in range(total):
        _, grads = loss_and_grads(model.unflat(flat), data.take(next(batches)))
        g = np.concatenate([x.ravel() for x in grads])
        state, delta = amsgrad_step(state, g, cfg.lr_at(step, total))
        if mask is not None:
            flat = np.where(mask, flat + delta, flat)
            delta = np.where(mask, delta, 0.0)
        else:
            flat = flat + delta
        if ledger is not None:
            ledger = accumulate_local(ledger, g, delta)
    return model.unflat(flat), ledger


@dataclass
class RoundResult:
    model: MlpModel
    mask: np.ndarray
    fell_back: bool = False
    base: MlpModel | None = None


def rewind(base: MlpModel, trained: MlpModel, mask) -> MlpModel:
    """Selected entries take the trained values, all others stay bitwise equal to ``base``."""
    return base.unflat(np.where(mask, trained.flat(), base.flat()))


def dpu_round(w: MlpModel, data: LabeledBatch, k: float, cfg: StageConfig, seed, start: MlpModel | None = None,
              mode: str = "combined", iterative: bool = False) -> RoundResult:
    """Full updating with contribution tracking, rewinding to ``w`` outside the mask, sparse fine-tuning.

    ``start`` is where full updating begins (defaults to ``w``). ``mode`` selects
    the ranking: ``combined`` or ``global``. ``iterative`` rewinds 20% of the
    remaining updated weights per pass instead of all at once.
    """
    start = w if start is None else start
    I = w.num_params()
    ledger = ContributionLedger.zeros(I)
    trained, ledger = run_steps(start, data, cfg, seed, ledger=ledger)
    delta = trained.flat() - w.flat()
    c_global = global_contribution(delta)
    fell_back = False
    if mode == "global":
        c = c_global
    else:
        c, fell_back = combine(c_global, ledger.c_local)
    target = update_count(k, I)
    if not iterative:
        mask = top_k_mask(c, target)
        tuned, _ = run_steps(rewind(w, trained, mask), data, cfg, seed + 1, mask=mask)
        return RoundResult(tuned, mask, fell_back, w)
    mask = np.ones(I, dtype=bool)
    current = trained
    while mask.sum() > target:
        keep = max(target, int(math.floor(0.8 * mask.sum())))
        mask = top_k_mask(np.where(mask, c, -np.inf), keep)
        current, _ = run_steps(rewind(w, current, mask), data, cfg, seed + 1, mask=mask)
    return RoundResult(current, mask, fell_back, w)


def gcpu_round(w: MlpModel, data: LabeledBatch, k: float, cfg: StageConfig, seed,
               start: MlpModel | None = None) -> RoundResult:
    return dpu_round(w, data, k, cfg, seed, start, mode="global")


def rpu_round(w: MlpModel, data: LabeledBatch, k: float, cfg: StageConfig, seed) -> RoundResult:
    """Random weights per layer at ratio ``k`` (exact counts), fine-tuned from ``w``."""
    rng = make_rng(seed)
    parts = []
    for p in w.params():
        m = np.zeros(p.size, dtype=bool)
        m[rng.choice(p.size, size=update_count(k, p.size), replace=False)] = True
        parts.append(m)
    mask = np.concatenate(parts)
    tuned, _ = run_steps(w, data, cfg, seed + 1, mask=mask)
    return RoundResult(tuned, mask, False, w)


def prune_round(init: MlpModel, data: LabeledBatch, k: float, cfg: StageConfig, seed) -> RoundResult:
    """Train from ``init``, keep the top ``k`` share of magnitudes, zero the rest, retrain sparsely."""
    trained, _ = run_steps(init, data, cfg, seed)
    flat = trained.flat()
    mask = top_k_mask(np.abs(flat), update_count(k, flat.size))
    zeros = trained.unflat(np.zeros(flat.size))
    tuned, _ = run_steps(rewind(zeros, trained, mask), data, cfg, seed + 1, mask=mask)
    return RoundResult(tuned, mask, False, zeros)


def full_round(init: MlpModel, data: LabeledBatch, cfg: StageConfig, seed) -> RoundResult:
    trained, _ = run_steps(init, data, cfg, seed)
    return RoundResult(trained, np.ones(init.num_params(), dtype=bool), False, init)


def should_reinit(current: int, last: int) -> bool:
    """Restart from a seeded random model once the data has more than doubled since the last restart."""
    if current <= 0 or last <= 0:
        raise ValueError("sizes must be positive")
    return current > 2 * last


# ---------------------------------------------------------------------------
# communication cost


def shannon_bits(k: float) -> float:
    """Binary entropy in bits; zero at k = 0 or 1."""
    if not 0 <= k <= 1:
        raise ValueError("k must lie in [0, 1]")
    if k in (0, 1):
        return 0.0
    return float(-k * math.log2(k) - (1 - k) * math.log2(1 - k))


def comm_cost(k: float, I: int, s_w: int = 32) -> float:
    """Bits for the updated values plus the entropy bound on their index set."""
    return s_w * k * I + shannon_bits(k) * I


# ---------------------------------------------------------------------------
# payload codec


@dataclass
class PayloadHeader:
    round: int
    k: float
    s_w: int = 32
    seed: int | None = None


@dataclass
class UpdatePayload:
    header: PayloadHeader
    mask: np.ndarray
    values: np.ndarray
    kind: int = KIND_BITMAP

    def __eq__(self, other):
        return (isinstance(other, UpdatePayload) and self.header == other.header
                and np.array_equal(self.mask, other.mask)
                and self.values.tobytes() == other.values.tobytes())


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _read_varint(buf: bytes, pos: int):
    shift = value = 0
    while True:
        if pos >= len(buf):
            raise CorruptPayloadError("truncated varint")
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            return value, pos


def encode_indices(mask) -> tuple:
    """Both index encodings; returns ``(kind, bytes)`` for the smaller (bitmap on ties)."""
    mask = np.asarray(mask, dtype=bool)
    bitmap = np.packbits(mask, bitorder="little").tobytes()
    idx = np.flatnonzero(mask)
    gaps = np.diff(idx, prepend=-1) - 1
    delta = b"".join(_varint(int(g)) for g in gaps)
    if len(delta) < len(bitmap):
        return KIND_DELTA, delta
    return KIND_BITMAP, bitmap


def encode_payload(mask, values, header: PayloadHeader) -> bytes:
    mask = np.asarray(mask, dtype=bool).ravel()
    if header.s_w not in VALUE_DTYPES:
        raise ValueError(f"unsupported value width {header.s_w}")
    values = np.asarray(values).astype(VALUE_DTYPES[header.s_w])
    if values.shape != (int(mask.sum()),):
        raise PayloadLengthError(f"{values.size} values for {int(mask.sum())} selected weights")
    kind, index = encode_indices(mask)
    flags = kind | (SEED_FLAG if header.seed is not None else 0)
    out = bytearray(MAGIC)
    out += struct.pack("<IfBB", header.round, header.k, flags, header.s_w)
    if header.seed is not None:
        out += struct.pack("<Q", header.seed)
    out += struct.pack("<II", mask.size, int(mask.sum()))
    out += index
    out += values.tobytes()
    return bytes(out)


def decode_payload(buf: bytes) -> UpdatePayload:
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise CorruptPayloadError("bad magic or truncated header")
    rnd, k, flags, s_w = struct.unpack_from("<IfBB", buf, 4)
    pos = 14
    kind = flags & ~SEED_FLAG
    if kind not in (KIND_BITMAP, KIND_DELTA) or s_w not in VALUE_DTYPES:
        raise CorruptPayloadError(f"unknown encoding kind {kind} or value width {s_w}")
    seed = None
    if flags & SEED_FLAG:
        if len(buf) < pos + 8:
            raise CorruptPayloadError("truncated seed")
        (seed,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    if len(buf) < pos + 8:
        raise CorruptPayloadError("truncated index header")
    I, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if kind == KIND_BITMAP:
        nbytes = -(-I // 8)
        if len(buf) < pos + nbytes:
            raise CorruptPayloadError("truncated bitmap")
        mask = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, pos), bitorder="little")[:I].astype(bool)
        pos += nbytes
        if int(mask.sum()) != count:
            raise CorruptPayloadError("bitmap popcount disagrees with header count")
    else:
        mask = np.zeros(I, dtype=bool)
        prev = -1
        for _ in range(count):
            gap, pos = _read_varint(buf, pos)
            prev = prev + gap + 1
            if prev >= I:
                raise CorruptPayloadError("index beyond vector length")
            mask[prev] = True
    dtype = np.dtype(VALUE_DTYPES[s_w])
    if len(buf) != pos + count * dtype.itemsize:
        raise CorruptPayloadError("value section length mismatch")
    values = np.frombuffer(buf, dtype, count, pos).copy()
    return UpdatePayload(PayloadHeader(rnd, k, s_w, seed), mask, values, kind)


def index_section_bits(buf: bytes) -> int:
    """Size of the index section (length fields plus encoding) of an encoded payload, in bits."""
    p = decode_payload(buf)
    header = 14 + (8 if p.header.seed is not None else 0)
    values = p.values.nbytes
    return 8 * (len(buf) - header - values)


def make_payload(result: RoundResult, rnd: int, k: float, s_w: int = 32, seed=None) -> bytes:
    flat = result.model.flat()
    return encode_payload(result.mask, flat[result.mask], PayloadHeader(rnd, float(np.float32(k)), s_w, seed))


def apply_payload(base: MlpModel, payload: UpdatePayload) -> MlpModel:
    flat = base.flat()
    flat[payload.mask] = payload.values.astype(np.float64)
    return base.unflat(flat)


# ---------------------------------------------------------------------------
# multi-round simulation


@dataclass
class RoundConfig:
    arms: tuple = ARMS
    rounds: int = 10
    d1: int = 1000
    dd: int = 1000
    k: float = 0.1
    s_w: int = 32
    sizes: tuple = (784, 128, 128, 10)
    stage: StageConfig = field(default_factory=StageConfig)
    reinit: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d1 <= 0 or self.dd <= 0 or self.rounds < 1:
            raise ValueError("sizes and rounds must be positive")
        if not 0 < self.k <= 1:
            raise ValueError("k must lie in (0, 1]")
        unknown = set(self.arms) - set(ARMS)
        if unknown:
            raise ValueError(f"unknown arms {sorted(unknown)}")


def data_schedule(n_available: int, config: RoundConfig, rng) -> list:
    """Index sets ``D^1 ⊂ D^2 ⊂ ...`` drawn without replacement."""
    need = config.d1 + config.dd * (config.rounds - 1)
    if need > n_available:
        raise StreamExhaustedError(f"{need} samples needed, {n_available} available")
    order = rng.permutation(n_available)
    return [np.sort(order[:config.d1 + config.dd * r]) for r in range(config.rounds)]


def simulate_arm(arm: str, pool: LabeledBatch, val: LabeledBatch, test: LabeledBatch, config: RoundConfig,
                 seed: int) -> list:
    """One arm over all rounds. Round 1 deploys a fully trained model for every arm."""
    rng = make_rng(seed)
    schedule = data_schedule(len(pool), config, rng)
    init = MlpModel.init(list(config.sizes), seed)
    I = init.num_params()
    cfg = config.stage
    rows = []
    deployed = chain = None
    deployed_val = -1.0
    last_reinit = config.d1
    cumulative = 0.0
    for r, idx in enumerate(schedule, start=1):
        data = pool.take(idx)
        round_seed = seed * 1000 + r
        reinit_seed = None
        k = 1.0
        if r == 1 or arm == "FULL":
            result = full_round(init, data, cfg, round_seed)
        elif arm in ("DPU", "GCPU"):
            start = None
            base = chain
            if config.reinit and should_reinit(len(idx), last_reinit):
                reinit_seed = round_seed
                base = start = MlpModel.init(list(config.sizes), reinit_seed)
                last_reinit = len(idx)
            op = dpu_round if arm == "DPU" else gcpu_round
            result = op(base, data, config.k, cfg, round_seed, start=start)
            k = config.k
        elif arm == "RPU":
            result = rpu_round(chain, data, config.k, cfg, round_seed)
            k = config.k
        else:
            result = prune_round(init, data, config.k, cfg, round_seed)
            k = config.k
        chain = result.model
        val_acc = accuracy(result.model, val)
        deploy = val_acc > deployed_val
        bits = comm_cost(k, I, config.s_w) if k < 1 else float(config.s_w * I)
        encoded = 8 * len(make_payload(result, r, k, config.s_w, reinit_seed)) if k < 1 else config.s_w * I
        if deploy:
            deployed, deployed_val = result.model, val_acc
            cumulative += bits if r > 1 else 0.0
        rows.append({
            "round": r, "arm": arm, "seed": seed,
            "val_acc": deployed_val, "test_acc": accuracy(deployed, test),
            "deployed": deploy, "payload_bits": bits if deploy else 0.0,
            "encoded_bits": encoded if deploy else 0, "cumulative_bits": cumulative,
            "fell_back": result.fell_back, "reinit": reinit_seed is not None,
            "acc_diff_vs_full": 0.0,
        })
        log.info("%s seed %d round %d: val %.4f deployed=%s", arm, seed, r, val_acc, deploy)
    return rows


def multi_round_sim(pool: LabeledBatch, val: LabeledBatch, test: LabeledBatch, config: RoundConfig,
                    seeds=(0,)) -> list:
    """Rows for every arm, seed and round, with accuracy differences against FULL when it was run."""
    rows = []
    for seed in seeds:
        by_arm = {arm: simulate_arm(arm, pool, val, test, config, seed) for arm in config.arms}
        if "FULL" in by_arm:
            for arm_rows in by_arm.values():
                for row, ref in zip(arm_rows, by_arm["FULL"]):
                    row["acc_diff_vs_full"] = row["test_acc"] - ref["test_acc"]
        for arm in config.arms:
            rows += by_arm[arm]
    return rows


def summarize(rows, s_w: int = 32, I: int | None = None) -> dict:
    """Per arm: mean accuracy, mean difference vs FULL and cumulative cost ratio vs FULL.

    Means and cost sums cover rounds after the first, whose fully trained
    deployment is shared by all arms.
    """
    out = {}
    arms = sorted({r["arm"] for r in rows}, key=lambda a: ARMS.index(a) if a in ARMS else len(ARMS))
    full_bits = {}
    for r in rows:
        if r["arm"] == "FULL" and r["round"] > 1:
            full_bits[r["seed"]] = full_bits.get(r["seed"], 0.0) + r["payload_bits"]
    for arm in arms:
        sel = [r for r in rows if r["arm"] == arm]
        later = [r for r in sel if r["round"] > 1] or sel
        seeds = sorted({r["seed"] for r in sel})
        ratios = []
        for s in seeds:
            bits = sum(r["payload_bits"] for r in sel if r["seed"] == s and r["round"] > 1)
            if full_bits.get(s):
                ratios.append(bits / full_bits[s])
        out[arm] = {
            "mean_test_acc": float(np.mean([r["test_acc"] for r in later])),
            "mean_acc_diff": float(np.mean([r["acc_diff_vs_full"] for r in later])),
            "cost_ratio": float(np.mean(ratios)) if ratios else float("nan"),
        }
    return out
