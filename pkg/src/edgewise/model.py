"""Manually differentiated MLP, training loop, and dataset loaders."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from edgewise.numerics import AmsGradState, ShapeMismatchError, amsgrad_step, make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ShapeMismatchError("inputs must be batch x features with one label per row")
        if len(self.labels) < 1:
            raise ValueError("empty batch")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx])


@dataclass
class MlpModel:
    """Fully connected ReLU network; ``weights[l]`` is ``C_out x C_in``."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ShapeMismatchError(f"layer {l}: bias {b.shape} vs weight {w.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeMismatchError(f"layer {l} input width does not chain")

    @classmethod
    def init(cls, sizes, seed) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(seed)
        weights, biases = [], []
        for c_in, c_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (c_in + c_out))
            weights.append(rng.uniform(-limit, limit, size=(c_out, c_in)))
            biases.append(np.zeros(c_out))
        return cls(weights, biases)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_classes(self):
        return self.weights[-1].shape[0]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_params(cls, params) -> "MlpModel":
        return cls(list(params[0::2]), list(params[1::2]))

    def with_weights(self, weights) -> "MlpModel":
        return MlpModel(list(weights), list(self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def unflat(self, vec) -> "MlpModel":
        params, pos = [], 0
        for p in self.params():
            params.append(np.array(vec[pos:pos + p.size], dtype=np.float64).reshape(p.shape))
            pos += p.size
        if pos != len(vec):
            raise ShapeMismatchError("flat vector length does not match model")
        return MlpModel.from_params(params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def save(self, path):
        arrays = {f"w{l}": w for l, w in enumerate(self.weights)}
        arrays.update({f"b{l}": b for l, b in enumerate(self.biases)})
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with np.load(path) as data:
            n = sum(1 for k in data.files if k.startswith("w"))
            return cls([data[f"w{l}"] for l in range(n)], [data[f"b{l}"] for l in range(n)])


def forward(model: MlpModel, inputs, act_quant=None):
    """Logits plus the cache (layer inputs ``xs``, pre-activations ``ys``).

    ``act_quant``, if given, maps each hidden ReLU output to its quantized
    version; the output layer is never quantized.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[1]:
        raise ShapeMismatchError(f"input {x.shape} vs first layer {model.weights[0].shape}")
    xs, ys = [], []
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        xs.append(x)
        y = x @ w.T + b
        ys.append(y)
        if l < last:
            x = np.maximum(y, 0.0)
            if act_quant is not None:
                x = act_quant(l, x)
    return ys[-1], {"xs": xs, "ys": ys}


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_grads(model: MlpModel, batch: LabeledBatch, act_quant=None):
    """Mean softmax cross-entropy and exact gradients ``[dW0, db0, dW1, ...]``.

    A hidden activation quantizer is treated as identity in the backward pass.
    """
    logits, cache = forward(model, batch.inputs, act_quant)
    if batch.labels.max() >= logits.shape[1]:
        raise ShapeMismatchError("label exceeds class count")
    n = len(batch)
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), batch.labels].mean())
    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    grads = [None] * (2 * len(model.weights))
    for l in range(len(model.weights) - 1, -1, -1):
        grads[2 * l] = delta.T @ cache["xs"][l]
        grads[2 * l + 1] = delta.sum(axis=0)
        if l:
            delta = (delta @ model.weights[l]) * (cache["ys"][l - 1] > 0)
    return loss, grads


def predict(model: MlpModel, inputs, act_quant=None, chunk: int = 4096) -> np.ndarray:
    out = []
    for start in range(0, len(inputs), chunk):
        logits, _ = forward(model, inputs[start:start + chunk], act_quant)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def accuracy(model: MlpModel, batch: LabeledBatch, act_quant=None) -> float:
    return float((predict(model, batch.inputs, act_quant) == batch.labels).mean())


@dataclass
class OptimConfig:
    """AMSGrad settings; the learning rate is multiplied by ``decay`` at each milestone fraction."""

    lr: float = 1e-3
    batch_size: int = 128
    milestones: tuple = ()
    decay: float = 0.1
    eval_every: int = 0

    def lr_at(self, step: int, total: int) -> float:
        passed = sum(1 for f in self.milestones if step >= f * total)
        return self.lr * self.decay**passed


def minibatches(n: int, batch_size: int, rng):
    """Endless stream of shuffled index batches; the last partial batch of an epoch is kept."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train(model: MlpModel, data: LabeledBatch, config: OptimConfig, steps: int, seed,
          val: LabeledBatch | None = None, mask=None):
    """Plain AMSGrad training. ``mask`` (list per parameter) freezes zero entries.

    Returns the trained copy and a trace of ``{step, loss, train_acc[, val_acc]}`` rows.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = make_rng(seed)
    params = [p.copy() for p in model.params()]
    states = [AmsGradState.zeros(p.shape) for p in params]
    batches = minibatches(len(data), config.batch_size, rng)
    trace = []
    for step in range(steps):
        batch = data.take(next(batches))
        loss, grads = loss_and_grads(MlpModel.from_params(params), batch)
        lr = config.lr_at(step, steps)
        for i, g in enumerate(grads):
            states[i], delta = amsgrad_step(states[i], g, lr)
            if mask is not None:
                delta = delta * mask[i]
            params[i] += delta
        if config.eval_every and ((step + 1) % config.eval_every == 0 or step + 1 == steps):
            current = MlpModel.from_params(params)
            row = {"step": step + 1, "loss": loss, "train_acc": accuracy(current, data)}
            if val is not None:
                row["val_acc"] = accuracy(current, val)
            trace.append(row)
    return MlpModel.from_params(params), trace


def synth_blobs(seed, n: int, dims: int, classes: int, separation: float = 4.0,
                sigma: float = 1.0) -> LabeledBatch:
    """Gaussian clusters at seeded centers; the closest pair of centers is ``separation * sigma`` apart."""
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = make_rng(seed)
    centers = rng.standard_normal((classes, dims))
    if classes > 1:
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=2)
        closest = gaps[np.triu_indices(classes, 1)].min()
        centers *= separation * sigma / closest
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    inputs = centers[labels] + sigma * rng.standard_normal((n, dims))
    return LabeledBatch(inputs, labels)


def _open(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, magic: int) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem} not found under {root}")


def load_idx_pair(images_path, labels_path) -> LabeledBatch:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return LabeledBatch(images.reshape(len(images), -1) / 255.0, labels)


def load_mnist(path):
    """Train and test sets from a directory holding the four IDX files."""
    root = Path(path)
    train_set = load_idx_pair(_find(root, "train-images-idx3-ubyte"),
                              _find(root, "train-labels-idx1-ubyte"))
    test_set = load_idx_pair(_find(root, "t10k-images-idx3-ubyte"),
                             _find(root, "t10k-labels-idx1-ubyte"))
    return train_set, test_set


def split_validation(data: LabeledBatch, fraction: float, seed):
    """Seeded random (train, val) split."""
    rng = make_rng(seed)
    order = rng.permutation(len(data))
    n_val = int(round(fraction * len(data)))
    return data.take(np.sort(order[n_val:])), data.take(np.sort(order[:n_val]))
