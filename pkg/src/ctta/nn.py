"""Layers, the two small model architectures, Adam, snapshots and checkpoints.

A model is plain data (:class:`ModelState`): named parameters plus batch-norm
running buffers. :func:`forward` interprets that data according to the
architecture id, so student, teacher and source copies are just three
``ModelState`` values that can be cloned, blended and restored elementwise.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp-small", "cnn-small")
CNN_WIDTHS = (8, 16, 16)
MLP_HIDDEN = (64, 64)
INPUT_SHAPE = (1, 16, 16)


class StatsMode(str, enum.Enum):
    """How batch-norm layers pick their normalization statistics."""

    USE_RUNNING = "running"
    USE_CURRENT_BATCH = "current_batch"
    # current-batch statistics that also update the running buffers; pretraining only
    TRAIN = "train"


@dataclass
class Parameter:
    name: str
    value: Tensor
    is_norm_affine: bool = False

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


@dataclass
class ModelState:
    architecture_id: str
    num_classes: int
    params: dict[str, Parameter]
    buffers: dict[str, np.ndarray]
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int | None = None

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def norm_affine(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.is_norm_affine]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _add_bn(params: dict[str, Parameter], buffers: dict[str, np.ndarray], name: str, channels: int) -> None:
    params[f"{name}.weight"] = Parameter(f"{name}.weight", Tensor(np.ones(channels), requires_grad=True), True)
    params[f"{name}.bias"] = Parameter(f"{name}.bias", Tensor(np.zeros(channels), requires_grad=True), True)
    buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=DTYPE)
    buffers[f"{name}.running_var"] = np.ones(channels, dtype=DTYPE)


def build_model(architecture_id: str, num_classes: int, seed: int) -> ModelState:
    """Deterministically initialise one of the built-in architectures.

    ``cnn-small`` is three Conv3x3-BN-ReLU blocks (average pooling after the
    first two, global average pooling after the last) and a linear head.
    ``mlp-small`` flattens the image and applies two Linear-BN-ReLU blocks and a
    linear head. Weights are He-uniform, biases zero, BN scale 1 and shift 0.
    """
    if architecture_id not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture_id {architecture_id!r}; expected one of {ARCHITECTURES}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    buffers: dict[str, np.ndarray] = {}

    def weight(name: str, shape: tuple[int, ...], fan_in: int) -> None:
        params[name] = Parameter(name, Tensor(_he_uniform(rng, shape, fan_in), requires_grad=True))

    if architecture_id == "cnn-small":
        in_ch = INPUT_SHAPE[0]
        for i, width in enumerate(CNN_WIDTHS, start=1):
            weight(f"conv{i}.weight", (width, in_ch, 3, 3), in_ch * 9)
            _add_bn(params, buffers, f"bn{i}", width)
            in_ch = width
        weight("fc.weight", (num_classes, in_ch), in_ch)
    else:
        in_dim = int(np.prod(INPUT_SHAPE))
        for i, width in enumerate(MLP_HIDDEN, start=1):
            weight(f"fc{i}.weight", (width, in_dim), in_dim)
            _add_bn(params, buffers, f"bn{i}", width)
            in_dim = width
        weight("fc.weight", (num_classes, in_dim), in_dim)
    params["fc.bias"] = Parameter("fc.bias", Tensor(np.zeros(num_classes), requires_grad=True))
    return ModelState(architecture_id, num_classes, params, buffers, seed=seed)


def _bn(model: ModelState, name: str, x: Tensor, mode: StatsMode, groups: int = 1) -> Tensor:
    gamma = model.params[f"{name}.weight"].value
    beta = model.params[f"{name}.bias"].value
    rm = model.buffers[f"{name}.running_mean"]
    rv = model.buffers[f"{name}.running_var"]
    if mode is StatsMode.USE_RUNNING:
        y, _, _ = T.batch_norm(x, gamma, beta, rm, rv, eps=model.bn_eps)
        return y
    # batch of one in a dense layer has zero variance; eps keeps the scale finite
    y, mu, var = T.batch_norm(x, gamma, beta, eps=model.bn_eps, groups=groups)
    if mode is StatsMode.TRAIN:
        if groups != 1:
            raise ContractError("grouped batch statistics cannot update running buffers")
        n = x.data.size // x.shape[1]
        unbiased = var * (n / max(n - 1, 1))
        m = DTYPE(model.bn_momentum)
        rm *= 1 - m
        rm += m * mu
        rv *= 1 - m
        rv += m * unbiased.astype(DTYPE)
    return y


def forward(
    model: ModelState,
    batch,
    stats_mode: StatsMode | str = StatsMode.USE_CURRENT_BATCH,
    groups: int = 1,
) -> Tensor:
    """Logits (B x num_classes) for a B x 1 x 16 x 16 batch.

    ``groups`` evaluates several same-sized batches stacked along axis 0 in one
    pass; with current-batch statistics each group is normalized on its own,
    exactly as if the groups were forwarded separately.
    """
    mode = StatsMode(stats_mode)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != INPUT_SHAPE[0]:
        raise ContractError(f"{model.architecture_id} expects B x {INPUT_SHAPE[0]} x H x W input, got {x.shape}")
    p = model.params
    if model.architecture_id == "cnn-small":
        h = x
        for i in range(1, len(CNN_WIDTHS) + 1):
            h = T.conv2d(h, p[f"conv{i}.weight"].value, stride=1, padding=1)
            h = T.relu(_bn(model, f"bn{i}", h, mode, groups))
            h = T.avg_pool2d(h, 2) if i < len(CNN_WIDTHS) else T.global_avg_pool(h)
    else:
        if x.shape[1:] != INPUT_SHAPE:
            raise ContractError(f"mlp-small expects B x {INPUT_SHAPE} input, got {x.shape}")
        h = T.flatten(x)
        for i in range(1, len(MLP_HIDDEN) + 1):
            h = T.linear(h, p[f"fc{i}.weight"].value)
            h = T.relu(_bn(model, f"bn{i}", h, mode, groups))
    return T.linear(h, p["fc.weight"].value, p["fc.bias"].value)


def predict_proba(
    model: ModelState,
    batch,
    stats_mode: StatsMode | str = StatsMode.USE_CURRENT_BATCH,
    groups: int = 1,
) -> np.ndarray:
    with T.no_grad():
        return T.softmax_np(forward(model, batch, stats_mode, groups).data)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def soft_cross_entropy(targets: np.ndarray, logits: Tensor) -> Tensor:
    """Mean over the batch of ``-sum_c targets_c * log softmax(logits)_c``."""
    targets = np.asarray(targets, dtype=DTYPE)
    if targets.shape != logits.shape:
        raise ShapeError(f"target probabilities {targets.shape} do not match logits {logits.shape}")
    return T.neg(T.sum_(T.mul(T.log_softmax(logits), targets))) * (1.0 / logits.shape[0])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1], dtype=DTYPE)[np.asarray(labels)]
    return soft_cross_entropy(onehot, logits)


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean per-item Shannon entropy of ``softmax(logits)``."""
    logp = T.log_softmax(logits)
    return T.neg(T.sum_(T.mul(T.exp(logp), logp))) * (1.0 / logits.shape[0])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()


def adam_step(opt: AdamState, params: Iterable[Parameter]) -> None:
    """One bias-corrected Adam update over ``params``; gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.value.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for p in params:
        g = p.value.grad
        m = opt.m.get(p.name)
        if m is None:
            m = opt.m[p.name] = np.zeros_like(p.data)
            opt.v[p.name] = np.zeros_like(p.data)
        v = opt.v[p.name]
        m *= DTYPE(opt.beta1)
        m += DTYPE(1.0 - opt.beta1) * g
        v *= DTYPE(opt.beta2)
        v += DTYPE(1.0 - opt.beta2) * (g * g)
        update = (opt.lr / bc1) * m / (np.sqrt(v / DTYPE(bc2)) + DTYPE(opt.eps))
        p.value.data -= update.astype(DTYPE)
        p.value.grad = None


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def _check_same_arch(a: ModelState, b: ModelState) -> None:
    if a.architecture_id != b.architecture_id or a.num_classes != b.num_classes:
        raise ContractError(
            f"architecture mismatch: {a.architecture_id}/{a.num_classes} vs {b.architecture_id}/{b.num_classes}"
        )


def snapshot(model: ModelState) -> ModelState:
    """Storage-disjoint copy of parameters and BN buffers."""
    params = {
        n: Parameter(n, Tensor(p.data.copy(), requires_grad=p.value.requires_grad), p.is_norm_affine)
        for n, p in model.params.items()
    }
    buffers = {n: b.copy() for n, b in model.buffers.items()}
    return ModelState(
        model.architecture_id, model.num_classes, params, buffers, model.bn_momentum, model.bn_eps, model.seed
    )


def restore_into(model: ModelState, snap: ModelState) -> None:
    """Overwrite ``model`` in place with the values held by ``snap``."""
    _check_same_arch(model, snap)
    for name, p in model.params.items():
        np.copyto(p.value.data, snap.params[name].data)
        p.value.grad = None
    for name, b in model.buffers.items():
        np.copyto(b, snap.buffers[name])


def states_equal(a: ModelState, b: ModelState, include_buffers: bool = True) -> bool:
    """Bitwise equality of every parameter (and optionally buffer)."""
    if a.architecture_id != b.architecture_id or a.params.keys() != b.params.keys():
        return False
    if not all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params):
        return False
    if include_buffers:
        return all(np.array_equal(a.buffers[n], b.buffers[n]) for n in a.buffers)
    return True


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: ModelState
    clean_accuracy: float
    epoch_losses: list[float]


def accuracy(model: ModelState, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(images), batch_size):
        probs = predict_proba(model, images[i : i + batch_size], StatsMode.USE_RUNNING)
        correct += int((probs.argmax(axis=1) == labels[i : i + batch_size]).sum())
    return correct / len(images)


def pretrain(
    model: ModelState,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    seed: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
) -> PretrainResult:
    """Supervised cross-entropy training with Adam on clean source data.

    Clean accuracy is measured with running statistics on the eval split when
    given, otherwise on the training data.
    """
    if len(images) == 0:
        raise ConfigError("pretraining dataset is empty")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    rng = np.random.default_rng(seed)
    opt = AdamState(lr=lr)
    params = model.parameters()
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                continue
            logits = forward(model, images[idx], StatsMode.TRAIN)
            loss = cross_entropy(logits, labels[idx])
            T.backward(loss)
            adam_step(opt, params)
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        logger.info("pretrain epoch %d loss %.4f", epoch + 1, losses[-1])
    if eval_images is None:
        eval_images, eval_labels = images, labels
    acc = accuracy(model, eval_images, eval_labels)
    return PretrainResult(model, acc, losses)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "ctta-checkpoint"
CHECKPOINT_VERSION = 1


def _entries(model: ModelState) -> list[tuple[str, str, np.ndarray, bool]]:
    out = [(n, "param", p.data, p.is_norm_affine) for n, p in model.params.items()]
    out += [(n, "buffer", b, False) for n, b in model.buffers.items()]
    return out


def save_checkpoint(model: ModelState, path: str | Path, extra: dict | None = None) -> None:
    """Write a one-line JSON header followed by a little-endian float32 blob."""
    entries = []
    blobs = []
    offset = 0
    for name, kind, arr, norm in _entries(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "norm_affine": norm}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "architecture_id": model.architecture_id,
        "num_classes": model.num_classes,
        "bn_momentum": model.bn_momentum,
        "bn_eps": model.bn_eps,
        "seed": model.seed,
        "entries": entries,
        "extra": extra or {},
    }
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    """Inverse of :func:`save_checkpoint`; returns the model and header ``extra``."""
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{path}: not a checkpoint (bad header: {exc})") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    params: dict[str, Parameter] = {}
    buffers: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ContractError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(blob[e["offset"] : end], dtype="<f4").astype(DTYPE).reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = Parameter(e["name"], Tensor(arr, requires_grad=True), bool(e["norm_affine"]))
        else:
            buffers[e["name"]] = arr.copy()
    model = ModelState(
        header["architecture_id"],
        int(header["num_classes"]),
        params,
        buffers,
        float(header["bn_momentum"]),
        float(header["bn_eps"]),
        header.get("seed"),
    )
    return model, header.get("extra", {})


def parameter_vector(params: Sequence[Parameter]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params]) if params else np.zeros(0, DTYPE)
