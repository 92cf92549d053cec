"""Online test-time adaptation methods.

All methods share one contract: given a label-free batch they return class
probabilities for that batch (computed before the batch influences any
parameter used for the prediction) and then update their own state.

* ``source``: frozen model, BN running statistics.
* ``bn_stats``: frozen weights, BN statistics of the current batch.
* ``pseudo_label``: hard self-labels, Adam on BN scale/shift only.
* ``tent_continual``: entropy minimisation on BN scale/shift, never reset.
* ``tent_online``: as above, but reset to the source model whenever the
  stream's segment changes (uses domain labels, so it is an oracle).
* ``cotta``: mean-teacher consistency with confidence-gated augmentation
  averaging and stochastic restoration of weights to the source model.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import imageops
from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import AdamState, ModelState, StatsMode
from .stream import SegmentInfo

logger = logging.getLogger(__name__)

DTYPE = np.float32


class Method(str, enum.Enum):
    SOURCE = "source"
    BN_STATS = "bn_stats"
    PSEUDO_LABEL = "pseudo_label"
    TENT_CONTINUAL = "tent_continual"
    TENT_ONLINE = "tent_online"
    COTTA = "cotta"


NORM_ONLY_METHODS = (Method.PSEUDO_LABEL, Method.TENT_CONTINUAL, Method.TENT_ONLINE)
RESTORE_SCOPES = ("all", "weights", "norm_affine")
PREDICT_FROM = ("refined", "teacher_direct")


def parse_method(value) -> Method:
    try:
        return Method(value)
    except ValueError:
        names = ", ".join(m.value for m in Method)
        raise ConfigError(f"unknown method {value!r}; expected one of: {names}") from None


@dataclass
class AugmentSettings:
    """Ranges for the random test-time augmentation policy (grayscale images)."""

    brightness: tuple[float, float] = (0.8, 1.2)  # multiplicative factor
    contrast: tuple[float, float] = (0.8, 1.2)
    rotation_deg: float = 15.0
    translate_px: float = 2.0
    scale: tuple[float, float] = (0.9, 1.1)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 0.8)
    flip_prob: float = 0.5
    noise_std: float = 0.02

    @classmethod
    def identity(cls) -> AugmentSettings:
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, (1.0, 1.0), 0.0, (0.1, 0.8), 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> AugmentSettings:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augment keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)


@dataclass
class AdaptConfig:
    method: Method = Method.COTTA
    alpha: float = 0.999
    restore_p: float = 0.01
    p_th: float = 0.92
    n_aug: int = 32
    lr: float = 1e-3
    enable_weight_avg: bool = True
    enable_aug_avg: bool = True
    enable_restore: bool = True
    hard_labels: bool = False
    predict_from: str = "refined"
    restore_scope: str = "all"
    stats_mode: StatsMode = StatsMode.USE_CURRENT_BATCH
    source_stats_mode: StatsMode = StatsMode.USE_CURRENT_BATCH
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    seed: int = 0

    def __post_init__(self) -> None:
        self.method = parse_method(self.method)
        self.stats_mode = StatsMode(self.stats_mode)
        self.source_stats_mode = StatsMode(self.source_stats_mode)
        if isinstance(self.augment, dict):
            self.augment = AugmentSettings.from_dict(self.augment)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.restore_p <= 1.0:
            raise ConfigError(f"restore_p must be in [0, 1], got {self.restore_p}")
        if not 0.0 <= self.p_th <= 1.0:
            raise ConfigError(f"p_th must be in [0, 1], got {self.p_th}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.n_aug < 0:
            raise ConfigError(f"n_aug must be >= 0, got {self.n_aug}")
        if self.method is Method.COTTA and self.enable_aug_avg and self.n_aug < 1:
            raise ConfigError("n_aug must be >= 1 while enable_aug_avg is true; set enable_aug_avg: false to turn augmentation averaging off")
        if self.predict_from not in PREDICT_FROM:
            raise ConfigError(f"predict_from must be one of {PREDICT_FROM}, got {self.predict_from!r}")
        if self.restore_scope not in RESTORE_SCOPES:
            raise ConfigError(f"restore_scope must be one of {RESTORE_SCOPES}, got {self.restore_scope!r}")
        if self.stats_mode is StatsMode.TRAIN or self.source_stats_mode is StatsMode.TRAIN:
            raise ConfigError("stats modes during adaptation must be 'running' or 'current_batch'")

    def with_(self, **changes) -> AdaptConfig:
        return replace(self, **changes)


@dataclass
class AdaptState:
    student: ModelState
    teacher: ModelState
    source: ModelState
    optimizer: AdamState
    step_counter: int = 0


@dataclass
class PseudoLabel:
    probs: np.ndarray  # B x K refined pseudo-label
    direct_probs: np.ndarray  # B x K teacher prediction on the clean input
    source_confidence: np.ndarray  # B
    used_augmentation: np.ndarray  # B, bool


@dataclass
class RestoreMask:
    masks: dict[str, np.ndarray]

    @property
    def restored(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    @property
    def fraction(self) -> float:
        return self.restored / self.total if self.total else 0.0


@dataclass
class StepOutput:
    probs: np.ndarray
    loss: float = float("nan")
    restored_frac: float = 0.0


def init_state(source: ModelState, cfg: AdaptConfig) -> AdaptState:
    """Student, teacher and frozen source all start as copies of ``source``."""
    student = nn.snapshot(source)
    if cfg.method in NORM_ONLY_METHODS:
        for p in student.params.values():
            p.value.requires_grad = p.is_norm_affine
    frozen = nn.snapshot(source)
    for p in frozen.params.values():
        p.value.requires_grad = False
    teacher = nn.snapshot(frozen)
    return AdaptState(student, teacher, frozen, AdamState(lr=cfg.lr))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def consistency_loss(teacher_probs: np.ndarray, student_logits: T.Tensor) -> T.Tensor:
    """Cross-entropy of student predictions against fixed teacher probabilities."""
    if isinstance(teacher_probs, T.Tensor):
        teacher_probs = teacher_probs.data
    if teacher_probs.shape != student_logits.shape:
        raise ShapeError(f"teacher probabilities {teacher_probs.shape} vs student logits {student_logits.shape}")
    return nn.soft_cross_entropy(teacher_probs, student_logits)


def ema_update(teacher: ModelState, student: ModelState, alpha: float) -> None:
    """``teacher <- alpha * teacher + (1 - alpha) * student`` for every parameter.

    BN running buffers are copied from the student rather than blended.
    """
    if teacher.architecture_id != student.architecture_id or teacher.params.keys() != student.params.keys():
        raise ContractError("ema_update: teacher and student architectures differ")
    a = DTYPE(alpha)
    b = DTYPE(1.0 - alpha)
    for name, tp in teacher.params.items():
        tp.value.data[...] = a * tp.data + b * student.params[name].data
    for name, buf in teacher.buffers.items():
        np.copyto(buf, student.buffers[name])


def augment(batch: np.ndarray, rng: np.random.Generator, settings: AugmentSettings | None = None) -> np.ndarray:
    """Random grayscale jitter, affine warp, blur, horizontal flip and noise on B x 1 x H x W."""
    s = settings or AugmentSettings()
    x = np.asarray(batch, dtype=DTYPE)[:, 0]
    n = len(x)
    b = rng.uniform(*s.brightness, n)
    c = rng.uniform(*s.contrast, n)
    angle = np.deg2rad(rng.uniform(-s.rotation_deg, s.rotation_deg, n))
    tx = rng.uniform(-s.translate_px, s.translate_px, n)
    ty = rng.uniform(-s.translate_px, s.translate_px, n)
    scale = rng.uniform(*s.scale, n)
    blur_on = rng.random(n) < s.blur_prob
    sigma = rng.uniform(*s.blur_sigma, n)
    flip = rng.random(n) < s.flip_prob
    noise_std = rng.uniform(0.0, s.noise_std, n)
    noise = rng.normal(0.0, 1.0, x.shape)

    if s.brightness != (1.0, 1.0):
        x = x * b[:, None, None]
    if s.contrast != (1.0, 1.0):
        mu = x.mean(axis=(1, 2), keepdims=True)
        x = (x - mu) * c[:, None, None] + mu
    if s.rotation_deg or s.translate_px or s.scale != (1.0, 1.0):
        x = imageops.affine_warp(x, imageops.affine_matrices(angle, scale, tx, ty))
    if blur_on.any():
        kernels = np.where(blur_on[:, None, None], imageops.gaussian_kernels(sigma), _delta3())
        x = imageops.filter2d_each(x, kernels)
    if flip.any():
        x = np.where(flip[:, None, None], x[:, :, ::-1], x)
    if s.noise_std > 0:
        x = x + noise * noise_std[:, None, None]
    return np.clip(x, 0.0, 1.0).astype(DTYPE)[:, None]


def _delta3() -> np.ndarray:
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    return k


def refined_pseudo_label(
    state: AdaptState,
    batch: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
) -> PseudoLabel:
    """Teacher pseudo-labels, augmentation-averaged for items the source model is unsure about.

    The gate is per item: items whose source max-probability is at least
    ``p_th`` keep the teacher's direct prediction, the rest get the mean of the
    teacher's predictions over ``n_aug`` augmented copies of the batch.
    """
    teacher = state.teacher if cfg.enable_weight_avg else state.student
    direct = nn.predict_proba(teacher, batch, cfg.stats_mode)
    conf = nn.predict_proba(state.source, batch, cfg.source_stats_mode).max(axis=1)
    if cfg.enable_aug_avg:
        use_aug = conf < cfg.p_th
    else:
        use_aug = np.zeros(len(conf), dtype=bool)
    probs = direct.copy()
    if use_aug.any():
        if cfg.n_aug < 1:
            raise ConfigError("augmentation averaging needs n_aug >= 1")
        # all copies in one pass; with current-batch stats each copy keeps its own BN statistics
        stacked = augment(np.tile(batch, (cfg.n_aug, 1, 1, 1)), rng, cfg.augment)
        groups = cfg.n_aug if cfg.stats_mode is StatsMode.USE_CURRENT_BATCH else 1
        aug_probs = nn.predict_proba(teacher, stacked, cfg.stats_mode, groups)
        aug_probs = aug_probs.reshape(cfg.n_aug, len(batch), -1).astype(np.float64)
        averaged = (aug_probs.sum(axis=0) / cfg.n_aug).astype(DTYPE)
        probs[use_aug] = averaged[use_aug]
    return PseudoLabel(probs, direct, conf, use_aug)


def _restore_targets(model: ModelState, scope: str) -> list[str]:
    if scope == "all":
        return list(model.params)
    if scope == "weights":
        return [n for n, p in model.params.items() if not p.is_norm_affine]
    return [n for n, p in model.params.items() if p.is_norm_affine]


def stochastic_restore(
    student: ModelState,
    source: ModelState,
    p: float,
    rng: np.random.Generator,
    scope: str = "all",
) -> RestoreMask:
    """Reset each selected parameter entry to its source value with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"restore probability must be in [0, 1], got {p}")
    masks = {}
    for name in _restore_targets(student, scope):
        cur = student.params[name].value
        mask = rng.random(cur.data.shape) < p
        if mask.any():
            cur.data[...] = np.where(mask, source.params[name].data, cur.data)
        masks[name] = mask
    return RestoreMask(masks)


# ---------------------------------------------------------------------------
# per-method steps
# ---------------------------------------------------------------------------


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    aug_seq, restore_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(aug_seq), np.random.default_rng(restore_seq)


def cotta_step(
    state: AdaptState,
    batch: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
    restore_rng: np.random.Generator | None = None,
) -> StepOutput:
    """One online step: pseudo-label, student update, teacher EMA, restore."""
    pseudo = refined_pseudo_label(state, batch, cfg, rng)
    target = pseudo.probs
    if cfg.hard_labels:
        target = np.eye(target.shape[1], dtype=DTYPE)[target.argmax(axis=1)]

    student = state.student
    logits = nn.forward(student, batch, cfg.stats_mode)
    loss = consistency_loss(target, logits)
    T.backward(loss)
    nn.adam_step(state.optimizer, student.parameters())

    ema_update(state.teacher, student, cfg.alpha)

    restored = 0.0
    if cfg.enable_restore:
        mask = stochastic_restore(student, state.source, cfg.restore_p, restore_rng or rng, cfg.restore_scope)
        restored = mask.fraction
    state.step_counter += 1
    out = pseudo.probs if cfg.predict_from == "refined" else pseudo.direct_probs
    return StepOutput(out, loss.item(), restored)


def tent_step(state: AdaptState, batch: np.ndarray, cfg: AdaptConfig) -> StepOutput:
    """Entropy minimisation on the BN scale/shift parameters."""
    logits = nn.forward(state.student, batch, cfg.stats_mode)
    probs = T.softmax_np(logits.data)
    loss = nn.entropy_loss(logits)
    T.backward(loss)
    nn.adam_step(state.optimizer, state.student.norm_affine())
    state.step_counter += 1
    return StepOutput(probs, loss.item())


def pseudo_label_step(state: AdaptState, batch: np.ndarray, cfg: AdaptConfig) -> StepOutput:
    """Cross-entropy to the model's own argmax labels, BN scale/shift only."""
    logits = nn.forward(state.student, batch, cfg.stats_mode)
    probs = T.softmax_np(logits.data)
    loss = nn.cross_entropy(logits, probs.argmax(axis=1))
    T.backward(loss)
    nn.adam_step(state.optimizer, state.student.norm_affine())
    state.step_counter += 1
    return StepOutput(probs, loss.item())


def bn_stats_step(state: AdaptState, batch: np.ndarray) -> StepOutput:
    state.step_counter += 1
    return StepOutput(nn.predict_proba(state.student, batch, StatsMode.USE_CURRENT_BATCH))


def source_step(state: AdaptState, batch: np.ndarray) -> StepOutput:
    state.step_counter += 1
    return StepOutput(nn.predict_proba(state.student, batch, StatsMode.USE_RUNNING))


class Adapter:
    """Stateful wrapper running one method over a stream of label-free batches."""

    def __init__(self, source: ModelState, cfg: AdaptConfig):
        self.cfg = cfg
        self.state = init_state(source, cfg)
        self.rng, self.restore_rng = _rngs(cfg.seed)
        self._segment: tuple[int, int] | None = None

    @property
    def method(self) -> Method:
        return self.cfg.method

    def step(self, images: np.ndarray, info: SegmentInfo | None = None) -> StepOutput:
        m = self.cfg.method
        if m is Method.TENT_ONLINE and info is not None:
            seg = (info.round, info.segment)
            if self._segment is not None and seg != self._segment:
                nn.restore_into(self.state.student, self.state.source)
                self.state.optimizer.reset()
            self._segment = seg
        if m is Method.SOURCE:
            return source_step(self.state, images)
        if m is Method.BN_STATS:
            return bn_stats_step(self.state, images)
        if m is Method.PSEUDO_LABEL:
            return pseudo_label_step(self.state, images, self.cfg)
        if m in (Method.TENT_CONTINUAL, Method.TENT_ONLINE):
            return tent_step(self.state, images, self.cfg)
        return cotta_step(self.state, images, self.cfg, self.rng, self.restore_rng)
