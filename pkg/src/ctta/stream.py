"""Synthetic glyph data and continually drifting, corrupted target streams.

The source domain is a procedurally drawn set of 16x16 grayscale glyphs. A
target stream is an ordered list of segments, each applying one corruption at
a per-batch severity. Every batch is a pure function of
``(stream seed, round, segment index, batch index)`` so streams can be
regenerated, compared across methods, and revisited bitwise-identically.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import imageops
from .errors import ConfigError

DTYPE = np.float32
IMAGE_SIZE = 16
MAX_CLASSES = 10


# ---------------------------------------------------------------------------
# glyphs
# ---------------------------------------------------------------------------

GLYPH_NAMES = (
    "ring",
    "disk",
    "square",
    "plus",
    "cross",
    "bars_h",
    "bars_v",
    "triangle",
    "diamond",
    "tee",
)


def _stroke(d: np.ndarray, thickness: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage of a stroke whose centre line has distance ``d``."""
    return np.clip(thickness / 2.0 - d + 0.5, 0.0, 1.0)


def _fill(sd: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage of a region given a signed distance (negative inside)."""
    return np.clip(0.5 - sd, 0.0, 1.0)


def _segment_dist(x, y, ax, ay, bx, by):
    px, py = x - ax, y - ay
    dx, dy = bx - ax, by - ay
    t = np.clip((px * dx + py * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - t * dx, py - t * dy)


def _draw(cls: int, x: np.ndarray, y: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Coverage map of glyph ``cls``; x, y are glyph-frame coordinates (N x H x W)."""
    r = np.hypot(x, y)
    name = GLYPH_NAMES[cls]
    if name == "ring":
        return _stroke(np.abs(r - R), t)
    if name == "disk":
        return _fill(r - 0.8 * R)
    if name == "square":
        return _stroke(np.abs(np.maximum(np.abs(x), np.abs(y)) - 0.9 * R), t)
    if name == "plus":
        d = np.minimum(
            np.where(np.abs(y) <= R, np.abs(x), np.inf),
            np.where(np.abs(x) <= R, np.abs(y), np.inf),
        )
        return _stroke(d, t)
    if name == "cross":
        u, v = (x + y) / np.sqrt(2), (x - y) / np.sqrt(2)
        d = np.minimum(
            np.where(np.abs(v) <= R, np.abs(u), np.inf),
            np.where(np.abs(u) <= R, np.abs(v), np.inf),
        )
        return _stroke(d, t)
    if name == "bars_h":
        d = np.minimum(np.abs(y - 0.5 * R), np.abs(y + 0.5 * R))
        return _stroke(np.where(np.abs(x) <= R, d, np.inf), t)
    if name == "bars_v":
        d = np.minimum(np.abs(x - 0.5 * R), np.abs(x + 0.5 * R))
        return _stroke(np.where(np.abs(y) <= R, d, np.inf), t)
    if name == "triangle":
        top = (0.0 * R, -R)
        left = (-R, 0.8 * R)
        right = (R, 0.8 * R)
        d = np.minimum(
            np.minimum(_segment_dist(x, y, *top, *left), _segment_dist(x, y, *left, *right)),
            _segment_dist(x, y, *right, *top),
        )
        return _stroke(d, t)
    if name == "diamond":
        return _stroke(np.abs(np.abs(x) + np.abs(y) - R) / np.sqrt(2), t)
    # tee
    d = np.minimum(
        _segment_dist(x, y, -R, -0.8 * R, R, -0.8 * R),
        _segment_dist(x, y, 0.0 * R, -0.8 * R, 0.0 * R, R),
    )
    return _stroke(d, t)


@dataclass
class GlyphDataset:
    images: np.ndarray  # N x 1 x 16 x 16, values in [0, 1]
    labels: np.ndarray  # N, int64 in [0, num_classes)
    num_classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def render_glyphs(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one jittered glyph per label; returns N x 1 x 16 x 16 float32."""
    labels = np.asarray(labels)
    n = len(labels)
    c = (IMAGE_SIZE - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(IMAGE_SIZE) - c, np.arange(IMAGE_SIZE) - c, indexing="ij")
    angle = rng.uniform(-0.2, 0.2, n)
    scale = rng.uniform(0.8, 1.1, n)
    shift = rng.uniform(-1.5, 1.5, (n, 2))
    thickness = rng.uniform(1.2, 2.2, n)
    fg = rng.uniform(0.65, 1.0, n)
    bg = rng.uniform(0.0, 0.2, n)
    pixel_noise = rng.normal(0.0, 0.03, (n, IMAGE_SIZE, IMAGE_SIZE))

    ca, sa = np.cos(angle)[:, None, None], np.sin(angle)[:, None, None]
    gx = xx[None] - shift[:, 0, None, None]
    gy = yy[None] - shift[:, 1, None, None]
    x = ca * gx + sa * gy
    y = -sa * gx + ca * gy
    R = (5.0 * scale)[:, None, None]
    t = thickness[:, None, None]
    cov = np.zeros((n, IMAGE_SIZE, IMAGE_SIZE))
    for cls in np.unique(labels):
        m = labels == cls
        cov[m] = _draw(int(cls), x[m], y[m], R[m], t[m])
    img = bg[:, None, None] + (fg - bg)[:, None, None] * cov + pixel_noise
    return np.clip(img, 0.0, 1.0).astype(DTYPE)[:, None]


def make_glyph_dataset(num_samples: int, num_classes: int, seed: int) -> GlyphDataset:
    """Class-balanced glyph set; labels cycle through the classes then get shuffled."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ConfigError(f"num_classes must be in [2, {MAX_CLASSES}], got {num_classes}")
    if num_samples < 1:
        raise ConfigError(f"num_samples must be positive, got {num_samples}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    images = render_glyphs(labels, rng)
    return GlyphDataset(images, labels.astype(np.int64), num_classes, seed)


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------


class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    GLASS_BLUR = "glass_blur"
    MOTION_BLUR = "motion_blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    FOG = "fog"
    PIXELATE = "pixelate"
    # identity; lets a stream carry source-distribution segments
    NONE = "none"


# severity 1..5 parameters, monotone in distortion strength
SEVERITY_TABLES: dict[CorruptionKind, tuple] = {
    CorruptionKind.GAUSSIAN_NOISE: (0.04, 0.08, 0.12, 0.18, 0.26),  # noise std
    CorruptionKind.SHOT_NOISE: (60.0, 25.0, 12.0, 5.0, 3.0),  # photon count at intensity 1
    CorruptionKind.IMPULSE_NOISE: (0.03, 0.06, 0.09, 0.17, 0.27),  # salt-and-pepper fraction
    CorruptionKind.DEFOCUS_BLUR: (0.6, 0.9, 1.2, 1.6, 2.0),  # disk radius (px)
    CorruptionKind.GLASS_BLUR: ((1, 1, 0.4), (1, 2, 0.5), (1, 3, 0.6), (2, 2, 0.8), (2, 3, 1.0)),  # (max shift, swap passes, blur mix)
    CorruptionKind.MOTION_BLUR: (3, 5, 6, 7, 9),  # line length (px)
    CorruptionKind.CONTRAST: (0.6, 0.45, 0.3, 0.2, 0.12),  # contrast factor
    CorruptionKind.BRIGHTNESS: (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    CorruptionKind.FOG: (0.3, 0.5, 0.7, 0.9, 1.2),  # haze strength
    CorruptionKind.PIXELATE: (0.875, 0.6875, 0.4375, 0.3125, 0.25),  # downscale factor (14, 11, 7, 5, 4 px)
}

# parameter value at which each corruption is the identity ("severity 0")
IDENTITY_PARAMETERS: dict[CorruptionKind, object] = {
    CorruptionKind.GAUSSIAN_NOISE: 0.0,
    CorruptionKind.SHOT_NOISE: None,  # infinite photon count; handled as identity
    CorruptionKind.IMPULSE_NOISE: 0.0,
    CorruptionKind.DEFOCUS_BLUR: 0.0,
    CorruptionKind.GLASS_BLUR: (0, 0, 0.0),
    CorruptionKind.MOTION_BLUR: 1,
    CorruptionKind.CONTRAST: 1.0,
    CorruptionKind.BRIGHTNESS: 0.0,
    CorruptionKind.FOG: 0.0,
    CorruptionKind.PIXELATE: 1.0,
}

ALL_KINDS = tuple(k for k in CorruptionKind if k is not CorruptionKind.NONE)


def parse_kind(value) -> CorruptionKind:
    try:
        return CorruptionKind(value)
    except ValueError:
        names = ", ".join(k.value for k in CorruptionKind)
        raise ConfigError(f"unknown corruption kind {value!r}; expected one of: {names}") from None


def apply_corruption(images: np.ndarray, kind: CorruptionKind, param, rng: np.random.Generator) -> np.ndarray:
    """Apply ``kind`` with an explicit parameter value to an (N, H, W) batch."""
    x = images.astype(np.float64)
    n, h, w = x.shape
    if kind is CorruptionKind.NONE:
        out = x
    elif kind is CorruptionKind.GAUSSIAN_NOISE:
        out = x + rng.normal(0.0, 1.0, x.shape) * param
    elif kind is CorruptionKind.SHOT_NOISE:
        out = x if param is None else rng.poisson(x * param) / param
    elif kind is CorruptionKind.IMPULSE_NOISE:
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        hit = u < param
        out = np.where(hit, np.where(salt, 1.0, 0.0), x)
    elif kind is CorruptionKind.DEFOCUS_BLUR:
        out = x if param <= 0 else imageops.filter2d(x, imageops.disk_kernel(param))
    elif kind is CorruptionKind.GLASS_BLUR:
        max_shift, passes, mix = param
        out = x.copy()
        for _ in range(passes):
            out = _local_swaps(out, max_shift, rng)
        if mix > 0:
            out = (1 - mix) * out + mix * imageops.filter2d(out, np.full((3, 3), 1.0 / 9.0))
    elif kind is CorruptionKind.MOTION_BLUR:
        if param <= 1:
            out = x
        else:
            angles = rng.uniform(0.0, np.pi, n)
            ks = [imageops.line_kernel(int(param), a) for a in angles]
            size = max(k.shape[0] for k in ks)
            stack = np.zeros((n, size, size))
            for i, k in enumerate(ks):
                o = (size - k.shape[0]) // 2
                stack[i, o : o + k.shape[0], o : o + k.shape[0]] = k
            out = imageops.filter2d_each(x, stack)
    elif kind is CorruptionKind.CONTRAST:
        mu = x.mean(axis=(1, 2), keepdims=True)
        out = (x - mu) * param + mu
    elif kind is CorruptionKind.BRIGHTNESS:
        out = x + param
    elif kind is CorruptionKind.FOG:
        if param <= 0:
            out = x
        else:
            haze = imageops.smooth_noise_field(rng, n, h, w)
            peak = x.max(axis=(1, 2), keepdims=True)
            out = (x + param * haze) * peak / (peak + param)
    elif kind is CorruptionKind.PIXELATE:
        size = max(1, int(round(h * param)))
        out = x if size >= h else imageops.nearest_resize(imageops.area_resize(x, size), h)
    else:  # pragma: no cover - enum is exhaustive
        raise ConfigError(f"unsupported corruption {kind}")
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


def _local_swaps(x: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    """Swap every pixel with a random neighbour at most ``max_shift`` away (in raster order)."""
    if max_shift <= 0:
        return x
    n, h, w = x.shape
    out = x.copy()
    dys = rng.integers(-max_shift, max_shift + 1, (h, w, n))
    dxs = rng.integers(-max_shift, max_shift + 1, (h, w, n))
    idx = np.arange(n)
    for i in range(h):
        for j in range(w):
            yi = np.clip(i + dys[i, j], 0, h - 1)
            xj = np.clip(j + dxs[i, j], 0, w - 1)
            a = out[idx, i, j].copy()
            out[idx, i, j] = out[idx, yi, xj]
            out[idx, yi, xj] = a
    return out


def _check_severity(severity: int) -> None:
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ConfigError(f"severity must be an integer in 1..5, got {severity!r}")


def corrupt_batch(images: np.ndarray, kind: CorruptionKind | str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a batch shaped (N, 1, H, W) or (N, H, W) at severity 1..5."""
    kind = parse_kind(kind)
    if kind is CorruptionKind.NONE:
        return np.asarray(images, dtype=DTYPE).copy()
    _check_severity(severity)
    arr = np.asarray(images, dtype=DTYPE)
    squeeze = arr.ndim == 4
    flat = arr[:, 0] if squeeze else arr
    out = apply_corruption(flat, kind, SEVERITY_TABLES[kind][severity - 1], rng)
    return out[:, None] if squeeze else out


def corrupt(img: np.ndarray, kind: CorruptionKind | str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a single 1 x H x W image."""
    return corrupt_batch(np.asarray(img)[None], kind, severity, rng)[0]


# ---------------------------------------------------------------------------
# stream specifications
# ---------------------------------------------------------------------------

GRADUAL_RAMP = (1, 2, 3, 4, 5, 4, 3, 2, 1)


@dataclass
class SegmentSpec:
    kind: CorruptionKind
    severity_schedule: list[int]  # one entry per batch
    batch_size: int

    def __post_init__(self) -> None:
        self.kind = parse_kind(self.kind)
        if not self.severity_schedule:
            raise ConfigError("segment needs at least one batch")
        for s in self.severity_schedule:
            _check_severity(s)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")

    @property
    def num_batches(self) -> int:
        return len(self.severity_schedule)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "severity_schedule": list(self.severity_schedule), "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> SegmentSpec:
        return cls(parse_kind(d["kind"]), [int(s) for s in d["severity_schedule"]], int(d["batch_size"]))


@dataclass
class StreamSpec:
    segments: list[SegmentSpec]
    rounds: int = 1
    seed: int = 0
    num_classes: int = 10
    reseed_rounds: bool = True

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigError("stream needs at least one segment")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")

    @property
    def batches_per_round(self) -> int:
        return sum(s.num_batches for s in self.segments)

    @property
    def total_batches(self) -> int:
        return self.rounds * self.batches_per_round

    def to_dict(self) -> dict:
        return {
            "segments": [s.to_dict() for s in self.segments],
            "rounds": self.rounds,
            "seed": self.seed,
            "num_classes": self.num_classes,
            "reseed_rounds": self.reseed_rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> StreamSpec:
        return cls(
            [SegmentSpec.from_dict(s) for s in d["segments"]],
            int(d.get("rounds", 1)),
            int(d.get("seed", 0)),
            int(d.get("num_classes", 10)),
            bool(d.get("reseed_rounds", True)),
        )


def standard_sequence(
    kinds: Sequence[CorruptionKind | str],
    severity: int = 5,
    batches_per_kind: int = 20,
    batch_size: int = 32,
    seed: int = 0,
    rounds: int = 1,
    num_classes: int = 10,
) -> StreamSpec:
    """One constant-severity segment per corruption kind, in the given order."""
    if not kinds:
        raise ConfigError("standard_sequence needs at least one corruption kind")
    _check_severity(severity)
    segs = [SegmentSpec(parse_kind(k), [severity] * batches_per_kind, batch_size) for k in kinds]
    return StreamSpec(segs, rounds=rounds, seed=seed, num_classes=num_classes)


def gradual_sequence(
    kinds: Sequence[CorruptionKind | str],
    batches_per_step: int = 1,
    batch_size: int = 32,
    seed: int = 0,
    rounds: int = 1,
    num_classes: int = 10,
) -> StreamSpec:
    """Per kind, severity ramps 1-2-3-4-5-4-3-2-1; kinds change at severity 1."""
    if not kinds:
        raise ConfigError("gradual_sequence needs at least one corruption kind")
    schedule = [s for s in GRADUAL_RAMP for _ in range(batches_per_step)]
    segs = [SegmentSpec(parse_kind(k), list(schedule), batch_size) for k in kinds]
    return StreamSpec(segs, rounds=rounds, seed=seed, num_classes=num_classes)


def shuffled_orders(kinds: Sequence[CorruptionKind | str], count: int, seed: int) -> list[list[CorruptionKind]]:
    """``count`` seeded permutations of ``kinds``."""
    rng = np.random.default_rng(seed)
    kinds = [parse_kind(k) for k in kinds]
    return [[kinds[i] for i in rng.permutation(len(kinds))] for _ in range(count)]


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentInfo:
    """What an adaptation method may know about the current batch: no labels."""

    step: int
    round: int  # 1-based
    segment: int  # 0-based index within the round
    kind: str
    severity: int


@dataclass(frozen=True)
class StreamBatch:
    images: np.ndarray
    labels: np.ndarray
    info: SegmentInfo

    @property
    def view(self) -> tuple[np.ndarray, SegmentInfo]:
        """The label-free part handed to adaptation methods."""
        return self.images, self.info


def make_batch(spec: StreamSpec, round_: int, segment: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Images and labels for one batch; a pure function of its coordinates."""
    seg = spec.segments[segment]
    severity = seg.severity_schedule[index]
    key = [spec.seed, 0 if spec.reseed_rounds else round_, segment, index]
    rng = np.random.default_rng(key)
    labels = rng.integers(0, spec.num_classes, seg.batch_size)
    clean = render_glyphs(labels, rng)
    images = corrupt_batch(clean, seg.kind, severity, rng)
    return images, labels.astype(np.int64)


def iterate_stream(spec: StreamSpec) -> Iterator[StreamBatch]:
    step = 0
    for r in range(1, spec.rounds + 1):
        for si, seg in enumerate(spec.segments):
            for bi in range(seg.num_batches):
                images, labels = make_batch(spec, r, si, bi)
                info = SegmentInfo(step, r, si, seg.kind.value, seg.severity_schedule[bi])
                yield StreamBatch(images, labels, info)
                step += 1


class TargetStream:
    """Stateful iterator over a :class:`StreamSpec`; raises StopIteration at the end."""

    def __init__(self, spec: StreamSpec):
        self.spec = spec
        self._it = iterate_stream(spec)
        self.consumed = 0

    def __iter__(self) -> TargetStream:
        return self

    def __next__(self) -> StreamBatch:
        batch = next(self._it)
        self.consumed += 1
        return batch

    def next_batch(self) -> StreamBatch | None:
        """Next batch, or ``None`` once the stream is exhausted."""
        return next(self, None)

    def __len__(self) -> int:
        return self.spec.total_batches


def materialize(spec: StreamSpec) -> list[StreamBatch]:
    """Generate the whole stream up front (it is pure, so this is cache-safe)."""
    cache: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}
    out = []
    step = 0
    for r in range(1, spec.rounds + 1):
        for si, seg in enumerate(spec.segments):
            for bi in range(seg.num_batches):
                key = (0 if spec.reseed_rounds else r, si, bi)
                if key not in cache:
                    cache[key] = make_batch(spec, r, si, bi)
                images, labels = cache[key]
                out.append(StreamBatch(images, labels, SegmentInfo(step, r, si, seg.kind.value, seg.severity_schedule[bi])))
                step += 1
    return out
