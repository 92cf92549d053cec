"""Vectorised image helpers on (N, H, W) float arrays.

Used by both the corruption functions and the test-time augmentation policy.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

DTYPE = np.float32


def filter2d(images: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size correlation of every image with one 2-D kernel, edges replicated."""
    kernel = np.asarray(kernel, dtype=np.float64)
    return ndimage.correlate(images.astype(np.float64), kernel[None], mode="nearest").astype(DTYPE)


def filter2d_each(images: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Like :func:`filter2d` but with one kernel per image (kernels: N x k x k, k odd)."""
    n, h, w = images.shape
    k = kernels.shape[-1]
    r = k // 2
    padded = np.pad(images, ((0, 0), (r, r), (r, r)), mode="edge").astype(np.float64)
    out = np.zeros((n, h, w), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += kernels[:, i, j, None, None] * padded[:, i : i + h, j : j + w]
    return out.astype(DTYPE)


def gaussian_kernel(sigma: float, radius: int = 1) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * max(sigma, 1e-6) ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_kernels(sigmas: np.ndarray, radius: int = 1) -> np.ndarray:
    """Stack of :func:`gaussian_kernel` for each sigma (N x k x k)."""
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    s = np.maximum(np.asarray(sigmas, dtype=np.float64), 1e-6)
    g = np.exp(-(ax[None, :] ** 2) / (2.0 * s[:, None] ** 2))
    k = g[:, :, None] * g[:, None, :]
    return k / k.sum(axis=(1, 2), keepdims=True)


def disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Anti-aliased disk of the given radius, normalised to sum 1."""
    r = int(np.ceil(radius))
    size = 2 * r + 1
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    ax = np.arange(size) - r
    fine = (ax[:, None] + offsets[None, :]).reshape(-1)
    yy, xx = np.meshgrid(fine, fine, indexing="ij")
    inside = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    k = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return k / k.sum()


def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised 1-pixel-wide line of ``length`` taps through the centre at ``angle`` radians."""
    r = length // 2 + 1
    size = 2 * r + 1
    k = np.zeros((size, size), dtype=np.float64)
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * length)
    xs = np.round(r + ts * np.cos(angle)).astype(int)
    ys = np.round(r + ts * np.sin(angle)).astype(int)
    k[ys, xs] = 1.0
    return k / k.sum()


def affine_warp(images: np.ndarray, matrices: np.ndarray) -> np.ndarray:
    """Bilinear resampling of each image through an inverse 2x3 affine map.

    ``matrices[n]`` maps output pixel coordinates (x, y, 1), measured from the
    image centre, to input coordinates. Samples outside the image take the
    nearest edge value.
    """
    n, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    grid = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)  # 3 x HW
    src = matrices @ grid  # n x 2 x HW
    sx = np.clip(src[:, 0] + cx, 0, w - 1)
    sy = np.clip(src[:, 1] + cy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    flat = images.reshape(n, h * w).astype(np.float64)
    rows = np.arange(n)[:, None]

    def at(yy, xx):
        return flat[rows, yy * w + xx]

    out = (
        at(y0, x0) * (1 - fx) * (1 - fy)
        + at(y0, x1) * fx * (1 - fy)
        + at(y1, x0) * (1 - fx) * fy
        + at(y1, x1) * fx * fy
    )
    return out.reshape(n, h, w).astype(DTYPE)


def affine_matrices(angle: np.ndarray, scale: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    """Inverse maps for rotate-by-``angle``, scale, then translate (per image)."""
    c, s = np.cos(angle), np.sin(angle)
    inv = 1.0 / scale
    m = np.empty((len(angle), 2, 3))
    m[:, 0, 0] = c * inv
    m[:, 0, 1] = s * inv
    m[:, 1, 0] = -s * inv
    m[:, 1, 1] = c * inv
    m[:, 0, 2] = -(m[:, 0, 0] * tx + m[:, 0, 1] * ty)
    m[:, 1, 2] = -(m[:, 1, 0] * tx + m[:, 1, 1] * ty)
    return m


def smooth_noise_field(rng: np.random.Generator, n: int, h: int, w: int, coarse: int = 4) -> np.ndarray:
    """Low-frequency field in [0, 1]: coarse uniform noise upsampled bilinearly."""
    base = rng.random((n, coarse + 1, coarse + 1))
    ys = np.linspace(0, coarse, h)
    xs = np.linspace(0, coarse, w)
    y0 = np.minimum(np.floor(ys).astype(int), coarse - 1)
    x0 = np.minimum(np.floor(xs).astype(int), coarse - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    field = (
        base[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
        + base[:, y0][:, :, x0 + 1] * (1 - fy) * fx
        + base[:, y0 + 1][:, :, x0] * fy * (1 - fx)
        + base[:, y0 + 1][:, :, x0 + 1] * fy * fx
    )
    lo = field.min(axis=(1, 2), keepdims=True)
    hi = field.max(axis=(1, 2), keepdims=True)
    return ((field - lo) / np.maximum(hi - lo, 1e-6)).astype(DTYPE)


def area_resize(images: np.ndarray, size: int) -> np.ndarray:
    """Box-filter downscale of square images to ``size`` x ``size``."""
    n, h, w = images.shape
    if size == h:
        return images.copy()
    # fractional box filter via integral over a fine grid
    edges = np.linspace(0, h, size + 1)
    weights = np.zeros((size, h))
    for i in range(size):
        lo, hi = edges[i], edges[i + 1]
        for p in range(h):
            weights[i, p] = max(0.0, min(hi, p + 1) - max(lo, p))
        weights[i] /= weights[i].sum()
    return np.einsum("ip,npq,jq->nij", weights, images.astype(np.float64), weights).astype(DTYPE)


def nearest_resize(images: np.ndarray, size: int) -> np.ndarray:
    n, h, w = images.shape
    idx = np.minimum((np.arange(size) * h / size).astype(int), h - 1)
    return images[:, idx][:, :, idx]
