"""Spatial-domain augmentation built on three primitive operations.

Every strategy is either an affine warp (3x3 homogeneous matrix acting on
continuous pixel coordinates, pixel centres at ``i + 0.5``), a pointwise
pixel map ``alpha * f(I) + beta + noise``, or a Gaussian-convolution based
operation (blur, elastic). Pipelines fuse runs of consecutive affine steps
into a single matrix so the image is resampled only once per run.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import raster
from .seeding import rng_for

AFFINE = "affine"
PIXEL = "pixel"
CONVOLUTION = "convolution"

STRATEGY_KIND = {
    "rotate": AFFINE,
    "crop": AFFINE,
    "hflip": AFFINE,
    "vflip": AFFINE,
    "shear": AFFINE,
    "scale": AFFINE,
    "shift_scale_rotate": AFFINE,
    "color_jitter": PIXEL,
    "gaussian_noise": PIXEL,
    "gamma": PIXEL,
    "blur": CONVOLUTION,
    "elastic": CONVOLUTION,
}
GEOMETRIC = {name for name, kind in STRATEGY_KIND.items() if kind == AFFINE} | {"elastic"}


# --------------------------------------------------------------------------
# affine algebra


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("affine matrix must be 3x3")
        if m[2, 0] != 0.0 or m[2, 1] != 0.0 or m[2, 2] != 1.0:
            raise ValueError("bottom row must be exactly (0, 0, 1)")
        if abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) <= 1e-12:
            raise ValueError("affine transform is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_linear(cls, a, t=(0.0, 0.0)) -> "AffineTransform2D":
        m = np.eye(3)
        m[:2, :2] = a
        m[:2, 2] = t
        return cls(m)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)))

    def inverse(self) -> "AffineTransform2D":
        (a, b, tx), (c, d, ty) = self.matrix[0], self.matrix[1]
        det = a * d - b * c
        ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
        return AffineTransform2D(
            np.array([[ia, ib, -(ia * tx + ib * ty)], [ic, id_, -(ic * tx + id_ * ty)], [0.0, 0.0, 1.0]])
        )

    def map_points(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix[:2, :2].T + self.matrix[:2, 2]


IDENTITY = AffineTransform2D(np.eye(3))


def compose_affine(a: AffineTransform2D, b: AffineTransform2D) -> AffineTransform2D:
    """Matrix product ``a @ b``: apply ``b`` first, then ``a``."""
    return AffineTransform2D(a.matrix @ b.matrix)


def translation(tx: float, ty: float) -> AffineTransform2D:
    return AffineTransform2D.from_linear(np.eye(2), (tx, ty))


def about_center(linear: np.ndarray, width: int, height: int) -> AffineTransform2D:
    cx, cy = width / 2.0, height / 2.0
    return compose_affine(translation(cx, cy), compose_affine(AffineTransform2D.from_linear(linear), translation(-cx, -cy)))


def rotation(theta: float, width: int, height: int) -> AffineTransform2D:
    c, s = math.cos(theta), math.sin(theta)
    return about_center(np.array([[c, -s], [s, c]]), width, height)


def hflip(width: int) -> AffineTransform2D:
    return AffineTransform2D(np.array([[-1.0, 0.0, float(width)], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))


def vflip(height: int) -> AffineTransform2D:
    return AffineTransform2D(np.array([[1.0, 0.0, 0.0], [0.0, -1.0, float(height)], [0.0, 0.0, 1.0]]))


def shear(sx: float, sy: float, width: int, height: int) -> AffineTransform2D:
    return about_center(np.array([[1.0, sx], [sy, 1.0]]), width, height)


def scaling(sx: float, sy: float, width: int, height: int) -> AffineTransform2D:
    return about_center(np.array([[sx, 0.0], [0.0, sy]]), width, height)


def shift_scale_rotate(s: float, theta: float, tx: float, ty: float, width: int, height: int) -> AffineTransform2D:
    c, si = math.cos(theta), math.sin(theta)
    core = about_center(np.array([[s * c, -s * si], [s * si, s * c]]), width, height)
    return compose_affine(translation(tx, ty), core)


def crop(x0: float, y0: float, w: float, h: float, width: int, height: int) -> AffineTransform2D:
    """Crop window [x0, x0+w) x [y0, y0+h) stretched back to the full canvas."""
    return compose_affine(
        AffineTransform2D.from_linear(np.diag([width / w, height / h])), translation(-x0, -y0)
    )


# --------------------------------------------------------------------------
# sampling


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at continuous coords with reflected borders."""
    _, h, w = img.shape
    u, v = xs - 0.5, ys - 0.5
    x0, y0 = np.floor(u), np.floor(v)
    fx, fy = u - x0, v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = raster.reflect_index(x0, w), raster.reflect_index(x0 + 1, w)
    ya, yb = raster.reflect_index(y0, h), raster.reflect_index(y0 + 1, h)
    top = img[:, ya, xa] * (1.0 - fx) + img[:, ya, xb] * fx
    bot = img[:, yb, xa] * (1.0 - fx) + img[:, yb, xb] * fx
    return top * (1.0 - fy) + bot * fy


def _nearest(mask: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    xi = np.floor(xs).astype(np.int64)
    yi = np.floor(ys).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(xs.shape, dtype=mask.dtype)
    out[inside] = mask[yi[inside], xi[inside]]
    return out


def _pixel_centres(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs + 0.5, ys + 0.5


def apply_affine(img: np.ndarray, mask: np.ndarray | None, t: AffineTransform2D):
    """Warp by inverse mapping: bilinear for the image, nearest for the mask.

    Image samples falling outside the canvas are reflected back in; mask
    samples outside become background.
    """
    img = np.asarray(img, dtype=np.float64)
    if t.is_identity():
        return img.copy(), None if mask is None else np.array(mask, copy=True)
    _, h, w = img.shape
    xs, ys = _pixel_centres(h, w)
    src = t.inverse().map_points(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx, sy = src[:, 0].reshape(h, w), src[:, 1].reshape(h, w)
    out = _bilinear(img, sx, sy)
    out_mask = None if mask is None else _nearest(np.asarray(mask), sx, sy)
    return out, out_mask


# --------------------------------------------------------------------------
# pixel and convolution ops


@dataclass(frozen=True)
class PixelTransform:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float | None = None  # None = identity map
    sigma: float = 0.0

    def __post_init__(self):
        if self.gamma is not None and not 0.8 <= self.gamma <= 1.2:
            raise ValueError("gamma must lie in [0.8, 1.2]")
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")


def apply_pixel(img: np.ndarray, p: PixelTransform, rng: np.random.Generator | None = None,
                clip: bool = True) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    out = img if p.gamma is None or p.gamma == 1.0 else np.power(img, p.gamma)
    if p.alpha != 1.0:
        out = p.alpha * out
    if p.beta != 0.0:
        out = out + p.beta
    if p.sigma > 0:
        if rng is None:
            raise ValueError("noise requires a random generator")
        out = out + rng.normal(0.0, p.sigma, size=img.shape)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out if out is not img else img.copy()


def _fit_kernel(sigma: float, h: int, w: int) -> np.ndarray:
    radius = min(int(math.ceil(3.0 * sigma)), (min(h, w) - 1) // 2)
    return raster.gaussian_kernel(sigma, radius)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    _, h, w = img.shape
    return raster.convolve2d(img, _fit_kernel(sigma, h, w))


def elastic_displacement(h: int, w: int, alpha: float, sigma: float,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed i.i.d. uniform[-1, 1] fields scaled by alpha; |displacement| <= alpha."""
    k = _fit_kernel(sigma, h, w)
    delta = rng.uniform(-1.0, 1.0, size=(2, h, w))
    smooth = raster.convolve2d(delta, k)
    return alpha * smooth[0], alpha * smooth[1]


def elastic_transform(img: np.ndarray, mask: np.ndarray | None, alpha: float, sigma: float,
                      rng: np.random.Generator):
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic transform needs alpha >= 0 and sigma > 0")
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    dx, dy = elastic_displacement(h, w, alpha, sigma, rng)
    if alpha == 0:
        return img.copy(), None if mask is None else np.array(mask, copy=True)
    xs, ys = _pixel_centres(h, w)
    sx, sy = xs + dx, ys + dy
    out = _bilinear(img, sx, sy)
    out_mask = None if mask is None else _nearest(np.asarray(mask), sx, sy)
    return out, out_mask


# --------------------------------------------------------------------------
# pipelines


@dataclass(frozen=True)
class TransformStep:
    strategy: str
    params: dict = field(default_factory=dict)
    p: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGY_KIND:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("step probability must lie in [0, 1]")

    @property
    def kind(self) -> str:
        return STRATEGY_KIND[self.strategy]

    @property
    def apply_to_mask(self) -> bool:
        return self.strategy in GEOMETRIC


@dataclass(frozen=True)
class Pipeline:
    steps: tuple[TransformStep, ...] = ()
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | list) -> "Pipeline":
        if isinstance(d, list):
            d = {"steps": d}
        steps = tuple(
            TransformStep(s["strategy"], dict(s.get("params", {})), float(s.get("p", 0.5)))
            for s in d.get("steps", [])
        )
        return cls(steps, int(d.get("seed", 0)))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Pipeline":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "steps": [{"strategy": s.strategy, "params": s.params, "p": s.p} for s in self.steps]}


def _draw(params: dict, key: str, default: Any, rng: np.random.Generator) -> float:
    """A scalar param is fixed, a [lo, hi] pair is sampled uniformly and
    ``{"choices": [...]}`` picks one listed value with equal probability."""
    v = params.get(key, default)
    if isinstance(v, dict):
        return float(v["choices"][rng.integers(len(v["choices"]))])
    if isinstance(v, (list, tuple)):
        return float(rng.uniform(v[0], v[1]))
    return float(v)


def step_affine(step: TransformStep, rng: np.random.Generator, width: int, height: int) -> AffineTransform2D:
    """Sample the matrix of one geometric strategy."""
    p = step.params
    name = step.strategy
    if name == "rotate":
        return rotation(math.radians(_draw(p, "angle", [-180.0, 180.0], rng)), width, height)
    if name == "hflip":
        return hflip(width)
    if name == "vflip":
        return vflip(height)
    if name == "shear":
        return shear(_draw(p, "sx", [-0.2, 0.2], rng), _draw(p, "sy", [-0.2, 0.2], rng), width, height)
    if name == "scale":
        sx = _draw(p, "sx", [0.8, 1.2], rng)
        sy = _draw(p, "sy", sx, rng) if "sy" in p else sx
        return scaling(sx, sy, width, height)
    if name == "shift_scale_rotate":
        s = _draw(p, "scale", [0.9, 1.1], rng)
        theta = math.radians(_draw(p, "angle", [-45.0, 45.0], rng))
        shift = p.get("shift", [-0.0625, 0.0625])
        tx = _draw({"v": shift}, "v", 0.0, rng) * width
        ty = _draw({"v": shift}, "v", 0.0, rng) * height
        return shift_scale_rotate(s, theta, tx, ty, width, height)
    if name == "crop":
        frac = _draw(p, "size", [0.7, 1.0], rng)
        cw, ch = frac * width, frac * height
        x0 = _draw(p, "x", [0.0, width - cw], rng)
        y0 = _draw(p, "y", [0.0, height - ch], rng)
        return crop(x0, y0, cw, ch, width, height)
    raise ValueError(f"{name} is not an affine strategy")


def step_pixel(step: TransformStep, rng: np.random.Generator) -> PixelTransform:
    p = step.params
    name = step.strategy
    if name == "color_jitter":
        gain = _draw(p, "brightness", [0.8, 1.2], rng)
        offset = _draw(p, "offset", [-0.1, 0.1], rng)
        contrast = _draw(p, "contrast", [0.8, 1.2], rng)
        # (gain * I + offset) * contrast
        return PixelTransform(alpha=gain * contrast, beta=offset * contrast)
    if name == "gaussian_noise":
        return PixelTransform(sigma=_draw(p, "sigma", 0.02, rng))
    if name == "gamma":
        return PixelTransform(gamma=_draw(p, "gamma", [0.8, 1.2], rng))
    raise ValueError(f"{name} is not a pixel strategy")


def run_pipeline(p: Pipeline, img: np.ndarray, mask: np.ndarray, item: int = 0):
    """Apply the steps in order with a private stream seeded from (p.seed, item)."""
    rng = rng_for(p.seed, "sdat", item)
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    _, h, w = img.shape
    pending = IDENTITY

    def flush(img, mask, pending):
        if pending.is_identity():
            return img, mask
        return apply_affine(img, mask, pending)

    for step in p.steps:
        if rng.random() >= step.p:
            continue
        if step.kind == AFFINE:
            pending = compose_affine(step_affine(step, rng, w, h), pending)
            continue
        img, mask = flush(img, mask, pending)
        pending = IDENTITY
        if step.kind == PIXEL:
            img = apply_pixel(img, step_pixel(step, rng), rng)
        elif step.strategy == "blur":
            img = blur(img, _draw(step.params, "sigma", [0.1, 1.5], rng))
        else:
            alpha = _draw(step.params, "alpha", [0.0, 2.0], rng)
            sigma = _draw(step.params, "sigma", [3.0, 5.0], rng)
            img, mask = elastic_transform(img, mask, alpha, sigma, rng)
    img, mask = flush(img, mask, pending)
    return (img.copy() if img is not None else img), np.array(mask, copy=True)


# Label-exact geometry only: flips and quarter turns never sample outside the
# frame, so the reflected image border cannot disagree with the zero-filled mask.
DEFAULT_PIPELINE = Pipeline(
    steps=(
        TransformStep("hflip", {}, 0.5),
        TransformStep("vflip", {}, 0.5),
        TransformStep("rotate", {"angle": {"choices": [90.0, 180.0, 270.0]}}, 0.5),
    ),
    seed=0,
)
