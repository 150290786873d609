"""Clohessy-Wiltshire relative motion and procedural multi-spacecraft scenes.

State vectors are ordered ``[x, y, z, vx, vy, vz]`` in the chief's rotating
frame: x radial, y along-track, z cross-track (SI units).

Scenes are rendered with an orthographic camera looking down the -z axis:
image column grows with y, image row grows with -x, and targets with larger
z are drawn on top.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import raster
from .seeding import rng_for

MU_EARTH = 3.986004418e14  # m^3/s^2
BACKGROUNDS = ("earth", "moon", "mars", "starfield")
SHAPES = ("square", "box_panels", "cylinder_dish", "cross", "blob")


class PlacementError(ValueError):
    def __init__(self, index: int, message: str = "target projects fully outside the frame"):
        super().__init__(f"target {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class CWParams:
    mu: float = MU_EARTH
    rc: float = 6.778e6

    def __post_init__(self):
        if not (self.mu > 0 and self.rc > 0):
            raise ValueError("mu and rc must be positive")

    @property
    def n(self) -> float:
        return math.sqrt(self.mu / self.rc**3)


@dataclass(frozen=True)
class CWState:
    x: float
    y: float
    z: float
    vx: float
    vy: float
    vz: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("CW state components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.vx, self.vy, self.vz], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "CWState":
        return cls(*(float(v) for v in a))


def cw_transition(n: float, t: float) -> np.ndarray:
    """Closed-form 6x6 state transition matrix of the C-W equations."""
    nt = n * t
    c, s = math.cos(nt), math.sin(nt)
    return np.array(
        [
            [4.0 - 3.0 * c, 0.0, 0.0, s / n, (2.0 - 2.0 * c) / n, 0.0],
            [6.0 * (s - nt), 1.0, 0.0, (2.0 * c - 2.0) / n, -3.0 * t + 4.0 * s / n, 0.0],
            [0.0, 0.0, c, 0.0, 0.0, s / n],
            [3.0 * n * s, 0.0, 0.0, c, 2.0 * s, 0.0],
            [6.0 * n * (c - 1.0), 0.0, 0.0, -2.0 * s, 4.0 * c - 3.0, 0.0],
            [0.0, 0.0, -n * s, 0.0, 0.0, c],
        ]
    )


def propagate(state: CWState, params: CWParams, t: float) -> CWState:
    if t < 0:
        raise ValueError("propagation time must be non-negative")
    return CWState.from_array(cw_transition(params.n, t) @ state.as_array())


# --------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class Target:
    shape: str
    scale: float  # silhouette span in meters
    state: CWState
    rotation: float = 0.0  # in-plane rotation, rad
    variant: int = 0  # seeds blob outline and surface colours

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown silhouette shape {self.shape!r}")
        if not self.scale > 0:
            raise ValueError("scale factor must be positive")


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    background: str
    targets: tuple[Target, ...]
    camera_scale: float  # m/px
    time: float = 0.0
    cw: CWParams = field(default_factory=CWParams)
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    perturbation: float = 0.0

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if not 1 <= len(self.targets) <= 4:
            raise ValueError("a scene holds between 1 and 4 targets")
        if not self.camera_scale > 0:
            raise ValueError("camera scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = [asdict(t) for t in self.targets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["targets"] = tuple(
            Target(**{**t, "state": CWState(**t["state"])}) for t in d["targets"]
        )
        d["cw"] = CWParams(**d.get("cw", {}))
        return cls(**d)


# --------------------------------------------------------------------------
# rendering


def _silhouette(shape: str, u: np.ndarray, v: np.ndarray, variant: int) -> np.ndarray:
    """Part map over normalized local coords: 0 outside, 1 body, 2 panel/dish."""
    au, av = np.abs(u), np.abs(v)
    part = np.zeros(u.shape, dtype=np.int8)
    if shape == "square":
        part[(au <= 0.5) & (av <= 0.5)] = 1
    elif shape == "box_panels":
        part[(au <= 0.5) & (au >= 0.26) & (av <= 0.13)] = 2
        part[(au < 0.26) & (av <= 0.035)] = 1
        part[(au <= 0.18) & (av <= 0.18)] = 1
    elif shape == "cylinder_dish":
        part[((u / 0.32) ** 2 + ((v + 0.36) / 0.11) ** 2) <= 1.0] = 2
        part[(au <= 0.14) & (v >= -0.3) & (v <= 0.5)] = 1
    elif shape == "cross":
        part[((au <= 0.5) & (av <= 0.12)) | ((au <= 0.12) & (av <= 0.5))] = 1
    elif shape == "blob":
        rng = rng_for(variant, "blob")
        k = 9
        radii = rng.uniform(0.3, 0.5, size=k)
        ang = np.arctan2(v, u) % (2 * np.pi)
        pos = ang / (2 * np.pi) * k
        i0 = np.floor(pos).astype(np.int64) % k
        f = pos - np.floor(pos)
        r = radii[i0] * (1 - f) + radii[(i0 + 1) % k] * f
        part[np.hypot(u, v) <= r] = 1
    else:
        raise ValueError(f"unknown silhouette shape {shape!r}")
    return part


def project(state: CWState, spec: SceneSpec) -> tuple[float, float]:
    """Pixel-space (row, col) of a relative position."""
    row = spec.height / 2.0 - state.x / spec.camera_scale
    col = spec.width / 2.0 + state.y / spec.camera_scale
    return row, col


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = rng.uniform(-1.0, 1.0, size=(1, h, w))
    k = raster.gaussian_kernel(sigma, radius=min(int(np.ceil(3 * sigma)), (min(h, w) - 1) // 2))
    f = raster.convolve2d(f, k)[0]
    return f / (np.abs(f).max() + 1e-12)


def render_background(kind: str, h: int, w: int, seed: int) -> np.ndarray:
    rng = rng_for(seed, "background", kind)
    img = np.full((3, h, w), 0.01)
    density = 0.012 if kind == "starfield" else 0.004
    n_stars = rng.poisson(density * h * w)
    rows = rng.integers(0, h, n_stars)
    cols = rng.integers(0, w, n_stars)
    img[:, rows, cols] = rng.uniform(0.3, 1.0, n_stars)[None, :]
    if kind == "starfield":
        return img
    base = {"earth": (0.18, 0.38, 0.78), "moon": (0.55, 0.55, 0.53), "mars": (0.72, 0.38, 0.2)}[kind]
    radius = rng.uniform(1.2, 2.5) * max(h, w)
    ang = rng.uniform(0, 2 * np.pi)
    dist = radius + rng.uniform(-0.45, 0.15) * max(h, w)
    cy = h / 2 + dist * math.sin(ang)
    cx = w / 2 + dist * math.cos(ang)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d = np.hypot(yy - cy, xx - cx) / radius
    inside = d < 1.0
    limb = np.sqrt(np.clip(1.0 - d**2, 0.0, 1.0)) ** 0.5
    texture = 1.0 + 0.25 * _smooth_field(rng, h, w, 3.0)
    for c in range(3):
        img[c] = np.where(inside, base[c] * limb * texture, img[c])
    if kind == "earth":
        clouds = np.clip(_smooth_field(rng, h, w, 2.5), 0.0, 1.0) * limb * inside
        img = img + 0.6 * clouds[None]
    return np.clip(img, 0.0, 1.0)


def _target_colors(variant: int) -> tuple[np.ndarray, np.ndarray]:
    rng = rng_for(variant, "colors")
    if rng.random() < 0.5:
        body = np.array([0.86, 0.7, 0.32])  # gold foil
    else:
        body = np.array([0.78, 0.78, 0.8])  # bare metal
    body = body * rng.uniform(0.85, 1.1)
    panel = np.array([0.42, 0.36, 0.92]) * rng.uniform(0.85, 1.1)  # lit solar cells
    return body, panel


def rasterize_target(target: Target, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Footprint (bool H x W) and per-pixel RGB of one target, after propagation."""
    state = propagate(target.state, spec.cw, spec.time) if spec.time else target.state
    r0, c0 = project(state, spec)
    half = target.scale / spec.camera_scale  # generous bound of the rotated extent
    rmin, rmax = int(max(0, math.floor(r0 - half))), int(min(spec.height, math.ceil(r0 + half) + 1))
    cmin, cmax = int(max(0, math.floor(c0 - half))), int(min(spec.width, math.ceil(c0 + half) + 1))
    foot = np.zeros((spec.height, spec.width), dtype=bool)
    color = np.zeros((3, spec.height, spec.width))
    if rmin >= rmax or cmin >= cmax:
        return foot, color
    rr, cc = np.mgrid[rmin:rmax, cmin:cmax] + 0.5
    px = target.scale / spec.camera_scale
    dr, dc = (rr - r0) / px, (cc - c0) / px
    ca, sa = math.cos(target.rotation), math.sin(target.rotation)
    u = ca * dc + sa * dr
    v = -sa * dc + ca * dr
    part = _silhouette(target.shape, u, v, target.variant)
    body, panel = _target_colors(target.variant)
    shade = 0.8 + 0.25 * (0.6 * u - 0.8 * v)
    rgb = np.where(part[None] == 2, panel[:, None, None], body[:, None, None]) * shade[None]
    foot[rmin:rmax, cmin:cmax] = part > 0
    color[:, rmin:rmax, cmin:cmax] = np.where(part[None] > 0, rgb, 0.0)
    return foot, color


def render_scene(spec: SceneSpec, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec`` into an RGB raster and an instance label map.

    Labels are 1..k over the targets that remain visible after occlusion,
    numbered in target order. Interference (blur, low-frequency disturbance,
    sensor noise) is applied to the image only.
    """
    h, w = spec.height, spec.width
    img = render_background(spec.background, h, w, rng_seed)
    owner = np.full((h, w), -1, dtype=np.int64)
    depth_order = sorted(range(len(spec.targets)), key=lambda i: (spec.targets[i].state.z, i))
    layers = {}
    for i, target in enumerate(spec.targets):
        foot, color = rasterize_target(target, spec)
        if not foot.any():
            raise PlacementError(i)
        layers[i] = (foot, color)
    for i in depth_order:
        foot, color = layers[i]
        owner[foot] = i
        img[:, foot] = color[:, foot]
    mask = np.zeros((h, w), dtype=np.int64)
    label = 0
    for i in range(len(spec.targets)):
        sel = owner == i
        if sel.any():
            label += 1
            mask[sel] = label
    img = _interfere(np.clip(img, 0.0, 1.0), spec, rng_seed)
    return img, mask


def _interfere(img: np.ndarray, spec: SceneSpec, seed: int) -> np.ndarray:
    _, h, w = img.shape
    if spec.blur_sigma > 0:
        rad = min(int(np.ceil(3 * spec.blur_sigma)), (min(h, w) - 1) // 2)
        img = raster.convolve2d(img, raster.gaussian_kernel(spec.blur_sigma, rad))
    if spec.perturbation > 0:
        rng = rng_for(seed, "perturbation")
        gain = 1.0 + spec.perturbation * rng.uniform(-1, 1, size=(3, 1, 1))
        img = img * gain + spec.perturbation * _smooth_field(rng, h, w, 6.0)[None]
    if spec.noise_sigma > 0:
        rng = rng_for(seed, "noise")
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# corpus generation


DEFAULT_COUNT_WEIGHTS = {1: 0.21, 2: 0.79 / 3, 3: 0.79 / 3, 4: 0.79 / 3}


def quota(weights: dict, n: int) -> list:
    """Largest-remainder allocation of ``n`` items over weighted keys."""
    keys = list(weights)
    wts = np.array([float(weights[k]) for k in keys])
    if n == 0:
        return []
    exact = wts / wts.sum() * n
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return [k for k, c in zip(keys, counts) for _ in range(c)]


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 64
    count_weights: dict = field(default_factory=lambda: dict(DEFAULT_COUNT_WEIGHTS))
    backgrounds: tuple = BACKGROUNDS
    shapes: tuple = ("box_panels", "cylinder_dish", "cross", "blob")
    scale_range: tuple = (6.0, 13.0)  # m
    camera_scale_range: tuple = (0.45, 0.6)  # m/px
    blur_range: tuple = (0.0, 0.8)
    noise_range: tuple = (0.0, 0.03)
    perturbation_range: tuple = (0.0, 0.05)
    min_visible_px: int = 20
    max_tries: int = 200

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "count_weights" in d:
            d["count_weights"] = {int(k): float(v) for k, v in d["count_weights"].items()}
        for key in ("backgrounds", "shapes", "scale_range", "camera_scale_range",
                    "blur_range", "noise_range", "perturbation_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def sample_scene(seed: int, n_targets: int, background: str, cfg: GeneratorConfig) -> SceneSpec:
    """Draw a valid scene: every target visible with at least ``min_visible_px`` pixels.

    Targets follow drift-free natural fly-around orbits (vy0 = -2 n x0) sampled
    at a random epoch.
    """
    rng = rng_for(seed, "scene")
    cw = CWParams()
    n = cw.n
    period = 2 * np.pi / n
    for _ in range(cfg.max_tries):
        cam = rng.uniform(*cfg.camera_scale_range)
        ext_x = 0.28 * cfg.height * cam
        ext_y = 0.18 * cfg.width * cam
        targets = []
        for _k in range(n_targets):
            x0 = rng.uniform(-ext_x, ext_x)
            vx0 = n * rng.uniform(-ext_x, ext_x) * 0.3
            y0 = rng.uniform(-ext_y, ext_y)
            z0 = rng.uniform(-20.0, 20.0)
            vz0 = n * rng.uniform(-5.0, 5.0)
            state = CWState(x0, y0, z0, vx0, -2.0 * n * x0, vz0)
            targets.append(
                Target(
                    shape=str(rng.choice(cfg.shapes)),
                    scale=float(rng.uniform(*cfg.scale_range)),
                    state=state,
                    rotation=float(rng.uniform(-np.pi, np.pi)),
                    variant=int(rng.integers(0, 2**31)),
                )
            )
        spec = SceneSpec(
            height=cfg.height,
            width=cfg.width,
            background=background,
            targets=tuple(targets),
            camera_scale=float(cam),
            time=float(rng.uniform(0.0, period)),
            cw=cw,
            blur_sigma=float(rng.uniform(*cfg.blur_range)),
            noise_sigma=float(rng.uniform(*cfg.noise_range)),
            perturbation=float(rng.uniform(*cfg.perturbation_range)),
        )
        try:
            _, mask = render_scene(spec, seed)
        except PlacementError:
            continue
        areas = np.bincount(mask.ravel(), minlength=n_targets + 1)[1:]
        if mask.max() == n_targets and areas.min() >= cfg.min_visible_px:
            return spec
    raise RuntimeError(f"could not place {n_targets} targets after {cfg.max_tries} tries")


def generate_corpus(out_dir: str | os.PathLike, n_frames: int, seed: int,
                    cfg: GeneratorConfig | None = None) -> list[dict]:
    """Write frame_%05d.ppm, frame_%05d_mask.pgm and manifest.json; return the manifest."""
    cfg = cfg or GeneratorConfig()
    os.makedirs(out_dir, exist_ok=True)
    plan_rng = rng_for(seed, "plan")
    counts = quota(cfg.count_weights, n_frames)
    backgrounds = quota({b: 1.0 for b in cfg.backgrounds}, n_frames)
    counts = [counts[i] for i in plan_rng.permutation(n_frames)]
    backgrounds = [backgrounds[i] for i in plan_rng.permutation(n_frames)]
    manifest = []
    for i in range(n_frames):
        scene_seed = seed + i
        spec = sample_scene(scene_seed, int(counts[i]), backgrounds[i], cfg)
        img, mask = render_scene(spec, scene_seed)
        frame, mask_name = f"frame_{i:05d}.ppm", f"frame_{i:05d}_mask.pgm"
        raster.write_raster(img, os.path.join(out_dir, frame), "rgb8")
        raster.write_raster(mask, os.path.join(out_dir, mask_name), "label16")
        manifest.append({"frame": frame, "mask": mask_name, "seed": scene_seed, "spec": spec.to_dict()})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest
