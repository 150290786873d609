"""Raster substrate: netpbm I/O, bilinear/nearest resampling, 2-D convolution.

Conventions used throughout the package:

* an image ``Raster`` is a float64 array of shape ``(C, H, W)``;
* a ``LabelMap`` is an integer array of shape ``(H, W)`` with 0 = background;
* a ``Kernel2D`` is a square float array with odd side.

Border handling is half-sample symmetric reflection (``d c b a | a b c d``)
everywhere, which is what scipy.ndimage calls ``reflect``.
"""

from __future__ import annotations

import os
from typing import Literal

import numpy as np

Kind = Literal["gray8", "rgb8", "label16"]

_MAGIC = {"gray8": b"P5", "rgb8": b"P6", "label16": b"P5"}
_MAXVAL = {"gray8": 255, "rgb8": 255, "label16": 65535}


class RasterFormatError(ValueError):
    """Malformed or unsupported netpbm content."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class LabelOverflowError(ValueError):
    pass


# --------------------------------------------------------------------------
# file I/O


def _read_token(buf: bytes, pos: int, field: str) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RasterFormatError(field, "missing header field")
    return buf[start:pos], pos


def _parse_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    if len(buf) < 2:
        raise RasterFormatError("magic", "file too short")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise RasterFormatError("magic", f"unsupported magic {magic!r}")
    pos = 2
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise RasterFormatError("magic", "magic must be followed by whitespace")
    vals = []
    for field in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos, field)
        if not tok.isdigit():
            raise RasterFormatError(field, f"not a decimal integer: {tok!r}")
        vals.append(int(tok))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise RasterFormatError("maxval", "header must end with a single whitespace byte")
    width, height, maxval = vals
    if width < 1:
        raise RasterFormatError("width", "must be positive")
    if height < 1:
        raise RasterFormatError("height", "must be positive")
    return magic, width, height, maxval, pos + 1


def read_raster(path: str | os.PathLike, kind: Kind) -> np.ndarray:
    """Read a binary PGM/PPM file.

    ``gray8`` and ``rgb8`` return a float64 Raster scaled to [0, 1];
    ``label16`` returns an int64 LabelMap with labels preserved exactly.
    """
    if kind not in _MAGIC:
        raise ValueError(f"unknown raster kind {kind!r}")
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, width, height, maxval, offset = _parse_header(buf)
    if magic != _MAGIC[kind]:
        raise RasterFormatError("magic", f"{kind} expects {_MAGIC[kind]!r}, found {magic!r}")
    if maxval != _MAXVAL[kind]:
        raise RasterFormatError("maxval", f"{kind} expects maxval {_MAXVAL[kind]}, found {maxval}")
    channels = 3 if kind == "rgb8" else 1
    nbytes = 2 if kind == "label16" else 1
    need = width * height * channels * nbytes
    payload = buf[offset:]
    if len(payload) < need:
        raise RasterFormatError("payload", f"truncated: expected {need} bytes, found {len(payload)}")
    if kind == "label16":
        data = np.frombuffer(payload[:need], dtype=">u2").reshape(height, width)
        return data.astype(np.int64)
    data = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, channels)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_raster(r: np.ndarray, path: str | os.PathLike, kind: Kind) -> None:
    """Write a Raster or LabelMap as binary PGM/PPM."""
    r = np.asarray(r)
    if kind == "label16":
        if r.ndim != 2:
            raise ValueError("label16 expects an (H, W) label map")
        if r.size and (r.min() < 0 or r.max() >= 65536):
            raise LabelOverflowError(f"label values must lie in [0, 65535], found max {r.max()}")
        h, w = r.shape
        payload = r.astype(">u2").tobytes()
    elif kind in ("gray8", "rgb8"):
        channels = 1 if kind == "gray8" else 3
        if r.ndim != 3 or r.shape[0] != channels:
            raise ValueError(f"{kind} expects a ({channels}, H, W) raster, got shape {r.shape}")
        if np.any(~np.isfinite(r)) or r.min() < 0.0 or r.max() > 1.0:
            raise ValueError("image samples must lie in [0, 1]")
        _, h, w = r.shape
        q = np.rint(r * 255.0).astype(np.uint8)
        payload = q.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"unknown raster kind {kind!r}")
    header = b"%s\n%d %d\n%d\n" % (_MAGIC[kind], w, h, _MAXVAL[kind])
    with open(path, "wb") as fh:
        fh.write(header + payload)


# --------------------------------------------------------------------------
# index helpers shared with the network layers


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map integer indices into [0, n) by half-sample symmetric reflection."""
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


def pad_matrix(n: int, before: int, after: int) -> np.ndarray:
    """0/1 matrix P of shape (n + before + after, n) with ``P @ x`` = reflect-padded x."""
    src = reflect_index(np.arange(-before, n + after), n)
    p = np.zeros((n + before + after, n))
    p[np.arange(src.size), src] = 1.0
    return p


def resample_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, align-corners-false."""
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor((rows + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)
        m[rows, src] = 1.0
        return m
    if mode != "bilinear":
        raise ValueError(f"unknown resampling mode {mode!r}")
    src = (rows + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    np.add.at(m, (rows, reflect_index(i0, n_in)), 1.0 - frac)
    np.add.at(m, (rows, reflect_index(i0 + 1, n_in)), frac)
    return m


# --------------------------------------------------------------------------
# resampling and convolution


def resample(r: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize every channel of a (C, H, W) raster to (C, out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    r = np.asarray(r, dtype=np.float64)
    _, h, w = r.shape
    if (h, w) == (out_h, out_w):
        return r.copy()
    mh = resample_matrix(h, out_h, mode)
    mw = resample_matrix(w, out_w, mode)
    return np.einsum("oh,chw,pw->cop", mh, r, mw)


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized isotropic Gaussian kernel, radius ceil(3 sigma) by default."""
    if sigma <= 0:
        return np.ones((1, 1))
    if radius is None:
        radius = int(np.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2)) / (2.0 * np.pi * sigma**2)
    return k / k.sum()


def convolve2d(r: np.ndarray, k: np.ndarray, border: str = "reflect") -> np.ndarray:
    """True 2-D convolution of each channel with ``k`` (kernel flipped)."""
    if border != "reflect":
        raise ValueError("only reflect borders are supported")
    r = np.asarray(r, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    size = k.shape[0]
    if k.ndim != 2 or k.shape[1] != size or size % 2 == 0:
        raise ValueError("kernel must be square with odd side")
    _, h, w = r.shape
    if size > min(h, w):
        raise ValueError(f"kernel size {size} exceeds image size {h}x{w}")
    rad = size // 2
    rows = reflect_index(np.arange(-rad, h + rad), h)
    cols = reflect_index(np.arange(-rad, w + rad), w)
    padded = r[:, rows][:, :, cols]
    out = np.zeros_like(r)
    for i in range(size):
        for j in range(size):
            wgt = k[size - 1 - i, size - 1 - j]
            if wgt != 0.0:
                out += wgt * padded[:, i : i + h, j : j + w]
    return out
