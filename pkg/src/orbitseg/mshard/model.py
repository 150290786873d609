"""Toy multi-scale hierarchical attention refinement decoder.

Data flow for a batch of images ``(B, 3, H, W)``::

    encoder:  5 strided 3x3 convs + tanh -> X1..X4 at strides 4, 8, 16, 32
    prompts:  polarity embedding added at the nearest level-2 token
    level l:  F_l = refine_l(X_l) + attend_l(X_l)
    fusion:   G4 = F4,  G_l = F_l + omega_l * U(P_l G_{l+1})   (l = 3, 2, 1)
    upscale:  S = tanh(P_u U(G1) + P_s X0 + b_s) at stride 2, where X0 is the stem output
    heads:    mask logits = (static + hypernetwork weights) . S, upsampled x2;
              per-level auxiliary logits from G2..G4; IoU and confidence
              scores from pooled G4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

CHANNELS = (8, 16, 32, 64)
LEVELS = (1, 2, 3, 4)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = CHANNELS
    d_k: int = 16
    hidden: int = 64
    pos_scale: float = 1.0
    upscale: int = 16  # channels of the stride-2 upscaling stage
    stem: int = 16  # channels of the first (stride-2) encoder conv
    frozen: tuple = ()  # parameter names held fixed during training

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("channels", "frozen"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


ABLATION_FROZEN = tuple(f"attn.{l}.gamma" for l in LEVELS) + tuple(f"fuse.{l}.omega" for l in (1, 2, 3))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    ch = cfg.channels
    p: dict[str, np.ndarray] = {}

    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    enc_io = [(3, cfg.stem), (cfg.stem, ch[0]), (ch[0], ch[1]), (ch[1], ch[2]), (ch[2], ch[3])]
    for i, (ci, co) in enumerate(enc_io):
        p[f"enc.{i}.w"] = normal((co, ci, 3, 3), ci * 9)
        p[f"enc.{i}.b"] = np.zeros(co)
    for l, c in zip(LEVELS, ch):
        p[f"attn.{l}.wq"] = normal((c, cfg.d_k), c)
        p[f"attn.{l}.wk"] = normal((c, cfg.d_k), c)
        p[f"attn.{l}.wv"] = normal((c, c), c)
        p[f"attn.{l}.gamma"] = np.zeros(1)
        p[f"ref.{l}.w3"] = normal((c, c, 3, 3), c * 9) * 0.5
        p[f"ref.{l}.b3"] = np.zeros(c)
        p[f"ref.{l}.w5"] = normal((c, c, 5, 5), c * 25) * 0.5
        p[f"ref.{l}.b5"] = np.zeros(c)
    for l in (1, 2, 3):
        p[f"fuse.{l}.omega"] = np.ones(1)
        p[f"fuse.{l}.proj"] = np.zeros((ch[l - 1], ch[l]))  # fusion starts as a no-op
    p["prompt.embed"] = rng.normal(0.0, 0.1, size=(2, ch[1]))
    p["head.up.proj"] = normal((cfg.upscale, ch[0]), ch[0])
    p["head.skip.proj"] = normal((cfg.upscale, cfg.stem), cfg.stem)
    p["head.skip.b"] = np.zeros(cfg.upscale)
    p["head.mask.w"] = normal((cfg.upscale,), cfg.upscale)
    p["head.mask.b"] = np.array([-2.0])
    for l in (2, 3, 4):
        p[f"head.aux.{l}.w"] = normal((ch[l - 1],), ch[l - 1])
        p[f"head.aux.{l}.b"] = np.array([-2.0])
    outs = {"hyper": cfg.upscale, "iou": 1, "conf": 1}
    for name, n_out in outs.items():
        p[f"head.{name}.w1"] = normal((ch[3], cfg.hidden), ch[3])
        p[f"head.{name}.b1"] = np.zeros(cfg.hidden)
        p[f"head.{name}.w2"] = normal((cfg.hidden, n_out), cfg.hidden) * 0.1
        p[f"head.{name}.b2"] = np.zeros(n_out)
    for name in cfg.frozen:
        p[name] = np.zeros_like(p[name])
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


# --------------------------------------------------------------------------
# parameter groups exposed as standalone operations


@dataclass
class AttentionBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    gamma: np.ndarray
    windowed: bool = False
    pos: np.ndarray | None = None  # (C, H, W) positional code added to Q/K inputs

    @property
    def d_k(self) -> int:
        return self.wq.shape[1]


@dataclass
class RefineBlock:
    w3: np.ndarray
    b3: np.ndarray
    w5: np.ndarray
    b5: np.ndarray


@dataclass
class CrossScaleFusion:
    omegas: list  # omega_1..omega_3, each shape (1,)
    projections: list  # P_1..P_3, shape (C_l, C_{l+1})


@dataclass(frozen=True)
class PromptSet:
    points: tuple  # (x, y, polarity) with polarity 1 = foreground, 0 = background

    def __post_init__(self):
        if not any(p[2] == 1 for p in self.points):
            raise ValueError("a prompt set needs at least one foreground point")


@dataclass
class DecoderOutput:
    logits: np.ndarray  # (1, H, W)
    iou: float
    confidence: float
    aux_logits: list = field(default_factory=list)


def attend(f: np.ndarray, blk: AttentionBlock) -> np.ndarray:
    pe = np.zeros_like(f) if blk.pos is None else blk.pos
    out, _ = L.attention_forward(f[None], blk.wq, blk.wk, blk.wv, blk.gamma, pe, blk.windowed)
    return out[0]


def attention_weights(f: np.ndarray, blk: AttentionBlock) -> np.ndarray:
    pe = np.zeros_like(f) if blk.pos is None else blk.pos
    _, cache = L.attention_forward(f[None], blk.wq, blk.wk, blk.wv, blk.gamma, pe, blk.windowed)
    return cache[8]


def refine(f: np.ndarray, blk: RefineBlock) -> np.ndarray:
    r3, _ = L.conv_forward(f[None], blk.w3, blk.b3)
    r5, _ = L.conv_forward(f[None], blk.w5, blk.b5)
    return (r3 + r5)[0]


def fuse_forward(levels: list, omegas: list, projections: list):
    """Batched top-down fusion; returns G1..G4 and the upsampled terms."""
    g = [None, None, None, levels[3]]
    ups = [None, None, None]
    for i in (2, 1, 0):
        proj = L.pointwise_forward(g[i + 1], projections[i])
        ups[i] = L.resize(proj, levels[i].shape[2], levels[i].shape[3])
        g[i] = levels[i] + omegas[i][0] * ups[i]
    return g, ups


def fuse_backward(g: list, ups: list, omegas: list, projections: list, dg: list):
    """Adjoint of ``fuse_forward``; ``dg`` holds gradients w.r.t. G1..G4.

    Returns gradients w.r.t. the input levels, the omegas and the projections.
    """
    dg = list(dg)
    d_omega, d_proj = [None] * 3, [None] * 3
    for i in (0, 1, 2):
        d_omega[i] = np.array([np.sum(dg[i] * ups[i])], dtype=dg[i].dtype)
        d_up = L.resize_backward(omegas[i][0] * dg[i], g[i + 1].shape[2], g[i + 1].shape[3])
        dgi, d_proj[i] = L.pointwise_backward(g[i + 1], projections[i], d_up)
        dg[i + 1] = dg[i + 1] + dgi
    return dg, d_omega, d_proj


def fuse_levels(pyr: list, fusion: CrossScaleFusion) -> list:
    """Top-down: G4 = F4, G_l = F_l + omega_l * U(P_l G_{l+1})."""
    if len(pyr) != 4:
        raise ShapeError("fusion needs exactly 4 levels")
    g, _ = fuse_forward([np.asarray(x)[None] for x in pyr], fusion.omegas, fusion.projections)
    return [x[0] for x in g]


def sample_prompts(gt_mask: np.ndarray, target: int | None, n_fg: int, n_bg: int,
                   rng: np.random.Generator) -> PromptSet:
    """Uniform draws (with replacement) from the target's pixels and from background.

    ``target=None`` draws foreground points from any nonzero label.
    """
    gt_mask = np.asarray(gt_mask)
    fg = gt_mask != 0 if target is None else gt_mask == target
    fr, fc = np.nonzero(fg)
    if fr.size == 0:
        raise ValueError(f"target {target} has no pixels")
    pts = []
    for i in rng.integers(0, fr.size, size=n_fg):
        pts.append((int(fc[i]), int(fr[i]), 1))
    if n_bg:
        br, bc = np.nonzero(gt_mask == 0)
        if br.size:
            for i in rng.integers(0, br.size, size=n_bg):
                pts.append((int(bc[i]), int(br[i]), 0))
    return PromptSet(tuple(pts))


# --------------------------------------------------------------------------
# the network


class MSHARD:
    def __init__(self, cfg: ModelConfig = ModelConfig(), params: dict | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        self._pe: dict = {}

    @property
    def dtype(self):
        return self.params["enc.0.w"].dtype

    def _posenc(self, l: int, h: int, w: int) -> np.ndarray:
        key = (l, h, w, self.dtype.str, self.cfg.pos_scale)
        if key not in self._pe:
            c = self.cfg.channels[l - 1]
            self._pe[key] = (self.cfg.pos_scale * L.positional_encoding(h, w, c)).astype(self.dtype)
        return self._pe[key]

    # blocks as standalone objects -------------------------------------------------

    def attention_block(self, l: int, h: int, w: int) -> AttentionBlock:
        p = self.params
        return AttentionBlock(p[f"attn.{l}.wq"], p[f"attn.{l}.wk"], p[f"attn.{l}.wv"],
                              p[f"attn.{l}.gamma"], windowed=l <= 2, pos=self._posenc(l, h, w))

    def refine_block(self, l: int) -> RefineBlock:
        p = self.params
        return RefineBlock(p[f"ref.{l}.w3"], p[f"ref.{l}.b3"], p[f"ref.{l}.w5"], p[f"ref.{l}.b5"])

    def fusion(self) -> CrossScaleFusion:
        p = self.params
        return CrossScaleFusion([p[f"fuse.{l}.omega"] for l in (1, 2, 3)],
                                [p[f"fuse.{l}.proj"] for l in (1, 2, 3)])

    # single-sample API ----------------------------------------------------------

    def encode(self, img: np.ndarray) -> list:
        out, _ = self._encode(np.asarray(img, dtype=self.dtype)[None])
        return [x[0] for x in out]

    def decode(self, pyr: list, prompts: PromptSet | None = None,
               stem: np.ndarray | None = None) -> DecoderOutput:
        """Decode one pyramid; ``stem`` is the stride-2 stem output (omitted -> no skip term)."""
        feats = [np.asarray(x, dtype=self.dtype)[None] for x in pyr]
        if stem is not None:
            stem = np.asarray(stem, dtype=self.dtype)[None]
        out, _ = self._decode(feats, [prompts], stem)
        return DecoderOutput(out["logits"][0][None], float(out["iou"][0]), float(out["conf"][0]),
                             [a[0] for a in out["aux"]])

    def predict(self, img: np.ndarray, prompts: PromptSet | None = None) -> DecoderOutput:
        feats, caches = self._encode(np.asarray(img, dtype=self.dtype)[None])
        return self.decode([x[0] for x in feats], prompts, caches[0][1][0])

    # batched forward / backward ------------------------------------------------------

    def _encode(self, img: np.ndarray):
        _, _, h, w = img.shape
        if h % 32 or w % 32:
            raise ShapeError(f"image dims {h}x{w} must be divisible by 32")
        p = self.params
        caches = []
        feats = []
        x = img - 0.5  # inputs live in [0, 1]; centre them for the odd nonlinearity
        for i in range(5):
            z, c = L.conv_forward(x, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride=2)
            x = np.tanh(z)
            caches.append((c, x))
            if i >= 1:
                feats.append(x)
        return feats, caches

    def forward(self, img: np.ndarray, prompts: list | None = None):
        img = np.asarray(img, dtype=self.dtype)
        feats, enc_cache = self._encode(img)
        out, cache = self._decode(feats, prompts or [None] * img.shape[0], enc_cache[0][1])
        cache["enc"] = enc_cache
        cache["img_shape"] = img.shape
        return out, cache

    def _decode(self, feats: list, prompts: list, stem: np.ndarray | None = None):
        p = self.params
        feats = list(feats)
        sites = []
        if any(ps is not None for ps in prompts):
            x2 = feats[1].copy()
            stride = 8
            for b, ps in enumerate(prompts):
                if ps is None:
                    continue
                for x, y, pol in ps.points:
                    r = min(y // stride, x2.shape[2] - 1)
                    c = min(x // stride, x2.shape[3] - 1)
                    x2[b, :, r, c] += p["prompt.embed"][pol]
                    sites.append((b, pol, r, c))
            feats[1] = x2

        level_f, level_cache = [], []
        for l, x in zip(LEVELS, feats):
            h, w = x.shape[2], x.shape[3]
            a, ca = L.attention_forward(x, p[f"attn.{l}.wq"], p[f"attn.{l}.wk"], p[f"attn.{l}.wv"],
                                        p[f"attn.{l}.gamma"], self._posenc(l, h, w), l <= 2)
            r3, c3 = L.conv_forward(x, p[f"ref.{l}.w3"], p[f"ref.{l}.b3"])
            r5, c5 = L.conv_forward(x, p[f"ref.{l}.w5"], p[f"ref.{l}.b5"])
            level_f.append(r3 + r5 + a)
            level_cache.append((ca, c3, c5))

        fusion = self.fusion()
        g, fuse_cache = fuse_forward(level_f, fusion.omegas, fusion.projections)

        pooled = g[3].mean(axis=(2, 3))
        hyper, c_hyper = L.mlp_forward(pooled, p["head.hyper.w1"], p["head.hyper.b1"],
                                       p["head.hyper.w2"], p["head.hyper.b2"])
        w_eff = p["head.mask.w"][None] + hyper
        h1, w1 = g[0].shape[2], g[0].shape[3]
        g_up = L.resize(g[0], 2 * h1, 2 * w1)
        pre = L.pointwise_forward(g_up, p["head.up.proj"]) + p["head.skip.b"][None, :, None, None]
        if stem is not None:
            pre = pre + L.pointwise_forward(stem, p["head.skip.proj"])
        up = np.tanh(pre)
        low = np.einsum("bc,bchw->bhw", w_eff, up, optimize=True) + p["head.mask.b"][0]
        logits = L.resize(low, 4 * h1, 4 * w1)
        aux = []
        for l in (2, 3, 4):
            aux.append(np.einsum("c,bchw->bhw", p[f"head.aux.{l}.w"], g[l - 1], optimize=True)
                       + p[f"head.aux.{l}.b"][0])
        scores = {}
        score_cache = {}
        for name in ("iou", "conf"):
            z, cz = L.mlp_forward(pooled, p[f"head.{name}.w1"], p[f"head.{name}.b1"],
                                  p[f"head.{name}.w2"], p[f"head.{name}.b2"])
            scores[name] = 0.5 * (1.0 + np.tanh(0.5 * z[:, 0]))
            score_cache[name] = cz
        out = {"logits": logits, "aux": aux, "iou": scores["iou"], "conf": scores["conf"]}
        cache = {"feats": feats, "sites": sites, "levels": level_cache, "g": g, "fuse": fuse_cache,
                 "pooled": pooled, "hyper": c_hyper, "w_eff": w_eff, "up": up, "g_up": g_up, "stem": stem,
                 "scores": score_cache, "out": out}
        return out, cache

    def backward(self, cache: dict, d_logits: np.ndarray, d_aux: list | None = None,
                 d_iou: np.ndarray | None = None, d_conf: np.ndarray | None = None):
        """Gradients of sum(d_out * out) for every parameter and the input image."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g = cache["g"]
        out = cache["out"]
        dt = self.dtype
        up = cache["up"]
        dg = [np.zeros_like(x) for x in g]

        d_low = L.resize_backward(np.asarray(d_logits, dtype=dt), up.shape[2], up.shape[3])
        w_eff = cache["w_eff"]
        d_pre = w_eff[:, :, None, None] * d_low[:, None] * (1.0 - up * up)
        dw_eff = np.einsum("bhw,bchw->bc", d_low, up, optimize=True)
        grads["head.skip.b"] += d_pre.sum(axis=(0, 2, 3))
        d_stem = None
        if cache["stem"] is not None:
            d_stem, dproj = L.pointwise_backward(cache["stem"], p["head.skip.proj"], d_pre)
            grads["head.skip.proj"] += dproj
        d_gup, dproj = L.pointwise_backward(cache["g_up"], p["head.up.proj"], d_pre)
        grads["head.up.proj"] += dproj
        dg[0] += L.resize_backward(d_gup, g[0].shape[2], g[0].shape[3])
        grads["head.mask.w"] += dw_eff.sum(axis=0)
        grads["head.mask.b"] += d_low.sum()

        for i, l in enumerate((2, 3, 4)):
            if d_aux is None or d_aux[i] is None:
                continue
            da = np.asarray(d_aux[i], dtype=dt)
            dg[l - 1] += p[f"head.aux.{l}.w"][None, :, None, None] * da[:, None]
            grads[f"head.aux.{l}.w"] += np.einsum("bhw,bchw->c", da, g[l - 1], optimize=True)
            grads[f"head.aux.{l}.b"] += da.sum()

        d_pooled = np.zeros_like(cache["pooled"])
        for name, d in (("iou", d_iou), ("conf", d_conf)):
            if d is None:
                continue
            s = out[name]
            dz = (np.asarray(d, dtype=dt) * s * (1.0 - s))[:, None]
            dx, dw1, db1, dw2, db2 = L.mlp_backward(cache["scores"][name], dz)
            d_pooled += dx
            grads[f"head.{name}.w1"] += dw1
            grads[f"head.{name}.b1"] += db1
            grads[f"head.{name}.w2"] += dw2
            grads[f"head.{name}.b2"] += db2
        dx, dw1, db1, dw2, db2 = L.mlp_backward(cache["hyper"], dw_eff)
        d_pooled += dx
        grads["head.hyper.w1"] += dw1
        grads["head.hyper.b1"] += db1
        grads["head.hyper.w2"] += dw2
        grads["head.hyper.b2"] += db2
        h4, w4 = g[3].shape[2], g[3].shape[3]
        dg[3] += d_pooled[:, :, None, None] / (h4 * w4)

        fusion = self.fusion()
        dg, d_omega, d_proj = fuse_backward(g, cache["fuse"], fusion.omegas, fusion.projections, dg)
        for i, l in enumerate((1, 2, 3)):
            grads[f"fuse.{l}.omega"] += d_omega[i]
            grads[f"fuse.{l}.proj"] += d_proj[i]

        d_feats = []
        for i, l in enumerate(LEVELS):
            ca, c3, c5 = cache["levels"][i]
            dx_a, dwq, dwk, dwv, dgamma, _ = L.attention_backward(ca, dg[i])
            dx_3, dw3, db3 = L.conv_backward(c3, dg[i])
            dx_5, dw5, db5 = L.conv_backward(c5, dg[i])
            grads[f"attn.{l}.wq"] += dwq
            grads[f"attn.{l}.wk"] += dwk
            grads[f"attn.{l}.wv"] += dwv
            grads[f"attn.{l}.gamma"] += dgamma
            grads[f"ref.{l}.w3"] += dw3
            grads[f"ref.{l}.b3"] += db3
            grads[f"ref.{l}.w5"] += dw5
            grads[f"ref.{l}.b5"] += db5
            d_feats.append(dx_a + dx_3 + dx_5)

        for b, pol, r, c in cache["sites"]:
            grads["prompt.embed"][pol] += d_feats[1][b, :, r, c]

        d_img = None
        if "enc" in cache:
            dh = None
            for i in range(4, -1, -1):
                c, x = cache["enc"][i]
                if i >= 1:
                    dh = d_feats[i - 1] if dh is None else dh + d_feats[i - 1]
                elif d_stem is not None:
                    dh = dh + d_stem
                dz = dh * (1.0 - x * x)
                dx, dw, db = L.conv_backward(c, dz)
                grads[f"enc.{i}.w"] += dw
                grads[f"enc.{i}.b"] += db
                dh = dx
            d_img = dh
        grads = {k: np.asarray(v, dtype=dt) for k, v in grads.items()}
        return grads, d_img
