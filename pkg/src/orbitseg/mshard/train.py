"""Training loop, AdamW, checkpoints and batch prediction for the toy decoder."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import lossmetrics as lm
from .. import raster, sdat
from ..seeding import rng_for
from .model import ABLATION_FROZEN, MSHARD, ModelConfig, sample_prompts

log = logging.getLogger(__name__)

CKPT_MAGIC = b"OSEGCKPT"
CKPT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration and data


@dataclass
class TrainConfig:
    train_manifest: str = ""
    val_manifest: str | None = None
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 0.01
    n_fg: int = 1
    n_bg: int = 1
    prompt_prob: float = 0.5
    mshard: bool = True  # False freezes every gamma and omega at zero
    sdat: bool | str | dict = True  # True = default pipeline, path or inline dict
    model: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | None = None) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            lw = d.pop("loss_weights")
            d.setdefault("lambda1", lw.get("lambda1", 1.0))
            d.setdefault("lambda2", lw.get("lambda2", 0.01))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        cfg = cls(**d)
        if base_dir:
            for key in ("train_manifest", "val_manifest"):
                v = getattr(cfg, key)
                if v and not os.path.isabs(v):
                    setattr(cfg, key, os.path.join(base_dir, v))
            if isinstance(cfg.sdat, str) and not os.path.isabs(cfg.sdat):
                cfg.sdat = os.path.join(base_dir, cfg.sdat)
        return cfg

    def model_config(self) -> ModelConfig:
        mc = ModelConfig.from_dict(self.model)
        if not self.mshard:
            mc = ModelConfig(**{**asdict(mc), "frozen": tuple(sorted(set(mc.frozen) | set(ABLATION_FROZEN)))})
        return mc

    def pipeline(self) -> sdat.Pipeline | None:
        if self.sdat is False or self.sdat is None:
            return None
        if self.sdat is True:
            return sdat.Pipeline(sdat.DEFAULT_PIPELINE.steps, self.seed)
        if isinstance(self.sdat, str):
            return sdat.Pipeline.load(self.sdat)
        return sdat.Pipeline.from_dict(self.sdat)


def load_manifest(path: str) -> tuple[list[dict], str]:
    try:
        with open(path) as fh:
            return json.load(fh), os.path.dirname(os.path.abspath(path))
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc


def load_corpus(manifest_path: str, dtype=np.float32) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    records, root = load_manifest(manifest_path)
    imgs, masks = [], []
    for rec in records:
        for key in ("frame", "mask"):
            path = os.path.join(root, rec[key])
            if not os.path.isfile(path):
                raise OSError(f"unreadable {key}: {path}")
        imgs.append(raster.read_raster(os.path.join(root, rec["frame"]), "rgb8"))
        masks.append(raster.read_raster(os.path.join(root, rec["mask"]), "label16"))
    return np.asarray(imgs, dtype=dtype), np.asarray(masks), records


# --------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay on weight matrices/kernels."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.0, frozen=()):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for k, p in params.items():
            if k in self.frozen:
                continue
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd and p.ndim >= 2:
                update = update + self.wd * p
            p -= (self.lr * update).astype(p.dtype)


# --------------------------------------------------------------------------
# loss on a batch


def batch_loss(out: dict, gt: np.ndarray, lambda1: float, lambda2: float):
    """Mean over the batch of the composite loss and its output gradients."""
    logits = out["logits"].astype(np.float64)
    bsz = logits.shape[0]
    y = (gt != 0).astype(np.float64)
    probs = lm.sigmoid(logits)
    d_logits = np.zeros_like(logits)
    d_aux = [np.zeros(a.shape) for a in out["aux"]]
    d_iou = np.zeros(bsz)
    parts = np.zeros(3)
    for b in range(bsz):
        l_seg = lm.seg_loss(probs[b], y[b])
        l_iou = lm.iou_loss(float(out["iou"][b]), probs[b], y[b])
        scales = [logits[b]] + [a[b].astype(np.float64) for a in out["aux"]]
        l_stab = lm.stability_loss(scales)
        parts += (l_seg, l_iou, l_stab)
        d_logits[b] = lm.seg_loss_grad_logits(logits[b], y[b]) / bsz
        sg = lm.stability_loss_grad(scales)
        d_logits[b] += lambda2 * sg[0] / bsz
        for i in range(len(d_aux)):
            d_aux[i][b] = lambda2 * sg[i + 1] / bsz
        d_iou[b] = lambda1 * lm.iou_loss_grad(float(out["iou"][b]), probs[b], y[b]) / bsz
    parts /= bsz
    report = lm.total_loss(tuple(parts), lm.LossWeights(lambda1, lambda2))
    return report, d_logits, d_aux, d_iou


def train_step(model: MSHARD, opt: AdamW, imgs: np.ndarray, masks: np.ndarray, prompts: list,
               cfg: TrainConfig) -> lm.LossReport:
    out, cache = model.forward(imgs, prompts)
    report, d_logits, d_aux, d_iou = batch_loss(out, masks, cfg.lambda1, cfg.lambda2)
    grads, _ = model.backward(cache, d_logits, d_aux, d_iou, None)
    opt.step(model.params, grads)
    return report


def evaluate_model(model: MSHARD, imgs: np.ndarray, masks: np.ndarray, batch: int = 16) -> lm.EvalReport:
    cm = np.zeros((2, 2), dtype=np.int64)
    for i in range(0, len(imgs), batch):
        out, _ = model.forward(imgs[i : i + batch])
        for b in range(out["logits"].shape[0]):
            cm += lm.confusion(out["logits"][b] > 0, masks[i + b])
    return lm.report_from_confusion(cm)


# --------------------------------------------------------------------------
# training


def _epoch_items(cfg: TrainConfig, epoch: int, imgs, masks, pipeline):
    n = len(imgs)
    order = rng_for(cfg.seed, "order", epoch).permutation(n)
    for start in range(0, n, cfg.batch):
        idx = order[start : start + cfg.batch]
        bi, bm, prompts = [], [], []
        for j in idx:
            img, mask = imgs[j], masks[j]
            if pipeline is not None:
                img, mask = sdat.run_pipeline(pipeline, img, mask, item=epoch * n + int(j))
            prng = rng_for(cfg.seed, "prompt", epoch, int(j))
            if (mask != 0).any() and prng.random() < cfg.prompt_prob:
                prompts.append(sample_prompts(mask, None, cfg.n_fg, cfg.n_bg, prng))
            else:
                prompts.append(None)
            bi.append(img)
            bm.append(mask)
        yield np.asarray(bi, dtype=imgs.dtype), np.asarray(bm), prompts


def train(cfg: TrainConfig, out_dir: str | None = None, resume: str | None = None,
          data: tuple | None = None) -> tuple[MSHARD, list[dict]]:
    """Train from scratch (or from ``resume``); returns the model and the per-epoch log.

    With ``out_dir`` set, writes ``checkpoint.bin`` and ``train_log.json`` there.
    ``data`` may carry preloaded ``(train_imgs, train_masks, val_imgs, val_masks)``.
    """
    if data is None:
        imgs, masks, _ = load_corpus(cfg.train_manifest)
        if cfg.val_manifest:
            vimgs, vmasks, _ = load_corpus(cfg.val_manifest)
        else:
            vimgs, vmasks = imgs[:0], masks[:0]
    else:
        imgs, masks, vimgs, vmasks = data
    mcfg = cfg.model_config()
    model = MSHARD(mcfg, seed=cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay, mcfg.frozen)
    start_epoch = 0
    history: list[dict] = []
    if resume:
        state = load_checkpoint(resume)
        model = MSHARD(mcfg, params=state["params"])
        opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay, mcfg.frozen)
        opt.m.update(state["adam_m"])
        opt.v.update(state["adam_v"])
        opt.step_count = state["step"]
        start_epoch = state["epoch"]
    pipeline = cfg.pipeline()
    for epoch in range(start_epoch, cfg.epochs):
        totals = np.zeros(4)
        n_batches = 0
        for bi, bm, prompts in _epoch_items(cfg, epoch, imgs, masks, pipeline):
            rep = train_step(model, opt, bi, bm, prompts, cfg)
            totals += (rep.l_total, rep.l_seg, rep.l_iou, rep.l_stability)
            n_batches += 1
        totals /= max(n_batches, 1)
        entry = {"epoch": epoch + 1, "loss": totals[0], "l_seg": totals[1], "l_iou": totals[2],
                 "l_stability": totals[3]}
        if len(vimgs):
            ev = evaluate_model(model, vimgs, vmasks)
            entry.update(val_miou=ev.miou, val_macc=ev.macc)
        history.append({k: float(v) if k != "epoch" else v for k, v in entry.items()})
        log.info("epoch %d loss %.4f %s", epoch + 1, totals[0],
                 f"val mIoU {entry['val_miou']:.4f}" if "val_miou" in entry else "")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model, opt, cfg.epochs)
        with open(os.path.join(out_dir, "train_log.json"), "w") as fh:
            json.dump(history, fh, indent=1)
    return model, history


# --------------------------------------------------------------------------
# checkpoint file: magic, version, then a table of (name, shape, f32 payload)


def save_checkpoint(path: str, model: MSHARD, opt: AdamW | None = None, epoch: int = 0) -> None:
    table = {k: v for k, v in model.params.items()}
    table["meta.pos_scale"] = np.array([model.cfg.pos_scale])
    table["meta.d_k"] = np.array([model.cfg.d_k])
    if opt is not None:
        table.update({f"adam.m.{k}": v for k, v in opt.m.items()})
        table.update({f"adam.v.{k}": v for k, v in opt.v.items()})
        table["adam.step"] = np.array([opt.step_count])
    table["train.epoch"] = np.array([epoch])
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(table)))
        for name, arr in table.items():
            arr = np.asarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)) + enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    table = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        table[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    params = {k: v for k, v in table.items() if not k.startswith(("adam.", "meta.", "train."))}
    return {
        "params": params,
        "adam_m": {k[len("adam.m."):]: v for k, v in table.items() if k.startswith("adam.m.")},
        "adam_v": {k[len("adam.v."):]: v for k, v in table.items() if k.startswith("adam.v.")},
        "step": int(table.get("adam.step", np.zeros(1))[0]),
        "epoch": int(table.get("train.epoch", np.zeros(1))[0]),
        "pos_scale": float(table.get("meta.pos_scale", np.ones(1))[0]),
        "d_k": int(table.get("meta.d_k", np.array([16.0]))[0]),
    }


def model_from_checkpoint(path: str) -> MSHARD:
    state = load_checkpoint(path)
    params = state["params"]
    channels = tuple(int(params[f"attn.{l}.wv"].shape[0]) for l in (1, 2, 3, 4))
    cfg = ModelConfig(channels=channels, d_k=state["d_k"], hidden=int(params["head.iou.w1"].shape[1]),
                      pos_scale=state["pos_scale"], upscale=int(params["head.up.proj"].shape[0]),
                      stem=int(params["enc.0.w"].shape[0]))
    return MSHARD(cfg, params=params)


def predict_corpus(model: MSHARD, manifest_path: str, out_dir: str) -> list[dict]:
    """Write <frame>_prob.pgm per frame and predictions.json (paths relative to ``out_dir``)."""
    records, root = load_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    preds = []
    for i, rec in enumerate(records):
        img = raster.read_raster(os.path.join(root, rec["frame"]), "rgb8")
        out = model.predict(img)
        probs = lm.sigmoid(out.logits.astype(np.float64))
        name = os.path.splitext(os.path.basename(rec["frame"]))[0] + "_prob.pgm"
        raster.write_raster(probs, os.path.join(out_dir, name), "gray8")
        rel = {k: os.path.relpath(os.path.join(root, rec[k]), out_dir) for k in ("frame", "mask") if rec.get(k)}
        preds.append({**rel, "prob": name, "iou": out.iou, "confidence": out.confidence})
    with open(os.path.join(out_dir, "predictions.json"), "w") as fh:
        json.dump(preds, fh, indent=1)
    return preds
