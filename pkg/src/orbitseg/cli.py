"""Batch command line: generate, augment, train, predict, label, evaluate.

Every subcommand reads a JSON config (paths inside it are relative to the
config file), honours ``--seed`` where randomness is involved and writes into
``--out``. Failures exit with status 1 and print one JSON line on stderr::

    {"error": "OSError", "message": "..."}
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, lossmetrics, mscca, orbit, raster, sdat


def _load_config(path: str | None) -> tuple[dict, str]:
    if path is None:
        return {}, os.getcwd()
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg, os.path.dirname(os.path.abspath(path))


def _path(base: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base, p)


def _seed(args, cfg: dict, default: int = 0) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", default))


def _dump(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg, base = _load_config(args.config)
    gen = orbit.GeneratorConfig.from_dict(cfg.get("generator", {}))
    manifest = orbit.generate_corpus(args.out, int(cfg.get("n_frames", 100)), _seed(args, cfg), gen)
    print(json.dumps({"frames": len(manifest), "out": args.out}))
    return 0


def cmd_augment(args) -> int:
    cfg, base = _load_config(args.config)
    records, root = _read_manifest(_path(base, cfg["manifest"]))
    pipe = cfg.get("pipeline")
    if pipe is None:
        pipeline = sdat.DEFAULT_PIPELINE
    elif isinstance(pipe, str):
        pipeline = sdat.Pipeline.load(_path(base, pipe))
    else:
        pipeline = sdat.Pipeline.from_dict(pipe)
    pipeline = sdat.Pipeline(pipeline.steps, _seed(args, cfg, pipeline.seed))
    copies = int(cfg.get("copies", 1))
    os.makedirs(args.out, exist_ok=True)
    out = []
    for i, rec in enumerate(records):
        img = raster.read_raster(os.path.join(root, rec["frame"]), "rgb8")
        mask = raster.read_raster(os.path.join(root, rec["mask"]), "label16")
        for c in range(copies):
            item = i * copies + c
            aimg, amask = sdat.run_pipeline(pipeline, img, mask, item=item)
            frame, mask_name = f"frame_{item:05d}.ppm", f"frame_{item:05d}_mask.pgm"
            raster.write_raster(aimg, os.path.join(args.out, frame), "rgb8")
            raster.write_raster(amask, os.path.join(args.out, mask_name), "label16")
            out.append({"frame": frame, "mask": mask_name, "source": rec["frame"], "item": item})
    _dump(out, os.path.join(args.out, "manifest.json"))
    print(json.dumps({"frames": len(out), "out": args.out}))
    return 0


def cmd_train(args) -> int:
    from .mshard.train import TrainConfig, train

    cfg, base = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    tcfg = TrainConfig.from_dict(cfg, base)
    _, history = train(tcfg, out_dir=args.out, resume=_path(base, cfg["resume"]) if cfg.get("resume") else None)
    print(json.dumps(history[-1] if history else {}))
    return 0


def cmd_predict(args) -> int:
    from .mshard.train import model_from_checkpoint, predict_corpus

    cfg, base = _load_config(args.config)
    model = model_from_checkpoint(_path(base, cfg["checkpoint"]))
    preds = predict_corpus(model, _path(base, cfg["manifest"]), args.out)
    print(json.dumps({"frames": len(preds), "out": args.out}))
    return 0


def cmd_label(args) -> int:
    """Instance labels from predicted probabilities (predictions.json from ``predict``)."""
    cfg, base = _load_config(args.config)
    pred_path = _path(base, cfg["predictions"])
    records, root = _read_manifest(pred_path)
    criteria = mscca.SuspicionCriteria(**cfg.get("criteria", {}))
    cut = mscca.CutConfig(**cfg.get("cut", {}))
    threshold = float(cfg.get("threshold", 0.5))
    os.makedirs(args.out, exist_ok=True)
    report = []
    for rec in records:
        prob = raster.read_raster(os.path.join(root, rec["prob"]), "gray8")[0]
        img = raster.read_raster(os.path.join(root, rec["frame"]), "rgb8") if rec.get("frame") else None
        cs = mscca.segment_instances(prob, img, threshold, criteria, cut)
        name = os.path.basename(rec["prob"]).replace("_prob.pgm", "_labels.pgm")
        raster.write_raster(cs.labels, os.path.join(args.out, name), "label16")
        report.append({"labels": name, "prob": os.path.relpath(os.path.join(root, rec["prob"]), args.out),
                       "k": cs.k, "components": cs.to_json()})
    _dump(report, os.path.join(args.out, "components.json"))
    print(json.dumps({"frames": len(report), "out": args.out}))
    return 0


def cmd_evaluate(args) -> int:
    """Dataset-level binary mIoU/mAcc from predictions.json (probabilities vs masks)."""
    cfg, base = _load_config(args.config)
    records, root = _read_manifest(_path(base, cfg["predictions"]))
    threshold = float(cfg.get("threshold", 0.5))
    cm = np.zeros((2, 2), dtype=np.int64)
    for rec in records:
        if not rec.get("mask"):
            raise ValueError(f"record for {rec.get('prob')} has no ground-truth mask")
        prob = raster.read_raster(os.path.join(root, rec["prob"]), "gray8")[0]
        gt = raster.read_raster(os.path.join(root, rec["mask"]), "label16")
        cm += lossmetrics.confusion(prob > threshold, gt)
    report = lossmetrics.report_from_confusion(cm)
    os.makedirs(args.out, exist_ok=True)
    _dump(report.to_dict(), os.path.join(args.out, "metrics.json"))
    print(json.dumps({"miou": report.miou, "macc": report.macc}))
    return 0


def _read_manifest(path: str) -> tuple[list, str]:
    with open(path) as fh:
        return json.load(fh), os.path.dirname(os.path.abspath(path))


COMMANDS = {
    "generate": (cmd_generate, "render a synthetic scene corpus"),
    "augment": (cmd_augment, "apply an augmentation pipeline to a corpus"),
    "train": (cmd_train, "train the decoder and write checkpoint.bin + train_log.json"),
    "predict": (cmd_predict, "write per-frame probability maps and predictions.json"),
    "label": (cmd_label, "instance-label probability maps into components.json"),
    "evaluate": (cmd_evaluate, "write metrics.json (binary mIoU / mAcc)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orbitseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"orbitseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=fn.__doc__ or help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyError as exc:
        err = {"error": "ConfigError", "message": f"missing config key {exc.args[0]!r}"}
    except Exception as exc:  # reported as one machine-readable line
        err = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(err), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
