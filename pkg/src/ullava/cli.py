"""Command-line entry point: ``ullava {build-data,train,eval,infer}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Results go to
stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .data.clients import HttpCaptionClient, HttpTagClient, MockCaptioner, MockTagger
from .data.dataset_io import load_dataset, write_dataset
from .data.rle import rle_encode
from .data.salient import build_salient15k, load_salient_source
from .data.synthetic import make_corpus
from .data.templates import ANSWER_POOLS, USER_POOLS
from .data.visuals import VisualStore
from .errors import UllavaError, ValidationError
from .metrics import SamplePrediction, evaluate_split, fuse_rec_outputs
from .model import ULlava
from .trainer import (
    load_checkpoint,
    pretrain_language_model,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
from .types import BOX_TASKS

log = logging.getLogger("ullava")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_split(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset file {path} not found")
    return list(load_dataset(path)), VisualStore(path.parent)


def _load_many(paths):
    samples, stores = [], []
    for p in paths:
        s, st = _load_split(p)
        samples.extend(s)
        stores.append((s, st))
    return samples, stores


class _MultiStore(VisualStore):
    """Resolve each sample's visual relative to the dataset file it came from."""

    def __init__(self, stores):
        super().__init__()
        self.by_path = {}
        for samples, st in stores:
            for s in samples:
                if s.visual is not None:
                    self.by_path[s.visual.path] = st

    def load(self, ref):
        return self.by_path[ref.path].load(ref)


# -- build-data ------------------------------------------------------------------------------


def cmd_build_data(config: dict, out: Path, mock_clients: bool) -> int:
    build = config["build"]
    seed = int(config["seed"])
    counts: dict[str, int] = {}
    report: dict = {"seed": seed, "files": counts}
    for i, (kind, n) in enumerate(sorted((build.get("synthetic") or {}).items())):
        samples, store = make_corpus(kind, int(n), seed=seed * 1000 + i, size=config["model"]["image_size"],
                                     n_frames=config["model"]["n_frames"])
        store.save_all(out)
        name = kind.replace("+", "_")
        counts[name] = write_dataset(samples, out / f"{name}.jsonl")

    failed = False
    if build.get("salient_source"):
        src = Path(build["salient_source"])
        if not src.is_dir():
            raise ValidationError(f"salient source directory {src} does not exist")
        try:
            records = load_salient_source(src)
        except FileNotFoundError as e:
            raise ValidationError(str(e)) from e
        store = VisualStore()
        for r in records:
            r.image_path = f"salient_images/{r.id}.png"
            store.arrays[r.image_path] = r.image
        store.save_all(out)
        settings = cfgmod.client_settings(config)
        if mock_clients or build.get("mock_clients"):
            captioner, tagger = MockCaptioner(), MockTagger()
        else:
            if not settings.caption_url or not settings.tag_url:
                raise ValidationError("caption/tag endpoints are not configured (use --mock-clients for offline builds)")
            captioner = HttpCaptionClient(settings.caption_url, settings.timeout)
            tagger = HttpTagClient(settings.tag_url, settings.timeout)
        samples, rep = build_salient15k(
            records, captioner, tagger, seed, settings.attempts, settings.backoff, build.get("max_workers", 4)
        )
        counts["salient"] = write_dataset(samples, out / "salient.jsonl")
        report["salient"] = rep.to_dict()
        if rep.skipped:
            failed = True
            print(f"error: {len(rep.skipped)} salient records failed after retries; see build_report.json",
                  file=sys.stderr)
    if not counts:
        raise ValidationError("nothing to build: configure build.synthetic and/or build.salient_source")
    _dump(report, out / "build_report.json")
    print(json.dumps(report, sort_keys=True))
    return 2 if failed else 0


# -- train -----------------------------------------------------------------------------------


def cmd_train(config: dict, out: Path) -> int:
    s1, s2, lmp = config["stage1"], config["stage2"], config["lm_pretrain"]
    if not s1["enabled"] and not s2["enabled"]:
        raise ValidationError("both stages are disabled")
    init = s2.get("init_checkpoint")
    if s2["enabled"] and not s1["enabled"] and s2.get("require_stage1", True) and not init:
        raise ValidationError("stage II requires a stage I checkpoint: set stage2.init_checkpoint or enable stage1")
    stage1_data, stores1 = _load_many(s1["datasets"]) if s1["enabled"] else ([], [])
    stage2_data, stores2 = _load_many(s2["datasets"]) if s2["enabled"] else ([], [])
    lm_data, stores0 = _load_many(lmp.get("datasets") or s1["datasets"]) if lmp["enabled"] else ([], [])
    if s1["enabled"] and not stage1_data:
        raise ValidationError("stage1 is enabled but has no datasets")
    if s2["enabled"] and not stage2_data:
        raise ValidationError("stage2 is enabled but has no datasets")
    store = _MultiStore(stores0 + stores1 + stores2)
    mcfg = cfgmod.model_config(config)
    loss_cfg = cfgmod.loss_config(config)
    chash = cfgmod.config_hash(config)
    torch.manual_seed(int(config["seed"]))

    if init and not s1["enabled"]:
        model = load_checkpoint(init, mcfg)
    else:
        extra = [t for pool in (*USER_POOLS.values(), *ANSWER_POOLS.values()) for t in pool.templates]
        model = ULlava.for_samples(mcfg, lm_data + stage1_data + stage2_data, extra_words=extra)
    log.info("model has %d parameters", model.n_parameters())

    reports = {}
    if lmp["enabled"] and not (init and not s1["enabled"]):
        lcfg = cfgmod.stage_config(config, "lm_pretrain", "LM")
        reports["lm_pretrain"] = pretrain_language_model(model, lm_data, lcfg)
    if s1["enabled"]:
        reports["stage1"] = train_stage1(model, stage1_data, cfgmod.stage_config(config, "stage1", "I"), store, loss_cfg)
    if s2["enabled"]:
        reports["stage2"] = train_stage2(model, stage2_data, cfgmod.stage_config(config, "stage2", "II"), store, loss_cfg)

    ckpt = save_checkpoint(model, out / "model.pt", chash)
    summary = {"checkpoint": str(ckpt), "config_hash": chash, "stages": {}}
    for name, rep in reports.items():
        rep.checkpoint_path = str(ckpt)
        with (out / f"history_{name}.jsonl").open("w", encoding="utf-8") as fh:
            for h in rep.history:
                fh.write(json.dumps(h, sort_keys=True) + "\n")
        summary["stages"][name] = {
            "steps": len(rep.history),
            "initial_loss": rep.losses[0] if rep.losses else None,
            "final_loss": rep.losses[-1] if rep.losses else None,
            "seed": rep.seed,
        }
    _dump({**summary, "wall_clock": {k: r.wall_clock for k, r in reports.items()}}, out / "train_report.json")
    _dump(config, out / "config.json")
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- eval / infer ----------------------------------------------------------------------------


class ModelPredictor:
    """Generation-based predictions; REC boxes are fused with any generated mask."""

    def __init__(self, model: ULlava, store: VisualStore, max_new_tokens: int = 32):
        self.model, self.store, self.max_new_tokens = model, store, max_new_tokens

    def __call__(self, sample) -> SamplePrediction:
        question = next(t.text for t in sample.turns if t.role == "user")
        pixels = self.store.load(sample.visual) if sample.visual is not None else None
        kind = sample.visual.kind if sample.visual is not None else None
        pred = self.model.predict(question, pixels, kind, self.max_new_tokens)
        boxes = list(pred.boxes)
        if sample.task_kind in BOX_TASKS:
            n = max(len(pred.boxes), len(pred.masks))
            boxes = []
            for i in range(n):
                box = pred.boxes[i] if i < len(pred.boxes) else None
                mask = pred.masks[i] if i < len(pred.masks) else None
                if box is not None or (mask is not None and mask.any()):
                    boxes.append(fuse_rec_outputs(box, mask))
        return SamplePrediction(masks=pred.masks, boxes=boxes)


def cmd_eval(config: dict, out: Path, checkpoint: str | None, split: str | None) -> int:
    if not checkpoint:
        raise ValidationError("--checkpoint is required")
    model = load_checkpoint(checkpoint, cfgmod.model_config(config))
    ev = config["eval"]
    splits = dict(ev.get("splits") or {})
    if split is not None:
        splits = {split: splits[split]} if split in splits else {Path(split).stem: split}
    if not splits:
        raise ValidationError("no evaluation split given (--split or eval.splits)")
    report = {"config_hash": cfgmod.config_hash(config), "checkpoint": str(checkpoint), "splits": {}}
    for name, path in sorted(splits.items()):
        samples, store = _load_split(path)
        predictor = ModelPredictor(model, store, ev["max_new_tokens"])
        res = evaluate_split(samples, predictor, ev["threshold"], int(ev.get("shards", 1)))
        report["splits"][name] = res.to_dict()
    _dump(report, out / "eval_report.json")
    print(json.dumps(report, sort_keys=True))
    return 0


def _load_pixels(path: str):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"visual input {p} not found")
    if p.suffix == ".npy":
        arr = np.load(p)
        return arr, ("video" if arr.ndim == 4 else "image")
    return np.asarray(Image.open(p).convert("RGB")), "image"


def cmd_infer(config: dict, out: Path, checkpoint: str | None, image: str | None, prompt: str | None) -> int:
    if not checkpoint or prompt is None:
        raise ValidationError("--checkpoint and --prompt are required")
    model = load_checkpoint(checkpoint)
    pixels, kind = _load_pixels(image) if image else (None, None)
    pred = model.predict(prompt, pixels, kind, config["eval"]["max_new_tokens"])
    result: dict = {"text": pred.text, "masks": [], "box": None}
    for i, m in enumerate(pred.masks):
        png = out / f"mask_{i}.png"
        Image.fromarray((m * 255).astype(np.uint8)).save(png)
        rle_path = out / f"mask_{i}.rle.json"
        rle_path.write_text(json.dumps(rle_encode(m).to_json()) + "\n", encoding="utf-8")
        result["masks"].append({"png": str(png), "rle": str(rle_path)})
    if pred.boxes:
        box = fuse_rec_outputs(pred.boxes[0], pred.masks[0] if pred.masks else None)
        result["box"] = list(box.as_tuple())
    _dump(result, out / "infer_result.json")
    print(json.dumps(result, sort_keys=True))
    return 0


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ullava", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")
    b = sub.add_parser("build-data", parents=[common], help="build dataset files")
    b.add_argument("--mock-clients", action="store_true", help="use offline captioner/tagger")
    sub.add_parser("train", parents=[common], help="run stage I and/or stage II")
    e = sub.add_parser("eval", parents=[common], help="cIoU / Prec@0.5 on dataset splits")
    e.add_argument("--checkpoint")
    e.add_argument("--split", help="split name from eval.splits or a dataset path")
    i = sub.add_parser("infer", parents=[common], help="answer one prompt")
    i.add_argument("--checkpoint")
    i.add_argument("--image", help="PNG image or NPY image/video")
    i.add_argument("--prompt")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    torch.set_num_threads(1)
    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        config = cfgmod.load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "build-data":
            return cmd_build_data(config, out, args.mock_clients)
        if args.command == "train":
            return cmd_train(config, out)
        if args.command == "eval":
            return cmd_eval(config, out, args.checkpoint, args.split)
        return cmd_infer(config, out, args.checkpoint, args.image, args.prompt)
    except (ValidationError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except UllavaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"error: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
