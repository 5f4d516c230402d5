"""Command-line entry point: ``hsimamba {synth,train,eval,unmix}``.

Relative output directories are resolved under ``$HSIMAMBA_OUTPUT_ROOT`` when
it is set. Exit codes: 0 success, 1 validation error, 2 training divergence.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import io, report
from .data import (HsiCube, LabelMap, SyntheticGroundTruth, generate_synthetic_cube,
                   load_envi, stratified_split)
from .mamba import ConfigError
from .model import ABLATIONS, load_checkpoint, save_checkpoint
from .trainer import (TrainConfig, TrainingDiverged, build_model, evaluate, predict,
                      train, train_unmixing, unmixing_metrics, write_history)
from .unmixing import sad_map
from .vca import VCAError

log = logging.getLogger("hsimamba")

OUTPUT_ROOT_ENV = "HSIMAMBA_OUTPUT_ROOT"

SCHEMA = {
    "data": {"dataset": str, "envi_header": str, "envi_data": str, "labels": str,
             "train_frac": float, "val_frac": float},
    "model": {"endmembers": int, "variants": int, "dim": int, "groups": int, "state": int,
              "lam": float, "alpha": float, "beta": float, "tau": float,
              "freeze_endmembers": bool},
    "train": {"lr_cls": float, "lr_um": float, "decay": float, "decay_every": int,
              "epochs": int, "seed": int},
    "ablation": {name: bool for name in ABLATIONS},
    "output": {"dir": str},
}


class ValidationError(ValueError):
    pass


# -- config ---------------------------------------------------------------------

def _parse_value(kind, text: str, where: str):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ValidationError(f"{where}: cannot read {text!r} as {kind.__name__}") from None


def default_run_config() -> dict:
    tc = TrainConfig()
    cfg = {section: {} for section in SCHEMA}
    for section, keys in SCHEMA.items():
        for key in keys:
            if hasattr(tc, key):
                cfg[section][key] = getattr(tc, key)
    return cfg


def read_run_config(path) -> dict:
    """Defaults overlaid with the key = value sections of ``path``; unknown keys are errors."""
    cfg = default_run_config()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path):
        raise ValidationError(f"config file not readable: {path}")
    for section in parser.sections():
        if section not in SCHEMA:
            raise ValidationError(f"unknown config section [{section}]")
        for key, text in parser.items(section):
            if key not in SCHEMA[section]:
                raise ValidationError(f"unknown config key {section}.{key}")
            cfg[section][key] = _parse_value(SCHEMA[section][key], text, f"{section}.{key}")
    return cfg


def write_run_config(path, cfg: dict) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SCHEMA:
        parser.add_section(section)
        for key, value in cfg.get(section, {}).items():
            parser.set(section, key, repr(value) if isinstance(value, float) else str(value))
    with open(path, "w") as fh:
        parser.write(fh)


def train_config_from(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    flat = {}
    for section in ("data", "model", "train", "ablation"):
        flat.update({k: v for k, v in cfg[section].items() if k in names})
    try:
        return TrainConfig(**flat)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# -- datasets -------------------------------------------------------------------

def load_dataset(cfg_data: dict):
    """Return ``(cube, labels or None, ground truth or None)`` from the [data] section."""
    if cfg_data.get("dataset"):
        root = Path(cfg_data["dataset"])
        if not (root / "cube.hsa").exists():
            raise ValidationError(f"{root} holds no cube.hsa")
        cube = HsiCube(io.read_array(root / "cube.hsa"))
        labels = io.read_array(root / "labels.hsa") if (root / "labels.hsa").exists() else None
        gt = None
        if (root / "gt_endmembers.hsa").exists():
            meta = json.loads((root / "meta.json").read_text())
            gt = SyntheticGroundTruth(io.read_array(root / "gt_endmembers.hsa"),
                                      io.read_array(root / "gt_abundance.hsa"),
                                      float(meta["snr_db"]), io.read_array(root / "noise.hsa"))
        return cube, labels, gt
    if cfg_data.get("envi_header"):
        cube = load_envi(cfg_data["envi_header"], cfg_data.get("envi_data") or None)
        labels = None
        if cfg_data.get("labels"):
            lp = Path(cfg_data["labels"])
            labels = (io.read_label_csv(lp, (cube.height, cube.width)) if lp.suffix == ".csv"
                      else io.read_array(lp))
        return cube, labels, None
    raise ValidationError("no dataset given: set data.dataset or data.envi_header")


def _split_to_array(lm: LabelMap) -> np.ndarray:
    out = np.zeros(lm.labels.shape, dtype=np.uint8)
    out[lm.train_mask] = 1
    out[lm.val_mask] = 2
    out[lm.test_mask] = 3
    return out


def _split_from_array(labels: np.ndarray, split: np.ndarray) -> LabelMap:
    return LabelMap(labels, split == 1, split == 2, split == 3)


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    if not args.snr > 0:
        raise ValidationError(f"--snr must be positive, got {args.snr}")
    out = resolve_output(args.output)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    try:
        cube, gt = generate_synthetic_cube(args.P, args.bands, args.size, args.size,
                                           args.snr, args.seed, pure_pixels=not args.no_pure_pixels)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    labels = gt.labels()
    io.write_array(out / "cube.hsa", cube.values)
    io.write_envi(out / "cube.hdr", cube.values, "bsq", cube.wavelengths)
    io.write_array(out / "labels.hsa", labels)
    io.write_label_csv(out / "labels.csv", labels)
    io.write_array(out / "gt_endmembers.hsa", gt.true_endmembers)
    io.write_array(out / "gt_abundance.hsa", gt.true_abundance)
    io.write_array(out / "noise.hsa", gt.noise)
    meta = {"P": args.P, "C": args.bands, "H": args.size, "W": args.size,
            "snr_db": args.snr if math.isfinite(args.snr) else "inf", "seed": args.seed,
            "num_classes": int(labels.max())}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"wrote synthetic dataset to {out}")
    return 0


def _effective_config(args) -> dict:
    cfg = read_run_config(args.config) if args.config else default_run_config()
    overrides = {
        ("data", "dataset"): args.dataset,
        ("train", "epochs"): args.epochs,
        ("train", "seed"): args.seed,
        ("train", "lr_cls"): args.lr_cls,
        ("train", "lr_um"): args.lr_um,
        ("model", "endmembers"): args.P,
        ("data", "train_frac"): args.train_frac,
        ("data", "val_frac"): args.val_frac,
        ("output", "dir"): args.output,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            cfg[section][key] = value
    for flag in args.ablate or []:
        if flag not in ABLATIONS:
            raise ValidationError(f"unknown ablation {flag!r}; choose from {', '.join(ABLATIONS)}")
        cfg["ablation"][flag] = True
    if cfg["data"].get("dataset"):
        cfg["data"]["dataset"] = str(Path(cfg["data"]["dataset"]).resolve())
    if not cfg["output"].get("dir"):
        raise ValidationError("no output directory: pass -o or set output.dir")
    return cfg


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    tc = train_config_from(cfg)
    cube, labels, _ = load_dataset(cfg["data"])
    if labels is None:
        raise ValidationError("training needs a label map")
    if tc.endmembers > cube.bands:
        raise ValidationError(f"P={tc.endmembers} exceeds band count {cube.bands}")
    out = resolve_output(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(out / "config.ini", cfg)

    lm = stratified_split(labels, tc.train_frac, tc.val_frac, seed=tc.seed)
    io.write_array(out / "split.hsa", _split_to_array(lm))
    model = build_model(cube.values, lm.num_classes, tc)
    result = train(model, cube.values, lm, tc, log_every=args.log_every)
    save_checkpoint(model, out / "checkpoint",
                    extra={"best_epoch": result.best_epoch, "seed": tc.seed})
    write_history(out / "history.csv", result.history)
    run = {"ablations": {name: getattr(tc, name) for name in ABLATIONS},
           "best_epoch": result.best_epoch, "epochs": tc.epochs,
           "lam": tc.lam, "alpha": tc.alpha, "beta": tc.beta}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True))
    print(f"trained {tc.epochs} epochs (best epoch {result.best_epoch}); outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    run = resolve_output(args.run)
    if not (run / "checkpoint" / "manifest.json").exists():
        raise ValidationError(f"no checkpoint under {run}")
    cfg = read_run_config(run / "config.ini")
    if args.dataset:
        cfg["data"]["dataset"] = args.dataset
    cube, labels, gt = load_dataset(cfg["data"])
    model, _ = load_checkpoint(run / "checkpoint")
    mc = model.config
    if (mc.bands, mc.height, mc.width) != cube.values.shape:
        raise ValidationError(
            f"checkpoint expects cube {(mc.bands, mc.height, mc.width)}, data is {cube.values.shape}")
    if gt is not None and gt.true_endmembers.shape[0] != mc.endmembers:
        gt = None  # endmember count differs from the synthetic truth; skip unmixing metrics
    if labels is None:
        raise ValidationError("evaluation needs a label map")
    lm = _split_from_array(labels, io.read_array(run / "split.hsa"))
    out = resolve_output(args.output) if args.output else run / "eval"
    out.mkdir(parents=True, exist_ok=True)

    rep = evaluate(model, cube.values, lm, args.split, gt)
    metrics = rep.to_dict()
    metrics["split"] = args.split
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))

    res = predict(model, cube.values)
    pred = res.logits.argmax(0).numpy() + 1
    report.save_class_map(out / "classmap.png", pred)
    report.save_abundance_pngs(out, res.abundance.numpy())
    spectra = res.spectra.numpy()
    effective = np.einsum("prhw,prc->phwc", res.weights.numpy(), spectra)
    effective = effective.reshape(spectra.shape[0], -1, spectra.shape[2])
    report.plot_endmembers(out / "endmembers.png", spectra, cube.wavelengths, effective)
    report.write_endmember_csv(out / "endmembers.csv", spectra)
    (out / "tokenplan.json").write_text(json.dumps(res.plan.summary(), indent=2))
    (out / "tokenplan.jsonl").write_text(res.plan.to_jsonl())
    print(f"{args.split}: OA {rep.oa:.4f} AA {rep.aa:.4f} Kappa {rep.kappa:.4f}; outputs in {out}")
    return 0


def cmd_unmix(args) -> int:
    data_cfg = {"dataset": args.dataset, "envi_header": args.envi_header,
                "envi_data": args.envi_data}
    cube, _, gt = load_dataset(data_cfg)
    if args.P > cube.bands:
        raise ValidationError(f"P={args.P} exceeds band count {cube.bands}")
    out = resolve_output(args.output)
    out.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(endmembers=args.P, variants=args.variants, seed=args.seed,
                     lr_um=args.lr, epochs=args.epochs)
    model = build_model(cube.values, 1, tc)
    history = train_unmixing(model, cube.values, args.epochs, lr=args.lr, seed=args.seed)
    model.eval()
    x = torch.from_numpy(cube.values)
    with torch.no_grad():
        _, A, _, S, recon = model.unmix(x)
        err = sad_map(x, recon).numpy()
    A, S = A.numpy(), S.numpy()
    io.write_array(out / "abundance.hsa", A)
    report.save_abundance_pngs(out, A)
    report.write_endmember_csv(out / "endmembers.csv", S)
    io.write_array(out / "endmembers.hsa", S)
    io.write_array(out / "recon_sad.hsa", err)
    report.save_gray(out / "recon_sad.png", err)
    if history:
        write_history(out / "history.csv", history)
    metrics = {"mean_recon_sad": float(err.mean()), "epochs": args.epochs}
    if gt is not None and gt.true_endmembers.shape[0] == args.P:
        metrics["endmember_sad"], metrics["abundance_rmse"] = unmixing_metrics(S.mean(1), A, gt)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics))
    return 0


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsimamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic linear-mixture dataset")
    p.add_argument("--P", type=int, default=4, help="number of endmembers / classes")
    p.add_argument("--size", type=int, default=32, help="image height and width")
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--snr", type=float, default=30.0, help="dB; 'inf' for noiseless")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pure-pixels", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the joint model")
    p.add_argument("--config")
    p.add_argument("--dataset", help="directory written by `synth`")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-cls", type=float)
    p.add_argument("--lr-um", type=float)
    p.add_argument("--P", type=int)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--val-frac", type=float)
    p.add_argument("--ablate", action="append", metavar="FLAG",
                   help=f"one of {', '.join(ABLATIONS)}; repeatable")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run and write maps")
    p.add_argument("--run", required=True, help="output directory of `train`")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("unmix", help="train only the unmixing branch")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--envi-header")
    p.add_argument("--envi-data")
    p.add_argument("--P", type=int, default=4)
    p.add_argument("--variants", type=int, default=4)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_unmix)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ConfigError, io.FormatError, VCAError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
