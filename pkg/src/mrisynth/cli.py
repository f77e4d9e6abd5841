"""Command-line entry point: ``mrisynth {phantom,fit-landmarks,train,synthesize,evaluate}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import SEQUENCES, __version__
from .errors import ConfigError, SynthError
from .losses import PRESETS, LossConfig
from .phantom import PhantomSpec, case_seed, generate_case
from .volume_io import load_case, save_case

log = logging.getLogger("mrisynth")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


@dataclass
class RunConfig:
    data_root: Optional[str] = None
    output_root: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    landmarks: Optional[str] = None
    seed: int = 0
    determinism: bool = False
    phantom: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    paths = raw.pop("paths", {}) or {}
    known = {f.name for f in fields(RunConfig)}
    unknown = (set(raw) | set(paths)) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return RunConfig(**{**paths, **raw})


def write_effective_config(cfg: RunConfig, out_dir: Path, name: str = "effective_config.yaml"):
    out_dir.mkdir(parents=True, exist_ok=True)
    d = asdict(cfg)
    payload = {
        "paths": {k: d.pop(k) for k in ("data_root", "output_root", "checkpoint_dir", "landmarks")},
        **d,
    }
    (out_dir / name).write_text(yaml.safe_dump(payload, sort_keys=True))


def _set(cfg: RunConfig, section: Optional[str], key: str, value):
    if value is None:
        return
    if section is None:
        setattr(cfg, key, value)
    else:
        getattr(cfg, section)[key] = value


def _apply_common(cfg: RunConfig, args):
    _set(cfg, None, "seed", args.seed)
    if args.determinism:
        cfg.determinism = True
    return cfg


def _parse_shape(text) -> tuple:
    if isinstance(text, (list, tuple)):
        parts = [int(x) for x in text]
    else:
        parts = [int(x) for x in str(text).replace("x", ",").split(",") if x]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ConfigError(f"shape must be one or three integers, got {text!r}")
    return tuple(parts)


def _configure(args):
    if args.determinism:
        import torch

        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def cmd_phantom(args) -> int:
    cfg = _apply_common(load_run_config(args.config), args)
    _set(cfg, None, "output_root", args.out)
    for key, value in (
        ("cases", args.cases),
        ("shape", args.shape),
        ("noise_sigma", args.noise),
        ("n_shells", args.shells),
        ("texture", args.texture),
    ):
        _set(cfg, "phantom", key, value)
    if cfg.output_root is None:
        raise ConfigError("phantom: --out is required")
    spec_args = dict(cfg.phantom)
    n = int(spec_args.pop("cases", 4))
    shape = _parse_shape(spec_args.pop("shape", 32))
    spec_args.pop("seed", None)
    if "tumor_radius_range" in spec_args:
        spec_args["tumor_radius_range"] = tuple(spec_args["tumor_radius_range"])
    try:
        template = PhantomSpec(shape=shape, **spec_args)
    except TypeError as exc:
        raise ConfigError(f"phantom: {exc}") from exc
    cfg.phantom = {"cases": n, **asdict(template)}
    cfg.phantom.pop("seed")
    out = Path(cfg.output_root)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        case_id = f"PHANTOM-{i:05d}"
        case = generate_case(replace(template, seed=case_seed(cfg.seed, i)), case_id)
        save_case(case, out / case_id)
    write_effective_config(cfg, out)
    print(f"wrote {n} phantom cases to {out}")
    return EXIT_OK


def _load_cases(root, require_seg=True) -> List:
    from .volume_io import list_case_dirs

    dirs = list_case_dirs(root)
    if not dirs:
        raise ConfigError(f"no case directories under {root}")
    return [load_case(d, require_seg=require_seg) for d in dirs]


def _fit_all(cases) -> Dict:
    from .preprocess import fit_landmarks

    return {s: fit_landmarks([c.sequences[s] for c in cases], sequence_name=s) for s in SEQUENCES}


def cmd_fit_landmarks(args) -> int:
    from .preprocess import save_scales

    cfg = _apply_common(load_run_config(args.config), args)
    _set(cfg, None, "data_root", args.data)
    _set(cfg, None, "landmarks", args.out)
    if cfg.data_root is None:
        raise ConfigError("fit-landmarks: --data is required")
    out = Path(cfg.landmarks or Path(cfg.data_root) / "landmarks.json")
    cases = _load_cases(cfg.data_root, require_seg=False)
    scales = _fit_all(cases)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scales(scales, out)
    cfg.landmarks = str(out)
    write_effective_config(cfg, out.parent, "landmarks_config.yaml")
    print(f"wrote landmarks for {len(cases)} cases to {out}")
    return EXIT_OK


def _train_config(cfg: RunConfig, desk: bool):
    from .trainer import TrainConfig, desk_config

    d = dict(cfg.train)
    preset = d.pop("loss_preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown loss preset {preset!r}; choose from {sorted(PRESETS)}")
        d["loss"] = PRESETS[preset].to_dict()
    d.setdefault("seed", cfg.seed)
    d["deterministic"] = bool(cfg.determinism) or bool(d.get("deterministic", False))
    try:
        base = desk_config() if desk else TrainConfig()
        merged = {**base.to_dict(), **d}
        for key in ("generator", "discriminator", "augment"):
            if isinstance(d.get(key), dict):
                merged[key] = {**base.to_dict()[key], **d[key]}
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def cmd_train(args) -> int:
    from .dataset import split_cases
    from .plotting import plot_training_log
    from .preprocess import load_scales, normalize_case, save_scales
    from .trainer import train

    cfg = _apply_common(load_run_config(args.config), args)
    _set(cfg, None, "data_root", args.data)
    _set(cfg, None, "output_root", args.out)
    _set(cfg, None, "landmarks", args.landmarks)
    for key, value in (
        ("target_sequence", args.target),
        ("loss_preset", args.loss),
        ("epochs", args.epochs),
        ("epoch_size", args.epoch_size),
        ("batch_size", args.batch_size),
        ("lr0", args.lr),
        ("fusion_mode", args.fusion_mode),
        ("vgg", args.vgg),
    ):
        _set(cfg, "train", key, value)
    if args.depth is not None:
        cfg.train.setdefault("generator", {})["depth"] = args.depth
    if args.desk:
        cfg.train["desk"] = True
    desk = bool(cfg.train.pop("desk", False))
    if cfg.data_root is None or cfg.output_root is None:
        raise ConfigError("train: --data and --out are required")
    tcfg = _train_config(cfg, desk)
    # record the fully resolved settings so the file can be replayed with --config
    cfg.train = {"desk": desk, **tcfg.to_dict()}
    cfg.seed = tcfg.seed
    _configure(args)

    out = Path(cfg.output_root)
    out.mkdir(parents=True, exist_ok=True)
    cases = {c.case_id: c for c in _load_cases(cfg.data_root)}
    train_ids, dev_ids = split_cases(list(cases), args.dev_fraction)
    if cfg.landmarks:
        scales = load_scales(cfg.landmarks)
    else:
        scales = _fit_all([cases[i] for i in train_ids])
        save_scales(scales, out / "landmarks.json")
        cfg.landmarks = str(out / "landmarks.json")
    target = tcfg.target_sequence
    train_cases = [normalize_case(cases[i], target, scales) for i in train_ids]
    dev_cases = [normalize_case(cases[i], target, scales) for i in dev_ids]
    cfg.checkpoint_dir = str(out / "ckpt" / target)
    write_effective_config(cfg, out)
    meta = {"scales": {k: v.to_dict() for k, v in scales.items()}, "fusion_mode": tcfg.fusion_mode, "train_config": tcfg.to_dict()}
    result = train(train_cases, tcfg, out, dev_cases, extra_meta=meta)
    summary = {
        "target": target,
        "steps": len(result.history),
        "train_cases": train_ids,
        "dev_cases": dev_ids,
        "best_checkpoint": str(result.best_checkpoint.relative_to(out)) if result.best_checkpoint else None,
        "final_loss": result.history[-1]["total"] if result.history else None,
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not args.no_figures:
        plot_training_log(out / "train_log.csv", out / "loss_curves.png", title=f"target {target}")
    print(f"trained {target} for {len(result.history)} steps; best checkpoint {summary['best_checkpoint']}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .fusion import as_predictor, fuse
    from .networks import load_checkpoint
    from .plotting import plot_slices
    from .preprocess import StandardScale, load_scales, minmax_invert, normalize_case
    from .volume_io import Volume, save_volume

    cfg = _apply_common(load_run_config(args.config), args)
    _set(cfg, "fusion", "mode", args.mode)
    _set(cfg, None, "landmarks", args.landmarks)
    _configure(args)
    gen, meta, _ = load_checkpoint(args.checkpoint)
    target = (args.missing or meta.target).lower()
    if target not in SEQUENCES:
        raise ConfigError(f"unknown sequence {target!r}")
    if cfg.landmarks:
        scales = load_scales(cfg.landmarks)
    else:
        scales = {k: StandardScale.from_dict(v) for k, v in meta.extra.get("scales", {}).items()}
    mode = str(cfg.fusion.get("mode", meta.extra.get("fusion_mode", "9")))
    case = load_case(args.case, missing=target)
    nc = normalize_case(case, target, scales)
    result = fuse(as_predictor(gen), nc.case, target, mode=mode, multiple=2**gen.cfg.depth)
    ref = next(iter(case.sequences.values()))
    norm = ref.with_data(np.clip(result.volume, 0.0, 1.0))
    pred = minmax_invert(norm, nc.input_scale)

    out = Path(args.out)
    if out.name.endswith((".nii", ".nii.gz")):
        out_file = out
    else:
        out_file = out / case.case_id / f"{case.case_id}-{target}.nii.gz"
    out_file.parent.mkdir(parents=True, exist_ok=True)
    save_volume(pred, out_file)
    write_effective_config(cfg, out_file.parent, "synthesize_config.yaml")
    if not args.no_figures:
        panels = {n: nc.case.sequences[n].data for n in nc.case.present()}
        panels[f"syn-{target}"] = norm.data
        plot_slices(panels, out_file.parent / f"{case.case_id}-{target}.png")
    print(f"wrote {out_file}")
    return EXIT_OK


def _pred_files(pred_root: Path, case_id: str, sequence: Optional[str]):
    candidates = list((pred_root / case_id).glob("*.nii*")) if (pred_root / case_id).is_dir() else []
    candidates += list(pred_root.glob(f"{case_id}-*.nii*"))
    found = {}
    for p in sorted(candidates):
        name = p.name.lower()
        for s in SEQUENCES:
            if name.endswith(f"-{s}.nii") or name.endswith(f"-{s}.nii.gz"):
                found.setdefault(s, p)
    if sequence is not None:
        return {sequence: found[sequence]} if sequence in found else {}
    return found


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_case, evaluate_global, mean_row, row_dict, write_metrics_csv
    from .plotting import plot_metrics
    from .preprocess import load_scales, standardize
    from .volume_io import list_case_dirs, load_volume

    cfg = _apply_common(load_run_config(args.config), args)
    _set(cfg, None, "output_root", args.out)
    _set(cfg, None, "landmarks", args.landmarks)
    # synthesized volumes live in landmark units; standardizing the reference compares like with like
    scales = load_scales(cfg.landmarks) if cfg.landmarks else None
    pred_root, ref_root = Path(args.pred), Path(args.ref)
    if not pred_root.is_dir():
        raise FileNotFoundError(f"no such prediction directory: {pred_root}")
    sequence = args.sequence.lower() if args.sequence else None
    rows = []
    for case_dir in list_case_dirs(ref_root):
        files = _pred_files(pred_root, case_dir.name, sequence)
        if not files:
            continue
        case = load_case(case_dir)
        multi = len(files) > 1
        for s, path in files.items():
            row_id = f"{case.case_id}-{s}" if multi else case.case_id
            pred = load_volume(path).data
            ref = case.sequences[s]
            ref = (standardize(ref, scales[s]) if scales else ref).data
            if case.seg is None:
                log.warning("no segmentation for %s; reporting whole-brain metrics", case.case_id)
                rows.append(evaluate_global(pred, ref, row_id))
            else:
                rows.append(evaluate_case(pred, ref, case.seg, row_id))
    if not rows:
        raise ConfigError(f"no predictions in {pred_root} match cases in {ref_root}")
    out = Path(cfg.output_root or pred_root)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    summary = {"n_cases": len(rows), "mean": row_dict(mean_row(rows)), "rows": [row_dict(r) for r in rows]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_effective_config(cfg, out, "evaluate_config.yaml")
    if not args.no_figures:
        plot_metrics(rows, out / "metrics.png")
    m = mean_row(rows)
    print(f"evaluated {len(rows)} volumes: SSIM_h={m.ssim_h:.4f} SSIM_t={m.ssim_t:.4f} PSNR_h={m.psnr_h:.2f} PSNR_t={m.psnr_t:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--determinism", action="store_true", help="deterministic kernels, single thread")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mrisynth", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write synthetic BraTS-style cases")
    p.add_argument("--cases", type=int)
    p.add_argument("--shape")
    p.add_argument("--noise", type=float)
    p.add_argument("--shells", type=int)
    p.add_argument("--texture", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit-landmarks", parents=[common], help="fit histogram landmarks on a case folder")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_landmarks)

    p = sub.add_parser("train", parents=[common], help="train one synthesis model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--target", choices=SEQUENCES)
    p.add_argument("--landmarks")
    p.add_argument("--loss", help=f"loss preset: {', '.join(PRESETS)}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--epoch-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--fusion-mode", choices=("9", "3"))
    p.add_argument("--vgg", choices=("pretrained", "random"))
    p.add_argument("--dev-fraction", type=float, default=0.1)
    p.add_argument("--desk", action="store_true", help="laptop-scale defaults")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", parents=[common], help="synthesize the missing sequence of a case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--missing", choices=SEQUENCES)
    p.add_argument("--mode", choices=("9", "3"))
    p.add_argument("--landmarks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", parents=[common], help="tumor/healthy SSIM and PSNR")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--sequence", choices=SEQUENCES)
    p.add_argument("--landmarks", help="standardize references with these landmarks before scoring")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mrisynth: error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SynthError as exc:
        print(f"mrisynth: error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"mrisynth: error: io: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"mrisynth: error: value: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
