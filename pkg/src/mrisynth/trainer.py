"""Alternating LSGAN / synthesis-loss training with step-decay Adam and dev monitoring."""
from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .dataset import AugmentConfig, PLANES, SliceIndex, epoch_sampler
from .errors import ArgumentError, NonFiniteLossError
from .fusion import as_predictor, fuse
from .losses import TERMS, LossConfig, combined_loss, lsgan_d_loss, random_vgg_extractor, pretrained_vgg_extractor
from .metrics import MetricRow, evaluate_case, evaluate_global, mean_row, write_metrics_csv
from .networks import (
    CheckpointMeta,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    config_hash,
    save_checkpoint,
)
from .preprocess import NormalizedCase

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr") + tuple(TERMS) + ("total", "d_loss")


@dataclass(frozen=True)
class TrainConfig:
    target_sequence: str = "t1c"
    lr0: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 64
    epochs: int = 100
    epoch_size: int = 400_000
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    deterministic: bool = True
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    planes: Sequence[str] = PLANES
    fusion_mode: str = "9"
    dev_every: int = 1
    # "pretrained" loads ImageNet VGG-19; "random" uses a seeded random-weight stand-in
    vgg: str = "pretrained"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.epoch_size < self.batch_size:
            raise ArgumentError("epoch_size must be >= batch_size")
        if self.lr0 <= 0:
            raise ArgumentError("lr0 must be positive")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["planes"] = list(self.planes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {
            "loss": LossConfig.from_dict,
            "generator": lambda x: GeneratorConfig(**x),
            "discriminator": lambda x: DiscriminatorConfig(**x),
            "augment": lambda x: AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in x.items()}),
        }
        for key, build in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = build(d[key])
        if "planes" in d:
            d["planes"] = tuple(d["planes"])
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Laptop-scale settings for 32^3 phantoms: depth-6 generator on 64x64 crops.

    He init and a larger step size let the 16-step run make visible progress.
    """
    base = TrainConfig(
        lr0=3e-4,
        batch_size=8,
        epochs=2,
        epoch_size=64,
        generator=GeneratorConfig(depth=6, base_width=32, init="he"),
        discriminator=DiscriminatorConfig(base_width=16),
        augment=AugmentConfig(pad_to=(72, 72), crop_to=(64, 64)),
        fusion_mode="3",
        vgg="random",
    )
    return replace(base, **overrides)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def seed_everything(seed: int, deterministic: bool):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _format(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    def __init__(self, path: Path, fields: Sequence[str] = LOG_FIELDS):
        self.path = Path(path)
        self.fields = tuple(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.fields)

    def append(self, row: Dict):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_format(row.get(k)) for k in self.fields])


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Optional[Discriminator]
    history: List[Dict[str, float]]
    checkpoints: List[Path]
    best_checkpoint: Optional[Path]
    dev_tables: Dict[int, List[MetricRow]] = field(default_factory=dict)


def _make_extractor(cfg: TrainConfig, dtype):
    if cfg.loss.weights["vgg"] <= 0:
        return None
    if cfg.vgg == "random":
        return random_vgg_extractor(seed=cfg.seed, width_div=8, dtype=dtype)
    return pretrained_vgg_extractor().to(dtype)


def evaluate_dev(
    gen: Callable,
    dev_cases: Sequence[NormalizedCase],
    target: str,
    mode: str = "9",
    multiple: int = 1,
) -> List[MetricRow]:
    """Fusion inference on each dev case, scored in normalized [0, 1] space."""
    rows = []
    for nc in dev_cases:
        case = nc.case
        result = fuse(gen, case, target, mode=mode, multiple=multiple)
        pred = np.clip(result.volume, 0.0, 1.0)
        ref = case.sequences[target].data
        if case.seg is None:
            log.warning("case %s has no segmentation; reporting whole-brain metrics", case.case_id)
            rows.append(evaluate_global(pred, ref, case.case_id))
        else:
            rows.append(evaluate_case(pred, ref, case.seg, case.case_id))
    return rows


def _dev_score(rows: Sequence[MetricRow]) -> float:
    m = mean_row(rows)
    vals = [v for v in (m.ssim_h, m.ssim_t) if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else -math.inf


def train(
    train_cases: Sequence[NormalizedCase],
    cfg: TrainConfig,
    out_dir,
    dev_cases: Sequence[NormalizedCase] = (),
    extractor=None,
    dtype=torch.float32,
    extra_meta: Optional[dict] = None,
    on_step: Optional[Callable[[Dict], None]] = None,
) -> TrainResult:
    """Train one generator for ``cfg.target_sequence``.

    Per step: one discriminator update (only when the adversarial term is
    on), then one generator update on the combined loss. Writes
    ``train_log.csv`` and ``ckpt/<target>/<epoch>.bin`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    target = cfg.target_sequence
    seed_everything(cfg.seed, cfg.deterministic)
    index = SliceIndex([nc.case for nc in train_cases], target, cfg.planes)
    if len(index) == 0:
        raise ArgumentError("no non-empty training slices")

    gen = Generator(cfg.generator).to(dtype)
    adversarial = cfg.loss.weights["adv"] > 0
    disc = Discriminator(cfg.discriminator).to(dtype) if adversarial else None
    if extractor is None:
        extractor = _make_extractor(cfg, dtype)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2)) if disc else None

    log_csv = CsvLog(out_dir / "train_log.csv")
    dev_csv = CsvLog(out_dir / "dev_log.csv", ("epoch", "ssim_h", "ssim_t", "psnr_h", "psnr_t", "score"))
    ckpt_dir = out_dir / "ckpt" / target
    chash = config_hash(cfg.to_dict())
    multiple = 2**cfg.generator.depth

    history, checkpoints, dev_tables = [], [], {}
    best, best_score = None, -math.inf
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for opt in (opt_g, opt_d):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
        gen.train()
        stream = list(epoch_sampler(index.entries, cfg.epoch_size, cfg.seed, epoch))
        for start in range(0, len(stream), cfg.batch_size):
            idx = stream[start : start + cfg.batch_size]
            first_global = epoch * cfg.epoch_size + start
            x, y, m = (torch.from_numpy(a).to(dtype) for a in index.batch(idx, cfg.augment, cfg.seed, first_global))

            d_loss = None
            if disc is not None:
                with torch.no_grad():
                    fake = gen(x)
                d_real = disc(disc.make_input(y, x))
                d_fake = disc(disc.make_input(fake, x))
                d_loss = lsgan_d_loss(d_real, d_fake)
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

            yhat = gen(x)
            d_fake_g = None
            if disc is not None:
                # gradients flow to the generator only; the discriminator is frozen for this pass
                disc.requires_grad_(False)
                d_fake_g = disc(disc.make_input(yhat, x))
            report = combined_loss(yhat, y, m, d_fake_g, cfg.loss, extractor)
            values = report.scalars()
            if d_loss is not None:
                values["d_loss"] = float(d_loss.detach())
            if not all(math.isfinite(v) for v in values.values()):
                raise NonFiniteLossError(f"non-finite loss at step {step}: {values}")
            opt_g.zero_grad(set_to_none=True)
            report.total.backward()
            opt_g.step()
            if disc is not None:
                disc.requires_grad_(True)

            row = {"step": step, "epoch": epoch, "lr": lr, **values}
            history.append(row)
            log_csv.append(row)
            if on_step is not None:
                on_step({"report": report, "row": row, "generator": gen, "discriminator": disc})
            step += 1

        dev_rows = []
        if dev_cases and (epoch + 1) % cfg.dev_every == 0:
            gen.eval()
            dev_rows = evaluate_dev(as_predictor(gen), dev_cases, target, cfg.fusion_mode, multiple)
            dev_tables[epoch] = dev_rows
            write_metrics_csv(dev_rows, out_dir / f"dev_metrics_epoch{epoch:03d}.csv")
            m = mean_row(dev_rows)
            score = _dev_score(dev_rows)
            dev_csv.append({"epoch": epoch, "ssim_h": m.ssim_h, "ssim_t": m.ssim_t, "psnr_h": m.psnr_h, "psnr_t": m.psnr_t, "score": score})
        dev_summary = asdict(mean_row(dev_rows)) if dev_rows else {}
        meta = CheckpointMeta(epoch, step, dev_summary, chash, target, dict(extra_meta or {}))
        path = ckpt_dir / f"{epoch}.bin"
        save_checkpoint(path, gen, meta, disc)
        checkpoints.append(path)
        score = _dev_score(dev_rows) if dev_rows else -math.inf
        if best is None or score > best_score or not dev_rows:
            best, best_score = path, score
        log.info("epoch %d done (step %d, lr %.3g, dev score %s)", epoch, step, lr, score)

    if best is not None:
        (ckpt_dir / "best.txt").write_text(best.name + "\n")
    return TrainResult(gen, disc, history, checkpoints, best, dev_tables)
