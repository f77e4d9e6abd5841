"""U-Net generator with Mish/CeLU and a spectral-normalized PatchGAN discriminator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import torch
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .errors import FormatError, ShapeError

CHECKPOINT_MAGIC = "MRISYNTH-CKPT-v1"


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 9
    out_channels: int = 1
    depth: int = 8
    base_width: int = 32
    width_cap: int = 512
    # "normal": N(0, 0.02); "he": N(0, 2/fan_in), which trains faster over very few steps
    init: str = "normal"

    def widths(self) -> List[int]:
        return [min(self.base_width * 2**i, self.width_cap) for i in range(self.depth)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 2
    n_layers: int = 5
    base_width: int = 64
    conditional: bool = True
    # channel of the 9-channel stack used as the conditioning slice (center slice of the first input)
    cond_channel: int = 1
    n_power_iterations: int = 1


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        if cfg.depth < 1:
            raise ShapeError("generator depth must be >= 1")
        if cfg.init not in ("normal", "he"):
            raise ValueError(f"unknown init {cfg.init!r}")
        self.cfg = cfg
        widths = cfg.widths()
        self.encoder = nn.ModuleList()
        prev = cfg.in_channels
        for w in widths:
            self.encoder.append(nn.Sequential(nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.Mish()))
            prev = w
        # decoder level i upsamples to the resolution of encoder level i-1 and takes its skip
        skip_widths = [cfg.in_channels] + widths[:-1]
        out_widths = [cfg.base_width] + widths[:-1]
        self.decoder = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            block = nn.Sequential(
                nn.Conv2d(prev + skip_widths[level], out_widths[level], 3, stride=1, padding=1),
                nn.Mish(),
            )
            self.decoder.append(block)
            prev = out_widths[level]
        self.head = nn.Conv2d(prev, cfg.out_channels, 1)
        self.out_act = nn.CELU(alpha=1.0)
        init_weights(self, std=None if cfg.init == "he" else 0.02)

    def forward(self, x):
        size = 2**self.cfg.depth
        if x.shape[-1] % size or x.shape[-2] % size:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {size}")
        skips = [x]
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        skips.pop()
        for block in self.decoder:
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1))
        return self.out_act(self.head(h))


def patch_output_size(n: int, n_layers: int = 5) -> int:
    """Spatial size of the discriminator score map for an ``n``-pixel input side."""
    for k, s, p_lo, p_hi in _disc_layout(n_layers):
        n = (n + p_lo + p_hi - k) // s + 1
    return n


def _disc_layout(n_layers: int) -> List[Tuple[int, int, int, int]]:
    # (kernel, stride, pad_before, pad_after); all but the last two layers halve the size,
    # the penultimate trims one pixel and the final one keeps the size ('same' padding)
    layers = [(4, 2, 1, 1)] * (n_layers - 2) + [(4, 1, 1, 1), (4, 1, 1, 2)]
    return layers


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        if cfg.n_layers < 2:
            raise ShapeError("discriminator needs at least two layers")
        self.cfg = cfg
        in_ch = cfg.in_channels if cfg.conditional else 1
        self.in_channels = in_ch
        widths = [min(cfg.base_width * 2**i, 8 * cfg.base_width) for i in range(cfg.n_layers - 1)] + [1]
        layers = []
        prev = in_ch
        for i, ((k, s, p_lo, p_hi), w) in enumerate(zip(_disc_layout(cfg.n_layers), widths)):
            conv = init_weights(nn.Conv2d(prev, w, k, stride=s, padding=0))
            # wrapping after init lets the power iteration start from the final weights
            conv = spectral_norm(conv, n_power_iterations=cfg.n_power_iterations)
            layers.append(nn.ZeroPad2d((p_lo, p_hi, p_lo, p_hi)))
            layers.append(conv)
            if i < cfg.n_layers - 1:
                layers.append(nn.LeakyReLU(0.2))
            prev = w
        self.net = nn.Sequential(*layers)

    def convs(self) -> List[nn.Conv2d]:
        return [m for m in self.net if isinstance(m, nn.Conv2d)]

    def forward(self, pair):
        if pair.shape[1] != self.in_channels:
            raise ShapeError(f"discriminator expects {self.in_channels} channels, got {pair.shape[1]}")
        return self.net(pair)

    def make_input(self, candidate, stack):
        """Pair a candidate target slice with its conditioning slice from the 9-channel stack."""
        if not self.cfg.conditional:
            return candidate
        c = self.cfg.cond_channel
        return torch.cat([candidate, stack[:, c : c + 1]], dim=1)


def init_weights(module: nn.Module, std: Optional[float] = 0.02):
    """Gaussian(0, std) weights and zero biases for every plain conv layer.

    ``std=None`` uses the fan-in scaled He std, sqrt(2 / fan_in).
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d) and not hasattr(m, "parametrizations"):
            s = std if std is not None else (2.0 / (m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1])) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, s)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def config_hash(*blocks) -> str:
    payload = json.dumps([b if isinstance(b, dict) else asdict(b) for b in blocks], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class CheckpointMeta:
    epoch: int
    global_step: int
    dev_metrics: dict = field(default_factory=dict)
    config_hash: str = ""
    target: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, generator: Generator, meta: CheckpointMeta, discriminator: Optional[Discriminator] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "generator_config": asdict(generator.cfg),
        "generator": {k: v.detach().clone() for k, v in generator.state_dict().items()},
        "meta": asdict(meta),
    }
    if discriminator is not None:
        payload["discriminator_config"] = asdict(discriminator.cfg)
        payload["discriminator"] = {k: v.detach().clone() for k, v in discriminator.state_dict().items()}
    torch.save(payload, str(path))


def load_checkpoint(path):
    """Return ``(generator, meta, discriminator_or_None)``; the generator is in eval mode."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    gen = Generator(GeneratorConfig(**payload["generator_config"]))
    gen.load_state_dict(payload["generator"])
    gen.eval()
    disc = None
    if "discriminator" in payload:
        disc = Discriminator(DiscriminatorConfig(**payload["discriminator_config"]))
        disc.load_state_dict(payload["discriminator"])
    return gen, CheckpointMeta(**payload["meta"]), disc
