"""Training objectives: L1, tumor-masked L1, LSGAN, SSIM, VGG-conv perceptual and frequency losses.

All image tensors are ``(B, 1, H, W)`` unless noted. Every function is
differentiable w.r.t. ``yhat`` and works in float32 or float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Mapping, NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArgumentError, DependencyError, ShapeError

TERMS = ("l1", "l1_masked", "adv", "ssim", "vgg", "freq")
VGG_LAYERS = (2, 7, 14, 21, 28)
VGG_LAMBDAS = (0.0002, 0.0001, 0.0001, 0.0002, 0.0005)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossConfig:
    weights: Mapping[str, float] = field(default_factory=lambda: {"l1": 1.0})
    masked_w: float = 0.5
    ssim_kernel: int = 11
    ssim_sigma: float = 1.5
    freq_radius: float = 21
    vgg_layers: Sequence[int] = VGG_LAYERS
    vgg_lambdas: Sequence[float] = VGG_LAMBDAS

    def __post_init__(self):
        weights = {k: float(self.weights.get(k, 0.0)) for k in TERMS}
        unknown = set(self.weights) - set(TERMS)
        if unknown:
            raise ArgumentError(f"unknown loss terms {sorted(unknown)}")
        if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
            raise ArgumentError("loss weights must be >= 0 with at least one positive")
        if not 0.0 <= self.masked_w <= 1.0:
            raise ArgumentError("masked_w must lie in [0, 1]")
        if self.ssim_kernel < 1 or self.ssim_kernel % 2 == 0:
            raise ArgumentError("ssim_kernel must be odd")
        if self.freq_radius < 1:
            raise ArgumentError("freq_radius must be >= 1")
        if len(self.vgg_layers) != len(self.vgg_lambdas):
            raise ArgumentError("vgg_layers and vgg_lambdas differ in length")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "vgg_layers", tuple(int(i) for i in self.vgg_layers))
        object.__setattr__(self, "vgg_lambdas", tuple(float(x) for x in self.vgg_lambdas))

    def enabled(self):
        return tuple(k for k in TERMS if self.weights[k] > 0)

    def to_dict(self) -> dict:
        return {
            "weights": dict(self.weights),
            "masked_w": self.masked_w,
            "ssim_kernel": self.ssim_kernel,
            "ssim_sigma": self.ssim_sigma,
            "freq_radius": self.freq_radius,
            "vgg_layers": list(self.vgg_layers),
            "vgg_lambdas": list(self.vgg_lambdas),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        return cls(**dict(d))


# the ablation settings compared in the experiments, plus the tuned combination
PRESETS: Dict[str, LossConfig] = {
    "l1": LossConfig({"l1": 1.0}),
    "l1m": LossConfig({"l1_masked": 1.0}),
    "l1m_adv": LossConfig({"l1_masked": 1.0, "adv": 1.0}),
    "l1m_ssim": LossConfig({"l1_masked": 1.0, "ssim": 1.0}),
    "l1m_vgg": LossConfig({"l1_masked": 1.0, "vgg": 1.0}),
    "l1m_freq": LossConfig({"l1_masked": 1.0, "freq": 1.0}),
    "combined": LossConfig({"l1_masked": 5.0, "adv": 1.0, "ssim": 1.0, "vgg": 1.0, "freq": 1.0}),
}


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(yhat, y):
    _same_shape(yhat, y)
    err = torch.abs(y - yhat)
    # per-sample sums, like the masked variant, so an all-ones mask reproduces this bit for bit
    dims = tuple(range(1, err.ndim))
    return (err.sum(dim=dims) / err[0].numel()).mean()


class MaskedL1(NamedTuple):
    total: torch.Tensor
    tumor: torch.Tensor
    healthy: torch.Tensor


def _region_mean(err, m):
    """Per-sample mean of ``err`` over ``m``; zero for samples whose region is empty."""
    dims = tuple(range(1, err.ndim))
    count = m.sum(dim=dims)
    total = (err * m).sum(dim=dims)
    return torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))


def masked_l1_loss(yhat, y, tumor_mask, w: float = 0.5) -> MaskedL1:
    """``w * L1(tumor) + (1 - w) * L1(healthy)`` with per-region means, averaged over the batch."""
    _same_shape(yhat, y)
    if tumor_mask.shape != y.shape:
        raise ShapeError(f"mask shape {tuple(tumor_mask.shape)} differs from image {tuple(y.shape)}")
    m = tumor_mask.to(y.dtype)
    if not torch.all((m == 0) | (m == 1)):
        raise ArgumentError("tumor mask must be binary")
    err = torch.abs(y - yhat)
    tumor = _region_mean(err, m).mean()
    healthy = _region_mean(err, 1 - m).mean()
    return MaskedL1(w * tumor + (1 - w) * healthy, tumor, healthy)


def lsgan_d_loss(d_real, d_fake):
    return torch.mean((d_real - 1) ** 2) + torch.mean(d_fake**2)


def lsgan_g_loss(d_fake):
    return torch.mean((d_fake - 1) ** 2)


def gaussian_kernel1d(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur2d(x, g):
    k = g.numel()
    pad = k // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, g.view(1, 1, 1, k))
    return F.conv2d(x, g.view(1, 1, k, 1))


def ssim_map(yhat, y, kernel_size: int = 11, sigma: float = 1.5, data_range: float = 1.0):
    """Gaussian-windowed SSIM, same spatial size as the input (reflect-padded borders)."""
    _same_shape(yhat, y)
    pad = kernel_size // 2
    if min(y.shape[-2:]) <= pad:
        raise ShapeError(f"image {tuple(y.shape[-2:])} too small for a {kernel_size}-tap window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_kernel1d(kernel_size, sigma, dtype=y.dtype).to(y.device)
    b, c = y.shape[:2]
    a = yhat.reshape(b * c, 1, *y.shape[-2:])
    r = y.reshape(b * c, 1, *y.shape[-2:])
    mu_a, mu_r = _blur2d(a, g), _blur2d(r, g)
    var_a = _blur2d(a * a, g) - mu_a**2
    var_r = _blur2d(r * r, g) - mu_r**2
    cov = _blur2d(a * r, g) - mu_a * mu_r
    num = (2 * mu_a * mu_r + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_r**2 + c1) * (var_a + var_r + c2)
    return (num / den).reshape(y.shape)


def ssim_loss(yhat, y, kernel_size: int = 11, sigma: float = 1.5):
    return torch.mean(torch.abs(1 - ssim_map(yhat, y, kernel_size, sigma)))


class FeatureExtractor(nn.Module):
    """Runs a VGG-style ``features`` stack and returns the outputs of selected layer indices."""

    def __init__(self, features: nn.Sequential, layers: Sequence[int] = VGG_LAYERS, normalize: bool = True):
        super().__init__()
        self.layers = tuple(layers)
        self.features = features[: max(self.layers) + 1]
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x) -> Dict[int, torch.Tensor]:
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.layers:
                out[i] = x
        return out


def vgg19_features(width_div: int = 1, pool: bool = True) -> nn.Sequential:
    """The VGG-19 ``features`` layout (same layer indices); widths optionally divided."""
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
    layers = []
    prev = 3
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2) if pool else nn.Identity())
        else:
            w = max(v // width_div, 1)
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.ReLU(inplace=False)]
            prev = w
    return nn.Sequential(*layers)


def random_vgg_extractor(seed: int = 0, width_div: int = 1, pool: bool = True, dtype=torch.float32) -> FeatureExtractor:
    """Frozen extractor with seeded random weights, for offline tests of the loss arithmetic."""
    gen = torch.Generator().manual_seed(seed)
    feats = vgg19_features(width_div, pool)
    for m in feats:
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * 9
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.copy_(torch.randn(m.bias.shape, generator=gen) * 0.01)
    return FeatureExtractor(feats).to(dtype)


def pretrained_vgg_extractor() -> FeatureExtractor:
    """ImageNet VGG-19 from torchvision; raises DependencyError if the weights cannot be obtained."""
    try:
        from torchvision.models import VGG19_Weights, vgg19

        model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise DependencyError(f"pretrained VGG-19 weights unavailable: {exc}") from exc
    return FeatureExtractor(model.features)


def vgg_loss(yhat, y, extractor: Optional[Callable], layers=VGG_LAYERS, lambdas=VGG_LAMBDAS):
    """``sum_l || lambda_l (phi_l(yhat) - phi_l(y)) ||^2`` per sample, averaged over the batch."""
    if extractor is None:
        raise DependencyError("vgg loss enabled but no feature extractor was provided")
    _same_shape(yhat, y)
    fa, fb = extractor(yhat), extractor(y)
    total = yhat.new_zeros(())
    for layer, lam in zip(layers, lambdas):
        diff = lam * (fa[layer] - fb[layer])
        total = total + (diff**2).sum()
    return total / y.shape[0]


def low_freq_mask(h: int, w: int, radius: float, device=None, dtype=torch.float32):
    """Disk of ``radius`` bins around the zero frequency of a shifted spectrum."""
    r = torch.arange(h, device=device, dtype=torch.float64) - h // 2
    c = torch.arange(w, device=device, dtype=torch.float64) - w // 2
    dist = torch.sqrt(r[:, None] ** 2 + c[None, :] ** 2)
    return (dist <= radius).to(dtype)


class FreqLoss(NamedTuple):
    total: torch.Tensor
    low: torch.Tensor
    high: torch.Tensor


def amplitude_spectrum(x):
    return torch.abs(torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1)))


def freq_loss(yhat, y, radius: float = 21) -> FreqLoss:
    """Spectral-magnitude L1 split into a low-frequency disk and its complement.

    Both parts are averaged over all bins, so ``total == low + high``.
    """
    _same_shape(yhat, y)
    diff = torch.abs(amplitude_spectrum(y) - amplitude_spectrum(yhat))
    m = low_freq_mask(*y.shape[-2:], radius, device=y.device, dtype=diff.dtype)
    low = torch.mean(diff * m)
    high = torch.mean(diff * (1 - m))
    return FreqLoss(low + high, low, high)


@dataclass
class LossReport:
    terms: Dict[str, torch.Tensor]
    total: torch.Tensor
    weights: Dict[str, float]
    parts: Dict[str, torch.Tensor] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def combined_loss(yhat, y, mask, d_fake, cfg: LossConfig, extractor: Optional[Callable] = None) -> LossReport:
    """Weighted sum of the enabled terms; disabled terms are never evaluated."""
    terms: Dict[str, torch.Tensor] = {}
    parts: Dict[str, torch.Tensor] = {}
    w = cfg.weights
    if w["l1"] > 0:
        terms["l1"] = l1_loss(yhat, y)
    if w["l1_masked"] > 0:
        ml1 = masked_l1_loss(yhat, y, mask, cfg.masked_w)
        terms["l1_masked"] = ml1.total
        parts["l1_tumor"], parts["l1_healthy"] = ml1.tumor, ml1.healthy
    if w["adv"] > 0:
        if d_fake is None:
            raise ArgumentError("adversarial term enabled but no discriminator scores given")
        terms["adv"] = lsgan_g_loss(d_fake)
    if w["ssim"] > 0:
        terms["ssim"] = ssim_loss(yhat, y, cfg.ssim_kernel, cfg.ssim_sigma)
    if w["vgg"] > 0:
        terms["vgg"] = vgg_loss(yhat, y, extractor, cfg.vgg_layers, cfg.vgg_lambdas)
    if w["freq"] > 0:
        fl = freq_loss(yhat, y, cfg.freq_radius)
        terms["freq"] = fl.total
        parts["freq_low"], parts["freq_high"] = fl.low, fl.high
    total = None
    for k in TERMS:
        if k in terms:
            contrib = w[k] * terms[k]
            total = contrib if total is None else total + contrib
    return LossReport(terms, total, {k: w[k] for k in terms}, parts)


def with_weights(cfg: LossConfig, **weights) -> LossConfig:
    return replace(cfg, weights={**cfg.weights, **weights})
