"""Multi-resolution and sub-band waveform discriminators with least-squares GAN losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from . import dsp


@dataclass
class DiscriminatorOutput:
    """Per-scale score maps and intermediate feature maps."""

    logits: list[torch.Tensor]
    features: list[list[torch.Tensor]]


@dataclass
class CombdConfig:
    resolutions: tuple[int, ...] = (1, 2, 4)
    shared_params: bool = True
    channels: tuple[int, ...] = (16, 32, 64, 64)
    groups: tuple[int, ...] = (1, 4, 16, 16)

    def __post_init__(self):
        r = tuple(self.resolutions)
        if not r or r[0] != 1 or list(r) != sorted(r):
            raise ValueError(f"resolutions must be ascending and start at 1, got {r}")


@dataclass
class SbdConfig:
    pqmf_bands: int = 16
    band_groups: tuple[tuple[int, int], ...] = ((0, 8), (8, 16), (0, 16))
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    channels: tuple[int, ...] = (32, 64, 64)
    kernel_size: int = 3
    pqmf_taps: int = 256

    def __post_init__(self):
        covered = set()
        for lo, hi in self.band_groups:
            if not 0 <= lo < hi <= self.pqmf_bands:
                raise ValueError(f"band group ({lo}, {hi}) outside [0, {self.pqmf_bands})")
            covered.update(range(lo, hi))
        if covered != set(range(self.pqmf_bands)):
            raise ValueError("band groups must cover every band")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be >= 1")


class ScaleDiscriminator(nn.Module):
    """MelGAN-style waveform discriminator (grouped strided convs)."""

    def __init__(self, channels=(16, 32, 64, 64), groups=(1, 4, 16, 16)):
        super().__init__()
        layers = [weight_norm(nn.Conv1d(1, channels[0], 15, 1, padding=7))]
        for c_in, c_out, g in zip(channels[:-1], channels[1:], groups[1:]):
            layers.append(weight_norm(nn.Conv1d(c_in, c_out, 41, 4, groups=g, padding=20)))
        layers.append(weight_norm(nn.Conv1d(channels[-1], channels[-1], 5, 1, padding=2)))
        self.layers = nn.ModuleList(layers)
        self.post = weight_norm(nn.Conv1d(channels[-1], 1, 3, 1, padding=1))
        self.min_length = 4 ** (len(channels) - 1)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.1)
            feats.append(x)
        return self.post(x).flatten(1), feats


def pool_to_resolution(w: torch.Tensor, factor: int) -> torch.Tensor:
    """Anti-aliased 2x average pooling applied ``log2(factor)`` times."""
    while factor > 1:
        w = F.avg_pool1d(w, 4, 2, padding=1, count_include_pad=False)
        factor //= 2
    return w


class CoMBD(nn.Module):
    """One multi-scale discriminator shared across pooled views of the waveform."""

    def __init__(self, cfg: CombdConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CombdConfig()
        for f in cfg.resolutions:
            if f & (f - 1):
                raise ValueError(f"resolution factor {f} is not a power of two")
        n = 1 if cfg.shared_params else len(cfg.resolutions)
        self.discs = nn.ModuleList(ScaleDiscriminator(cfg.channels, cfg.groups) for _ in range(n))

    def forward(self, w: torch.Tensor) -> DiscriminatorOutput:
        if w.ndim == 2:
            w = w.unsqueeze(1)
        need = self.cfg.resolutions[-1] * self.discs[0].min_length
        if w.shape[-1] < need:
            raise ValueError(f"waveform of {w.shape[-1]} samples is shorter than {need}")
        logits, feats = [], []
        for i, f in enumerate(self.cfg.resolutions):
            disc = self.discs[0 if self.cfg.shared_params else i]
            score, fm = disc(pool_to_resolution(w, f))
            logits.append(score)
            feats.append(fm)
        return DiscriminatorOutput(logits, feats)


class MDC(nn.Module):
    """Parallel dilated convolutions summed, then a strided projection."""

    def __init__(self, c_in, c_out, kernel_size, dilations, stride):
        super().__init__()
        self.convs = nn.ModuleList(
            weight_norm(nn.Conv1d(c_in, c_out, kernel_size, dilation=d, padding=d * (kernel_size - 1) // 2))
            for d in dilations
        )
        self.post = weight_norm(nn.Conv1d(c_out, c_out, 3, stride, padding=1))

    def forward(self, x):
        x = sum(conv(x) for conv in self.convs) / len(self.convs)
        return F.leaky_relu(self.post(F.leaky_relu(x, 0.1)), 0.1)


class SubBandStack(nn.Module):
    def __init__(self, in_bands, channels, kernel_size, dilations):
        super().__init__()
        dims = (in_bands, *channels)
        self.layers = nn.ModuleList(
            MDC(c_in, c_out, kernel_size, dilations, stride=1 if i == 0 else 2)
            for i, (c_in, c_out) in enumerate(zip(dims[:-1], dims[1:]))
        )
        self.post = weight_norm(nn.Conv1d(dims[-1], 1, 3, padding=1))

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.post(x).flatten(1), feats


class SBD(nn.Module):
    """PQMF sub-bands routed by group through dilated conv stacks."""

    def __init__(self, cfg: SbdConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SbdConfig()
        self.bank = dsp.default_pqmf(cfg.pqmf_bands, cfg.pqmf_taps)
        self.register_buffer("analysis", torch.from_numpy(self.bank.analysis_filters).float()[:, None, :],
                             persistent=False)
        self.stacks = nn.ModuleList(
            SubBandStack(hi - lo, cfg.channels, cfg.kernel_size, cfg.dilations) for lo, hi in cfg.band_groups
        )

    def bands(self, w: torch.Tensor) -> torch.Tensor:
        if w.ndim == 2:
            w = w.unsqueeze(1)
        m = self.cfg.pqmf_bands
        if w.shape[-1] % m:
            raise ValueError(f"length {w.shape[-1]} not divisible by {m} bands")
        pad = self.bank.taps // 2
        return F.conv1d(F.pad(w, (pad, pad)), self.analysis.to(w.dtype), stride=m)

    def forward(self, w: torch.Tensor) -> DiscriminatorOutput:
        x = self.bands(w)
        logits, feats = [], []
        for (lo, hi), stack in zip(self.cfg.band_groups, self.stacks):
            score, fm = stack(x[:, lo:hi])
            logits.append(score)
            feats.append(fm)
        return DiscriminatorOutput(logits, feats)


class Discriminators(nn.Module):
    def __init__(self, combd: CombdConfig | None = None, sbd: SbdConfig | None = None):
        super().__init__()
        self.combd = CoMBD(combd)
        self.sbd = SBD(sbd)

    def forward(self, w) -> list[DiscriminatorOutput]:
        return [self.combd(w), self.sbd(w)]


def _check_structure(real, fake):
    if len(real) != len(fake):
        raise ValueError(f"{len(real)} real outputs vs {len(fake)} fake outputs")
    for r, f in zip(real, fake):
        if len(r.logits) != len(f.logits):
            raise ValueError("real/fake score map counts differ")
        for a, b in zip(r.logits, f.logits):
            if a.shape != b.shape:
                raise ValueError(f"score map shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_losses(real, fake):
    """Least-squares GAN losses ``(discriminator_loss, generator_loss)``.

    Discriminator outputs of the fake branch should be computed on a detached
    waveform for the first value and on the live one for the second.
    """
    real = [real] if isinstance(real, DiscriminatorOutput) else real
    fake = [fake] if isinstance(fake, DiscriminatorOutput) else fake
    _check_structure(real, fake)
    l_adv = 0.0
    l_gen = 0.0
    for r, f in zip(real, fake):
        for dr, dg in zip(r.logits, f.logits):
            l_adv = l_adv + torch.mean((dr - 1) ** 2) + torch.mean(dg ** 2)
            l_gen = l_gen + torch.mean((dg - 1) ** 2)
    return l_adv, l_gen


def discriminator_loss(real, fake) -> torch.Tensor:
    return adversarial_losses(real, fake)[0]


def generator_adversarial_loss(fake) -> torch.Tensor:
    fake = [fake] if isinstance(fake, DiscriminatorOutput) else fake
    return sum(torch.mean((dg - 1) ** 2) for f in fake for dg in f.logits)


def feature_matching_loss(real_feats, fake_feats) -> torch.Tensor:
    """Mean over all feature maps of their mean absolute difference."""
    flat_r = _flatten(real_feats)
    flat_f = _flatten(fake_feats)
    if len(flat_r) != len(flat_f):
        raise ValueError(f"{len(flat_r)} real feature maps vs {len(flat_f)} fake")
    terms = []
    for r, f in zip(flat_r, flat_f):
        if r.shape != f.shape:
            raise ValueError(f"feature shape mismatch {tuple(r.shape)} vs {tuple(f.shape)}")
        terms.append(torch.mean(torch.abs(r.detach() - f)))
    return sum(terms) / len(terms)


def _flatten(feats):
    if isinstance(feats, torch.Tensor):
        return [feats]
    if isinstance(feats, DiscriminatorOutput):
        return _flatten(feats.features)
    out = []
    for item in feats:
        out.extend(_flatten(item))
    return out
