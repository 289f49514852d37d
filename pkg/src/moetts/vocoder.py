"""ConvNeXt backbone with an ISTFT head: latent frames in, waveform out."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import dsp


@dataclass
class VocoderConfig:
    """Defaults are desk scale; ``VocoderConfig.full()`` gives 8 x (512, 1536)."""

    in_channels: int = 192
    blocks: int = 4
    hidden_dim: int = 192
    intermediate_dim: int = 384
    fft_size: int = 1024
    hop: int = 256
    gin_channels: int = 192
    kernel_size: int = 7
    head: str = "logmag-phase"
    zero_init_head: bool = False

    def __post_init__(self):
        for name in ("in_channels", "hidden_dim", "intermediate_dim", "fft_size", "hop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")

    @classmethod
    def full(cls, **kw):
        return cls(blocks=8, hidden_dim=512, intermediate_dim=1536, **kw)

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.fft_size, self.hop, self.fft_size)


@dataclass
class SpectralHeadOutput:
    magnitude: torch.Tensor
    phase: torch.Tensor

    def complex(self) -> torch.Tensor:
        return torch.polar(self.magnitude, self.phase)

    def wrapped_phase(self) -> torch.Tensor:
        # atan2 lands in [-pi, pi]; map -pi onto pi for the half-open range
        p = torch.atan2(torch.sin(self.phase), torch.cos(self.phase))
        return torch.where(p <= -math.pi, p + 2 * math.pi, p)


class ConvNeXtBlock(nn.Module):
    """Depthwise conv, LayerNorm, pointwise MLP and layer-scaled residual; stride 1 throughout."""

    def __init__(self, dim: int, intermediate_dim: int, kernel_size: int = 7, layer_scale: float = 1 / 8):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, intermediate_dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(intermediate_dim, dim)
        self.gamma = nn.Parameter(layer_scale * torch.ones(dim))
        self.residual = True

    def branch(self, x):
        h = self.dwconv(x).transpose(1, 2)
        h = self.pwconv2(self.act(self.pwconv1(self.norm(h))))
        return (self.gamma * h).transpose(1, 2)

    def forward(self, x):
        out = self.branch(x)
        return x + out if self.residual else out


class VocoderBackbone(nn.Module):
    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Conv1d(cfg.in_channels, cfg.hidden_dim, cfg.kernel_size, padding=cfg.kernel_size // 2)
        self.cond = nn.Linear(cfg.gin_channels, cfg.hidden_dim) if cfg.gin_channels else None
        self.norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-6)
        self.blocks = nn.ModuleList(
            ConvNeXtBlock(cfg.hidden_dim, cfg.intermediate_dim, cfg.kernel_size) for _ in range(cfg.blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-6)
        n_bins = cfg.fft_size // 2 + 1
        self.head = nn.Linear(cfg.hidden_dim, 2 * n_bins)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        else:
            nn.init.trunc_normal_(self.head.weight, std=0.02)
            nn.init.zeros_(self.head.bias)

    def project(self, z: torch.Tensor, g: torch.Tensor | None = None) -> torch.Tensor:
        if z.shape[1] != self.cfg.in_channels:
            raise ValueError(f"vocoder expects {self.cfg.in_channels} input channels, got {z.shape[1]}")
        x = self.embed(z)
        if self.cond is not None and g is not None:
            x = x + self.cond(g).unsqueeze(-1)
        return x

    def forward(self, x: torch.Tensor) -> SpectralHeadOutput:
        """``x`` is the projected ``(B, hidden_dim, frames)`` feature map."""
        if x.shape[1] != self.cfg.hidden_dim:
            raise ValueError(f"backbone expects width {self.cfg.hidden_dim}, got {x.shape[1]}")
        x = self.norm(x.transpose(1, 2)).transpose(1, 2)
        for block in self.blocks:
            x = block(x)
        h = self.head(self.final_norm(x.transpose(1, 2))).transpose(1, 2)
        log_mag, phase = h.chunk(2, dim=1)
        mag = torch.exp(torch.clamp(log_mag, max=math.log(1e2)))
        return SpectralHeadOutput(mag, phase)


class Vocoder(nn.Module):
    """``waveform = ISTFT(backbone(project(z) + project(s)))``."""

    def __init__(self, cfg: VocoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or VocoderConfig()
        self.stft_cfg = self.cfg.stft
        self.backbone = VocoderBackbone(self.cfg)

    def spectral(self, z, g=None) -> SpectralHeadOutput:
        if torch.isnan(z).any():
            raise ValueError("NaN in latent input")
        return self.backbone(self.backbone.project(z, g))

    def forward(self, z: torch.Tensor, g: torch.Tensor | None = None) -> torch.Tensor:
        """``z`` is ``(B, C, frames)``; returns ``(B, frames * hop)``."""
        head = self.spectral(z, g)
        return dsp.istft(head.complex(), self.stft_cfg)
