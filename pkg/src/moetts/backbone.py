"""Text encoder, posterior encoder, coupling flow and their losses (toy-scale VITS backbone)."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from . import dsp

LOGSTD_MIN, LOGSTD_MAX = -9.0, 2.0


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a ``(batch, channels, time)`` tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ConvFeedForward(nn.Module):
    def __init__(self, channels: int, filter_channels: int, kernel_size: int = 3, dropout: float = 0.0):
        super().__init__()
        self.conv_1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv_2 = nn.Conv1d(filter_channels, channels, kernel_size, padding=kernel_size // 2)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = torch.relu(self.conv_1(x * mask))
        x = self.drop(x)
        return self.conv_2(x * mask) * mask


class SelfAttention(nn.Module):
    """Multi-head self-attention on ``(batch, channels, time)`` with padding mask."""

    def __init__(self, channels: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, n_heads, dropout=dropout, batch_first=True)

    def forward(self, x, mask):
        h = x.transpose(1, 2)
        pad = ~mask[:, 0].bool()
        out, _ = self.attn(h, h, h, key_padding_mask=pad, need_weights=False)
        return out.transpose(1, 2) * mask


def sinusoidal_positions(length: int, channels: int, device=None) -> torch.Tensor:
    pos = torch.arange(length, device=device, dtype=torch.float32)[:, None]
    inv = torch.exp(torch.arange(0, channels, 2, device=device, dtype=torch.float32)
                    * (-math.log(10000.0) / channels))
    pe = torch.zeros(length, channels, device=device)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe.T


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, n_heads: int, filter_channels: int, kernel_size: int = 3,
                 dropout: float = 0.0):
        super().__init__()
        self.attn = SelfAttention(channels, n_heads, dropout)
        self.norm_1 = ChannelLayerNorm(channels)
        self.ffn = ConvFeedForward(channels, filter_channels, kernel_size, dropout)
        self.norm_2 = ChannelLayerNorm(channels)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.norm_1(x + self.drop(self.attn(x, mask)))
        x = self.norm_2(x + self.drop(self.ffn(x, mask)))
        return x * mask


class TextEncoder(nn.Module):
    """Phoneme ids to hidden sequence ``h_text`` and per-position prior statistics."""

    def __init__(self, n_vocab: int, channels: int = 192, filter_channels: int = 768, n_heads: int = 2,
                 n_layers: int = 2, kernel_size: int = 3, dropout: float = 0.1):
        super().__init__()
        self.n_vocab = n_vocab
        self.channels = channels
        self.emb = nn.Embedding(n_vocab, channels)
        nn.init.normal_(self.emb.weight, 0.0, channels ** -0.5)
        self.blocks = nn.ModuleList(
            TransformerBlock(channels, n_heads, filter_channels, kernel_size, dropout) for _ in range(n_layers)
        )
        self.proj = nn.Conv1d(channels, 2 * channels, 1)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        """Returns ``(h_text, prior_mean, prior_logstd, mask)``; mask is ``(B, 1, T)``."""
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.n_vocab):
            raise ValueError(f"phoneme id out of range [0, {self.n_vocab})")
        x = self.emb(ids).transpose(1, 2) * math.sqrt(self.channels)
        mask = sequence_mask(lengths, ids.shape[1]).unsqueeze(1).to(x.dtype)
        x = (x + sinusoidal_positions(ids.shape[1], self.channels, ids.device).to(x.dtype)) * mask
        for block in self.blocks:
            x = block(x, mask)
        stats = self.proj(x) * mask
        m, logs = stats.split(self.channels, dim=1)
        return x, m, logs.clamp(LOGSTD_MIN, LOGSTD_MAX), mask


class WaveNetStack(nn.Module):
    """Non-causal gated dilated conv stack with global conditioning (speaker vector)."""

    def __init__(self, channels: int, kernel_size: int, dilation_rate: int, n_layers: int,
                 gin_channels: int = 0):
        super().__init__()
        self.channels = channels
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        for i in range(n_layers):
            dil = dilation_rate ** i
            pad = (kernel_size * dil - dil) // 2
            self.in_layers.append(nn.Conv1d(channels, 2 * channels, kernel_size, dilation=dil, padding=pad))
            out = 2 * channels if i < n_layers - 1 else channels
            self.res_skip.append(nn.Conv1d(channels, out, 1))
        self.cond = nn.Linear(gin_channels, 2 * channels * n_layers) if gin_channels else None

    def forward(self, x, mask, g=None):
        out = torch.zeros_like(x)
        if self.cond is not None and g is not None:
            g_all = self.cond(g).unsqueeze(-1).chunk(len(self.in_layers), dim=1)
        for i, (conv, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            h = conv(x)
            if self.cond is not None and g is not None:
                h = h + g_all[i]
            a, b = h.chunk(2, dim=1)
            acts = torch.tanh(a) * torch.sigmoid(b)
            rs_out = rs(acts)
            if i < len(self.in_layers) - 1:
                res, skip = rs_out.chunk(2, dim=1)
                x = (x + res) * mask
                out = out + skip
            else:
                out = out + rs_out
        return out * mask


class PosteriorEncoder(nn.Module):
    """Linear spectrogram plus speaker vector to latent ``z`` with posterior statistics."""

    def __init__(self, in_channels: int = 513, out_channels: int = 192, hidden_channels: int = 192,
                 kernel_size: int = 5, dilation_rate: int = 1, n_layers: int = 4, gin_channels: int = 192):
        super().__init__()
        self.out_channels = out_channels
        self.pre = nn.Conv1d(in_channels, hidden_channels, 1)
        self.enc = WaveNetStack(hidden_channels, kernel_size, dilation_rate, n_layers, gin_channels)
        self.proj = nn.Conv1d(hidden_channels, 2 * out_channels, 1)

    def forward(self, spec: torch.Tensor, lengths: torch.Tensor, g: torch.Tensor | None = None,
                noise_scale: float = 1.0, generator: torch.Generator | None = None):
        """Returns ``(z, mean, logstd, mask)``; ``noise_scale=0`` gives ``z = mean``."""
        if torch.isnan(spec).any():
            raise ValueError("NaN in spectrogram input")
        mask = sequence_mask(lengths, spec.shape[-1]).unsqueeze(1).to(spec.dtype)
        x = self.pre(spec) * mask
        x = self.enc(x, mask, g)
        m, logs = (self.proj(x) * mask).split(self.out_channels, dim=1)
        logs = logs.clamp(LOGSTD_MIN, LOGSTD_MAX)
        z = m
        if noise_scale:
            eps = torch.randn(m.shape, generator=generator, dtype=m.dtype, device=m.device)
            z = m + eps * noise_scale * torch.exp(logs)
        return z * mask, m, logs, mask


class AffineCoupling(nn.Module):
    """Affine coupling with bounded log-scale; zero-initialised output, so it starts as identity."""

    def __init__(self, channels: int, hidden_channels: int, kernel_size: int = 5, n_layers: int = 2,
                 gin_channels: int = 0):
        super().__init__()
        if channels % 2:
            raise ValueError("coupling needs an even channel count")
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden_channels, 1)
        self.enc = WaveNetStack(hidden_channels, kernel_size, 1, n_layers, gin_channels)
        self.post = nn.Conv1d(hidden_channels, 2 * self.half, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _shift_logscale(self, x0, mask, g):
        h = self.enc(self.pre(x0) * mask, mask, g)
        shift, raw = self.post(h).chunk(2, dim=1)
        return shift * mask, torch.tanh(raw) * mask

    def forward(self, x, mask, g=None, reverse: bool = False):
        x0, x1 = x.split(self.half, dim=1)
        shift, logscale = self._shift_logscale(x0, mask, g)
        if not reverse:
            x1 = (shift + x1 * torch.exp(logscale)) * mask
            logdet = logscale.sum(dim=(1, 2))
        else:
            x1 = (x1 - shift) * torch.exp(-logscale) * mask
            logdet = -logscale.sum(dim=(1, 2))
        return torch.cat([x0, x1], dim=1), logdet


class CouplingFlow(nn.Module):
    """Stack of affine couplings with channel flips in between.

    With an even number of couplings the freshly initialised flow is the identity.
    """

    def __init__(self, channels: int = 192, hidden_channels: int = 192, n_flows: int = 2,
                 kernel_size: int = 5, n_layers: int = 2, gin_channels: int = 192):
        super().__init__()
        self.channels = channels
        self.couplings = nn.ModuleList(
            AffineCoupling(channels, hidden_channels, kernel_size, n_layers, gin_channels) for _ in range(n_flows)
        )

    def forward(self, z, mask, g=None, reverse: bool = False):
        """Returns ``(output, logdet)``; ``reverse=True`` inverts the map."""
        if z.shape[1] != self.channels:
            raise ValueError(f"flow expects {self.channels} channels, got {z.shape[1]}")
        logdet = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        if not reverse:
            for c in self.couplings:
                z, ld = c(z, mask, g)
                z = torch.flip(z, [1])
                logdet = logdet + ld
        else:
            for c in reversed(self.couplings):
                z = torch.flip(z, [1])
                z, ld = c(z, mask, g, reverse=True)
                logdet = logdet + ld
        return z, logdet


def gaussian_log_likelihood(z_p, prior_mean, prior_logstd) -> torch.Tensor:
    """Log-density of every frame under every text position's prior.

    Args:
        z_p: Flow output ``(B, C, frames)``.
        prior_mean, prior_logstd: ``(B, C, text_len)``.

    Returns:
        ``(B, text_len, frames)`` log-likelihood matrix for alignment search.
    """
    inv_var = torch.exp(-2 * prior_logstd)
    t1 = torch.sum(-0.5 * math.log(2 * math.pi) - prior_logstd, dim=1).unsqueeze(-1)
    t2 = torch.einsum("bct,bcs->bts", inv_var, -0.5 * z_p ** 2)
    t3 = torch.einsum("bct,bcs->bts", prior_mean * inv_var, z_p)
    t4 = torch.sum(-0.5 * prior_mean ** 2 * inv_var, dim=1).unsqueeze(-1)
    return t1 + t2 + t3 + t4


def kl_loss(post_mean, post_logstd, prior_mean, prior_logstd, mask=None, z_p=None, logdet=None):
    """KL between the posterior and the alignment-expanded text prior.

    Without ``z_p`` the closed-form Gaussian KL is returned (exact for an
    identity flow). With ``z_p`` (the flow image of a posterior sample) the
    single-sample estimate is used, corrected by the flow log-determinant.
    The result is averaged over unmasked elements.
    """
    if post_mean.shape[-1] != prior_mean.shape[-1]:
        raise ValueError(f"frame mismatch: {post_mean.shape[-1]} vs {prior_mean.shape[-1]}")
    if mask is None:
        mask = torch.ones_like(post_mean[:, :1]) if post_mean.ndim == 3 else torch.ones_like(post_mean)
    if z_p is None:
        kl = (prior_logstd - post_logstd - 0.5
              + 0.5 * (torch.exp(2 * post_logstd) + (post_mean - prior_mean) ** 2) * torch.exp(-2 * prior_logstd))
    else:
        kl = prior_logstd - post_logstd - 0.5 + 0.5 * (z_p - prior_mean) ** 2 * torch.exp(-2 * prior_logstd)
    kl = kl * mask
    count = (mask * torch.ones_like(kl)).sum()
    total = kl.sum()
    if logdet is not None:
        total = total - logdet.sum()
    return total / count


def mel_l1_loss(mel_hat, mel, weight: float = 45.0) -> torch.Tensor:
    if mel_hat.shape != mel.shape:
        raise ValueError(f"shape mismatch: {tuple(mel_hat.shape)} vs {tuple(mel.shape)}")
    return weight * torch.mean(torch.abs(mel_hat - mel))


def reconstruction_loss(w_hat, w, sample_rate: int, weight: float = 45.0,
                        cfg: dsp.StftConfig = dsp.MODEL_STFT, n_mels: int = 80) -> torch.Tensor:
    """Weighted L1 distance between log-mel spectrograms of two equal-length waveforms."""
    if w_hat.shape != w.shape:
        raise ValueError(f"length mismatch: {tuple(w_hat.shape)} vs {tuple(w.shape)}")
    return mel_l1_loss(dsp.log_mel(w_hat, sample_rate, cfg, n_mels), dsp.log_mel(w, sample_rate, cfg, n_mels), weight)
