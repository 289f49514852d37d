"""Mixture-of-experts duration predictor with speaker-conditioned switch routing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ChannelLayerNorm, SelfAttention


@dataclass
class MoeDpConfig:
    channels: int = 192
    conv_blocks: int = 2
    kernel_size: int = 3
    moe_blocks: int = 2
    n_experts: int = 8
    n_heads: int = 4
    expert_hidden: int = 384
    top_k: int = 1
    alpha: float = 0.01
    dropout: float = 0.1
    gin_channels: int = 192

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got k={self.top_k}, N={self.n_experts}")
        for name in ("channels", "conv_blocks", "kernel_size", "n_experts", "n_heads", "expert_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class RouterState:
    """Routing decision for a flat set of tokens.

    ``probs`` is ``(tokens, N)``; ``selected`` is ``(tokens, k)`` ordered by
    decreasing probability, exact ties resolved toward the lower expert index.
    """

    probs: torch.Tensor
    selected: torch.Tensor

    @property
    def n_experts(self) -> int:
        return self.probs.shape[-1]

    @property
    def top_k(self) -> int:
        return self.selected.shape[-1]


@dataclass
class LoadStats:
    """Per-batch expert load: token fractions ``f``, mean probabilities ``P`` and token count."""

    f: torch.Tensor
    P: torch.Tensor
    n_tokens: int
    counts: torch.Tensor

    def entropy(self) -> float:
        """Entropy (nats) of the argmax-assignment histogram."""
        return assignment_entropy(self.counts.cpu().numpy())


def assignment_entropy(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    p = c[c > 0] / c.sum()
    return float(-(p * np.log(p)).sum())


def topk_stable(probs: torch.Tensor, k: int) -> torch.Tensor:
    order = torch.sort(probs, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def route(x_tok: torch.Tensor, s: torch.Tensor, router: nn.Linear, top_k: int = 1) -> RouterState:
    """Softmax routing of ``x + s``; ``x_tok`` is ``(tokens, C)``, ``s`` broadcasts against it."""
    if x_tok.shape[-1] != s.shape[-1]:
        raise ValueError(f"token width {x_tok.shape[-1]} != speaker width {s.shape[-1]}")
    logits = router(x_tok + s)
    if torch.isnan(logits).any():
        raise ValueError("NaN router logits")
    probs = torch.softmax(logits, dim=-1)
    return RouterState(probs, topk_stable(probs, top_k))


def load_stats(probs: torch.Tensor) -> LoadStats:
    """Token fractions by argmax assignment and mean routing probabilities over a batch of tokens."""
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need a non-empty (tokens, N) probability matrix")
    n_tok, n_exp = probs.shape
    # argmax picks the first maximum, i.e. the lowest index on ties
    counts = torch.bincount(torch.argmax(probs, dim=-1), minlength=n_exp)
    f = counts.to(probs.dtype) / n_tok
    P = probs.mean(dim=0)
    return LoadStats(f, P, n_tok, counts)


def load_balancing_loss(probs: torch.Tensor, alpha: float = 0.01) -> torch.Tensor:
    """``alpha * N * sum_i f_i * P_i``; gradients flow through ``P`` only."""
    stats = load_stats(probs)
    return alpha * probs.shape[-1] * torch.sum(stats.f.detach() * stats.P)


class Expert(nn.Module):
    def __init__(self, channels: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc_1 = nn.Linear(channels, hidden)
        self.fc_2 = nn.Linear(hidden, channels)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc_2(self.drop(F.relu(self.fc_1(x))))


def moe_combine(x_tok: torch.Tensor, state: RouterState, experts) -> torch.Tensor:
    """``y = sum_{i in selected} p_i * E_i(x)``, evaluating each expert only on its tokens."""
    y = torch.zeros_like(x_tok)
    for i, expert in enumerate(experts):
        hit = state.selected == i
        tok = hit.any(dim=-1).nonzero(as_tuple=True)[0]
        if tok.numel() == 0:
            continue
        out = expert(x_tok[tok])
        if out.shape[-1] != x_tok.shape[-1]:
            raise ValueError(f"expert {i} output width {out.shape[-1]} != {x_tok.shape[-1]}")
        y = y.index_add(0, tok, state.probs[tok, i:i + 1] * out)
    return y


def dense_mixture(x_tok: torch.Tensor, probs: torch.Tensor, experts) -> torch.Tensor:
    """Reference: every expert on every token, weighted by its probability."""
    outs = torch.stack([e(x_tok) for e in experts], dim=-1)
    return torch.einsum("tcn,tn->tc", outs, probs)


class SwitchFeedForward(nn.Module):
    """Routed expert layer applied to flattened tokens."""

    def __init__(self, channels: int, hidden: int, n_experts: int, top_k: int = 1, dropout: float = 0.0):
        super().__init__()
        self.top_k = top_k
        self.router = nn.Linear(channels, n_experts)
        nn.init.normal_(self.router.weight, 0.0, 0.02)
        nn.init.zeros_(self.router.bias)
        self.experts = nn.ModuleList(Expert(channels, hidden, dropout) for _ in range(n_experts))

    def forward(self, x_tok: torch.Tensor, s_tok: torch.Tensor):
        state = route(x_tok, s_tok, self.router, self.top_k)
        return moe_combine(x_tok, state, self.experts), state


class SwitchTransformerBlock(nn.Module):
    def __init__(self, cfg: MoeDpConfig):
        super().__init__()
        self.attn = SelfAttention(cfg.channels, cfg.n_heads, cfg.dropout)
        self.norm_1 = ChannelLayerNorm(cfg.channels)
        self.moe = SwitchFeedForward(cfg.channels, cfg.expert_hidden, cfg.n_experts, cfg.top_k, cfg.dropout)
        self.norm_2 = ChannelLayerNorm(cfg.channels)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask, s):
        """``x`` is ``(B, C, T)``, ``s`` is ``(B, C)``. Returns output and routing over valid tokens."""
        x = self.norm_1(x + self.drop(self.attn(x, mask)))
        b, c, t = x.shape
        valid = mask[:, 0].bool().reshape(-1)
        x_tok = x.transpose(1, 2).reshape(b * t, c)[valid]
        s_tok = s[:, None, :].expand(b, t, c).reshape(b * t, c)[valid]
        y_tok, state = self.moe(x_tok, s_tok)
        y = torch.zeros(b * t, c, dtype=x.dtype, device=x.device)
        y = y.index_copy(0, valid.nonzero(as_tuple=True)[0], y_tok).reshape(b, t, c).transpose(1, 2)
        x = self.norm_2(x + self.drop(y))
        return x * mask, state


class MoeDurationPredictor(nn.Module):
    """Conv stack followed by switch-transformer blocks, regressing log durations.

    The speaker vector is projected to the model width and added both to the
    conv-stack input (``s + h_text``) and to every router input (``x + s``).
    """

    def __init__(self, cfg: MoeDpConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MoeDpConfig()
        self.cond = nn.Linear(cfg.gin_channels, cfg.channels) if cfg.gin_channels else None
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for _ in range(cfg.conv_blocks):
            self.convs.append(nn.Conv1d(cfg.channels, cfg.channels, cfg.kernel_size, padding=cfg.kernel_size // 2))
            self.norms.append(ChannelLayerNorm(cfg.channels))
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(SwitchTransformerBlock(cfg) for _ in range(cfg.moe_blocks))
        self.proj = nn.Conv1d(cfg.channels, 1, 1)

    def forward(self, h_text: torch.Tensor, mask: torch.Tensor, g: torch.Tensor | None = None):
        """Returns ``(log_d, states)``: ``log_d`` is ``(B, T)``, one RouterState per MoE block."""
        if h_text.shape[-1] == 0:
            raise ValueError("empty text")
        if h_text.shape[1] != self.cfg.channels:
            raise ValueError(f"expected width {self.cfg.channels}, got {h_text.shape[1]}")
        if g is None or self.cond is None:
            s = torch.zeros(h_text.shape[0], self.cfg.channels, dtype=h_text.dtype, device=h_text.device)
        else:
            if g.shape[-1] != self.cfg.gin_channels:
                raise ValueError(f"speaker width {g.shape[-1]} != {self.cfg.gin_channels}")
            s = self.cond(g)
        x = (h_text + s.unsqueeze(-1)) * mask
        for conv, norm in zip(self.convs, self.norms):
            x = self.drop(norm(torch.relu(conv(x * mask))))
        states = []
        for block in self.blocks:
            x, state = block(x, mask, s)
            states.append(state)
        log_d = (self.proj(x * mask) * mask)[:, 0]
        return log_d, states

    def aux_loss(self, states) -> torch.Tensor:
        """Load-balancing loss summed over MoE blocks."""
        return sum(load_balancing_loss(st.probs, self.cfg.alpha) for st in states)


def duration_loss(log_d: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between predicted log durations and log target frame counts."""
    target = torch.as_tensor(target, dtype=log_d.dtype, device=log_d.device)
    if log_d.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(log_d.shape)} vs {tuple(target.shape)}")
    if mask is None:
        mask = torch.ones_like(log_d)
    if torch.any((target <= 0) & (mask > 0)):
        raise ValueError("target durations must be >= 1")
    log_t = torch.log(torch.where(mask > 0, target, torch.ones_like(target)))
    return torch.sum((log_d - log_t) ** 2 * mask) / mask.sum()


def combined_duration_objective(l_mas: torch.Tensor, l_aux_terms) -> torch.Tensor:
    """Duration objective: regression term plus the summed per-block balance terms."""
    if isinstance(l_aux_terms, (list, tuple)):
        return l_mas + sum(l_aux_terms)
    return l_mas + l_aux_terms


def uniform_entropy(n_experts: int) -> float:
    return math.log(n_experts)
