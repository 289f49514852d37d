"""Monotonic alignment search and duration/alignment conversions."""

from __future__ import annotations

import numpy as np
import torch


def mas_align(log_lik) -> np.ndarray:
    """Best monotonic, surjective text-to-frame alignment.

    Args:
        log_lik: Array of shape ``(text_len, frames)``.

    Returns:
        Binary ``(text_len, frames)`` alignment. Every frame belongs to exactly
        one phoneme, every phoneme gets at least one frame, and phoneme order is
        monotone in time. Exact score ties assign the frame to the later phoneme.
    """
    ll = np.asarray(log_lik, dtype=np.float64)
    if ll.ndim != 2:
        raise ValueError(f"log_lik must be 2-D, got shape {ll.shape}")
    n_text, n_frames = ll.shape
    if n_text < 1 or n_frames < n_text:
        raise ValueError(f"no monotonic alignment of {n_text} phonemes onto {n_frames} frames")

    value = np.full((n_text, n_frames), -np.inf)
    value[0, 0] = ll[0, 0]
    for t in range(1, n_frames):
        stay = value[:, t - 1]
        advance = np.concatenate([[-np.inf], value[:-1, t - 1]])
        value[:, t] = np.maximum(stay, advance) + ll[:, t]

    path = np.zeros((n_text, n_frames), dtype=np.int64)
    j = n_text - 1
    for t in range(n_frames - 1, -1, -1):
        path[j, t] = 1
        if j > 0 and (j == t or value[j, t - 1] < value[j - 1, t - 1]):
            j -= 1
    return path


def alignment_score(log_lik, alignment) -> float:
    return float(np.sum(np.asarray(log_lik) * np.asarray(alignment)))


def check_alignment(a) -> None:
    """Raise ``ValueError`` unless ``a`` is a valid monotonic surjective alignment."""
    a = np.asarray(a)
    if a.ndim != 2 or not np.isin(a, (0, 1)).all():
        raise ValueError("alignment must be a 2-D binary array")
    if not (a.sum(axis=0) == 1).all():
        raise ValueError("every frame must be aligned to exactly one phoneme")
    if not (a.sum(axis=1) >= 1).all():
        raise ValueError("every phoneme needs at least one frame")
    owner = a.argmax(axis=0)
    if np.any(np.diff(owner) < 0) or np.any(np.diff(owner) > 1):
        raise ValueError("alignment is not monotonic and contiguous")


def durations_from_alignment(a) -> np.ndarray:
    return np.asarray(a).sum(axis=-1).astype(np.int64)


def alignment_from_durations(durations, n_frames: int | None = None) -> np.ndarray:
    d = np.asarray(durations, dtype=np.int64)
    if np.any(d <= 0):
        raise ValueError("durations must be positive")
    total = int(d.sum())
    n_frames = total if n_frames is None else n_frames
    ends = np.cumsum(d)
    starts = ends - d
    t = np.arange(n_frames)
    return ((t[None, :] >= starts[:, None]) & (t[None, :] < ends[:, None])).astype(np.int64)


def expand_by_durations(h: torch.Tensor, durations) -> torch.Tensor:
    """Repeat position ``i`` of ``h`` (shape ``(..., channels, text_len)``) ``durations[i]`` times."""
    d = torch.as_tensor(durations, dtype=torch.long, device=h.device)
    if d.ndim != 1 or d.shape[0] != h.shape[-1]:
        raise ValueError(f"need {h.shape[-1]} durations, got shape {tuple(d.shape)}")
    if torch.any(d <= 0):
        raise ValueError("durations must be positive")
    return torch.repeat_interleave(h, d, dim=-1)


def durations_to_frames(log_d, min_frames: int = 1) -> torch.Tensor:
    """Inference rule: ``ceil(exp(log_d))`` clipped below at ``min_frames``."""
    log_d = torch.as_tensor(log_d)
    # the offset absorbs rounding in exp(log k) for integer k
    return torch.clamp(torch.ceil(torch.exp(log_d) - 1e-6), min=min_frames).long()
