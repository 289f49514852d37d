"""Signal-processing primitives: STFT/ISTFT, mel projection, PQMF and distances.

Spectral functions operate on ``torch.Tensor`` so that they can sit inside the
training graph; evaluation helpers accept numpy arrays as well.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dct
from scipy.optimize import minimize_scalar
from scipy.signal import check_COLA, get_window
from scipy.signal.windows import kaiser


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """STFT analysis parameters.

    Framing is "same"-padded: the signal is reflection-padded by
    ``(fft_size - hop_length) // 2`` on both sides, so a signal of ``T * hop``
    samples yields exactly ``T`` frames and ``istft`` returns ``T * hop`` samples.
    ``require_cola`` may be switched off for analysis-only configurations
    (e.g. the multi-resolution loss) that never get inverted.
    """

    fft_size: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    window: str = "hann"
    require_cola: bool = True

    def __post_init__(self):
        if not 0 < self.hop_length <= self.win_length <= self.fft_size:
            raise ValueError(
                "need 0 < hop_length <= win_length <= fft_size, got "
                f"{self.hop_length}, {self.win_length}, {self.fft_size}"
            )
        if (self.fft_size - self.hop_length) % 2:
            raise ValueError("fft_size - hop_length must be even for symmetric padding")
        if self.require_cola and not self.is_cola:
            raise ValueError(
                f"{self.window} window of length {self.win_length} is not COLA at hop {self.hop_length}"
            )

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def padding(self) -> int:
        return (self.fft_size - self.hop_length) // 2

    @property
    def is_cola(self) -> bool:
        win = get_window(self.window, self.win_length, fftbins=True)
        return bool(check_COLA(win, self.win_length, self.win_length - self.hop_length))

    def n_frames(self, n_samples: int) -> int:
        return (n_samples + 2 * self.padding - self.fft_size) // self.hop_length + 1

    def window_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return _window(self.window, self.win_length, self.fft_size).to(dtype=dtype, device=device)


@lru_cache(maxsize=32)
def _window(name: str, win_length: int, fft_size: int) -> torch.Tensor:
    win = torch.from_numpy(get_window(name, win_length, fftbins=True))
    left = (fft_size - win_length) // 2
    return F.pad(win, (left, fft_size - win_length - left))


# STFT configuration used by the model (hop 256, FFT 1024).
MODEL_STFT = StftConfig(1024, 256, 1024)

# Analysis resolutions of the multi-resolution STFT distance.
MSTFT_RESOLUTIONS = (
    StftConfig(512, 50, 240, require_cola=False),
    StftConfig(1024, 120, 600, require_cola=False),
    StftConfig(2048, 240, 1200, require_cola=False),
)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        x = x.samples
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def stft(x, cfg: StftConfig = MODEL_STFT) -> torch.Tensor:
    """Complex STFT of ``x`` with shape ``(..., n_freqs, frames)``."""
    x = _as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.double()
    n = x.shape[-1]
    if n < cfg.win_length:
        raise ValueError(f"signal of {n} samples is shorter than one window ({cfg.win_length})")
    batch_shape = x.shape[:-1]
    x = x.reshape(-1, 1, n)
    x = F.pad(x, (cfg.padding, cfg.padding), mode="reflect").squeeze(1)
    frames = x.unfold(-1, cfg.fft_size, cfg.hop_length)
    frames = frames * cfg.window_tensor(x.dtype, x.device)
    spec = torch.fft.rfft(frames, dim=-1).transpose(-1, -2)
    return spec.reshape(*batch_shape, cfg.n_freqs, spec.shape[-1])


def istft(spec: torch.Tensor, cfg: StftConfig = MODEL_STFT) -> torch.Tensor:
    """Inverse of :func:`stft`; returns exactly ``frames * hop_length`` samples."""
    if not torch.is_complex(spec):
        raise TypeError("istft expects a complex spectrogram")
    if not cfg.is_cola:
        raise ValueError("istft requires a COLA window configuration")
    if spec.shape[-2] != cfg.n_freqs:
        raise ValueError(f"expected {cfg.n_freqs} frequency bins, got {spec.shape[-2]}")
    batch_shape = spec.shape[:-2]
    n_frames = spec.shape[-1]
    spec = spec.reshape(-1, cfg.n_freqs, n_frames)
    frames = torch.fft.irfft(spec, n=cfg.fft_size, dim=1)
    window = cfg.window_tensor(frames.dtype, frames.device)
    frames = frames * window[None, :, None]

    full = (n_frames - 1) * cfg.hop_length + cfg.fft_size
    y = F.fold(frames, (1, full), (1, cfg.fft_size), stride=(1, cfg.hop_length))[:, 0, 0]
    env = F.fold(
        window.square().expand(1, n_frames, -1).transpose(1, 2),
        (1, full), (1, cfg.fft_size), stride=(1, cfg.hop_length),
    )[0, 0, 0]
    keep = slice(cfg.padding, full - cfg.padding)
    y, env = y[:, keep], env[keep]
    if torch.any(env < 1e-11):
        raise ValueError("window envelope vanishes; configuration is not invertible")
    y = y / env
    return y.reshape(*batch_shape, y.shape[-1])


def magnitude(x, cfg: StftConfig = MODEL_STFT, eps: float = 0.0) -> torch.Tensor:
    spec = stft(x, cfg)
    if eps:
        return torch.sqrt(spec.real.square() + spec.imag.square() + eps)
    return spec.abs()


# ---------------------------------------------------------------------------
# mel


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asanyarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def _mel_to_hz(m):
    m = np.asanyarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, 1000.0 * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int = 80, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Slaney-normalised triangular mel filterbank, shape ``(n_mels, fft_size // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if fmax > sample_rate / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    if not 0 <= fmin < fmax:
        raise ValueError(f"need 0 <= fmin < fmax, got {fmin}, {fmax}")
    fft_freqs = np.linspace(0, sample_rate / 2, fft_size // 2 + 1)
    mel_f = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:n_mels + 2] - mel_f[:n_mels]))[:, None]
    return weights


def mel_project(mag, sample_rate: int, n_mels: int = 80, fmin: float = 0.0,
                fmax: float | None = None) -> torch.Tensor:
    """Project a linear magnitude spectrogram ``(..., n_freqs, frames)`` onto mel bands."""
    mag = _as_tensor(mag)
    fft_size = (mag.shape[-2] - 1) * 2
    fb = torch.from_numpy(mel_filterbank(sample_rate, fft_size, n_mels, fmin, fmax)).to(mag)
    return torch.matmul(fb, mag)


def log_mel(x, sample_rate: int, cfg: StftConfig = MODEL_STFT, n_mels: int = 80,
            fmin: float = 0.0, fmax: float | None = None, floor: float = 1e-5) -> torch.Tensor:
    mel = mel_project(magnitude(x, cfg, eps=1e-6), sample_rate, n_mels, fmin, fmax)
    return torch.log(torch.clamp(mel, min=floor))


# ---------------------------------------------------------------------------
# PQMF


def design_prototype_filter(taps: int, cutoff_ratio: float, beta: float) -> np.ndarray:
    """Kaiser-windowed sinc lowpass of length ``taps + 1``."""
    if taps % 2:
        raise ValueError("taps must be even")
    if not 0.0 < cutoff_ratio < 1.0:
        raise ValueError("cutoff_ratio must be in (0, 1)")
    n = np.arange(taps + 1) - 0.5 * taps
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.sin(np.pi * cutoff_ratio * n) / (np.pi * n)
    h[taps // 2] = cutoff_ratio
    return h * kaiser(taps + 1, beta)


def optimal_cutoff_ratio(num_bands: int, taps: int, beta: float, n_fft: int = 16384) -> float:
    """Cutoff minimising the power-complementarity error of the prototype.

    A cosine-modulated bank is near-perfect-reconstruction when
    ``|H(w)|^2 + |H(pi/M - w)|^2 ~= 1`` on ``[0, pi/M]``.
    """
    edge = n_fft // (2 * num_bands)

    def objective(cutoff):
        h = design_prototype_filter(taps, cutoff, beta)
        power = np.abs(np.fft.rfft(h, n_fft))[: edge + 1] ** 2
        return float(np.max(np.abs(power + power[::-1] - 1.0)))

    # the useful minimum sits near 1 / (2M); wider brackets find spurious ones
    return float(minimize_scalar(objective, bounds=(0.25 / num_bands, 1.0 / num_bands), method="bounded",
                                 options={"xatol": 1e-7}).x)


@dataclass(frozen=True)
class PqmfBank:
    """Cosine-modulated pseudo-QMF analysis/synthesis bank."""

    num_bands: int = 16
    taps: int = 256
    cutoff_ratio: float | None = None
    beta: float = 10.0
    analysis_filters: np.ndarray = field(init=False, repr=False)
    synthesis_filters: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValueError("num_bands must be positive")
        if self.num_bands & (self.num_bands - 1):
            warnings.warn(f"{self.num_bands} bands is not a power of two; reconstruction is untested",
                          stacklevel=3)
        if self.cutoff_ratio is None:
            object.__setattr__(self, "cutoff_ratio",
                               optimal_cutoff_ratio(self.num_bands, self.taps, self.beta))
        proto = design_prototype_filter(self.taps, self.cutoff_ratio, self.beta)
        n = np.arange(self.taps + 1) - 0.5 * self.taps
        k = np.arange(self.num_bands)[:, None]
        arg = (2 * k + 1) * (np.pi / (2 * self.num_bands)) * n
        phase = (-1.0) ** k * np.pi / 4
        object.__setattr__(self, "analysis_filters", 2 * proto * np.cos(arg + phase))
        object.__setattr__(self, "synthesis_filters", 2 * proto * np.cos(arg - phase))

    @property
    def delay(self) -> int:
        """Round-trip delay in samples (zero: both stages are centre-padded)."""
        return 0

    def save(self, path) -> None:
        np.save(path, np.stack([self.analysis_filters, self.synthesis_filters]))

    @staticmethod
    def load_coefficients(path) -> np.ndarray:
        return np.load(path)


@lru_cache(maxsize=8)
def default_pqmf(num_bands: int = 16, taps: int = 256, beta: float = 10.0) -> PqmfBank:
    return PqmfBank(num_bands, taps, None, beta)


def pqmf_analysis(x, bank: PqmfBank) -> torch.Tensor:
    """Split ``(..., T)`` into ``(..., num_bands, ceil(T / num_bands))`` critically sampled bands.

    Signals whose length is not a multiple of ``num_bands`` are zero-padded at the end.
    """
    x = _as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.double()
    m = bank.num_bands
    batch_shape = x.shape[:-1]
    x = x.reshape(-1, 1, x.shape[-1])
    if x.shape[-1] % m:
        x = F.pad(x, (0, m - x.shape[-1] % m))
    h = torch.from_numpy(bank.analysis_filters).to(x)[:, None, :]
    pad = bank.taps // 2
    y = F.conv1d(F.pad(x, (pad, pad)), h, stride=m)
    return y.reshape(*batch_shape, m, y.shape[-1])


def pqmf_synthesis(bands, bank: PqmfBank) -> torch.Tensor:
    """Recombine ``(..., num_bands, frames)`` sub-bands into a ``(..., frames * num_bands)`` signal."""
    bands = _as_tensor(bands)
    m = bank.num_bands
    if bands.shape[-2] != m:
        raise ValueError(f"expected {m} bands, got {bands.shape[-2]}")
    batch_shape = bands.shape[:-2]
    bands = bands.reshape(-1, m, bands.shape[-1])
    up = torch.zeros(bands.shape[0], m, bands.shape[-1] * m, dtype=bands.dtype, device=bands.device)
    up[..., ::m] = bands * m
    g = torch.from_numpy(bank.synthesis_filters).to(bands)[None, :, :]
    pad = bank.taps // 2
    y = F.conv1d(F.pad(up, (pad, pad)), g)[:, 0]
    return y.reshape(*batch_shape, y.shape[-1])


# ---------------------------------------------------------------------------
# distances


def multi_res_stft_terms(w_hat, w, cfgs: Sequence[StftConfig] = MSTFT_RESOLUTIONS,
                         eps: float = 1e-7) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per-resolution ``(spectral_convergence, log_magnitude_l1)`` pairs."""
    w_hat, w = _as_tensor(w_hat), _as_tensor(w)
    if w_hat.shape != w.shape:
        raise ValueError(f"length mismatch: {tuple(w_hat.shape)} vs {tuple(w.shape)}")
    terms = []
    for cfg in cfgs:
        m_hat = magnitude(w_hat, cfg)
        m = magnitude(w, cfg)
        sc = torch.linalg.norm((m - m_hat).flatten()) / torch.linalg.norm(m.flatten()).clamp_min(eps)
        mag = torch.mean(torch.abs(torch.log(m.clamp_min(eps)) - torch.log(m_hat.clamp_min(eps))))
        terms.append((sc, mag))
    return terms


def multi_res_stft_loss(w_hat, w, cfgs: Sequence[StftConfig] = MSTFT_RESOLUTIONS) -> torch.Tensor:
    """Spectral convergence plus log-magnitude L1, averaged over resolutions."""
    terms = multi_res_stft_terms(w_hat, w, cfgs)
    return sum(sc + mag for sc, mag in terms) / len(terms)


def mel_cepstrum(x, sample_rate: int, cfg: StftConfig = MODEL_STFT, n_mels: int = 80,
                 n_coeffs: int = 13) -> np.ndarray:
    """Mel-cepstral coefficients 1..n_coeffs (c0 dropped), shape ``(frames, n_coeffs)``."""
    with torch.no_grad():
        lm = log_mel(_as_tensor(x).double(), sample_rate, cfg, n_mels).cpu().numpy()
    cep = dct(lm, type=2, axis=-2, norm="ortho")
    return np.swapaxes(cep[..., 1:n_coeffs + 1, :], -1, -2)


def mcd(cep_a, cep_b) -> float:
    """Mel-cepstral distortion in dB, averaged over frames."""
    a, b = np.asarray(cep_a, dtype=np.float64), np.asarray(cep_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[None], b[None]
    per_frame = (10.0 / math.log(10.0)) * np.sqrt(2.0 * np.sum((a - b) ** 2, axis=-1))
    return float(np.mean(per_frame))


@dataclass(frozen=True)
class FrameConfig:
    frame_length: int = 1024
    hop_length: int = 256
    fmin: float = 50.0
    fmax: float = 550.0
    threshold: float = 0.3


def periodicity_and_voicing(x, sample_rate: int, cfg: FrameConfig = FrameConfig()):
    """Per-frame periodicity in [0, 1] and voicing flags.

    Periodicity is the peak of the normalised autocorrelation over lags
    corresponding to ``[fmin, fmax]``. Frames with negligible energy get 0.
    """
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)
    n = cfg.frame_length
    lag_min = max(1, int(np.floor(sample_rate / cfg.fmax)))
    lag_max = int(np.ceil(sample_rate / cfg.fmin))
    if lag_max >= n:
        raise ValueError(f"frame_length {n} too short for fmin {cfg.fmin} Hz")
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[:: cfg.hop_length]
    frames = frames - frames.mean(axis=1, keepdims=True)

    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, nfft, axis=1)[:, :n]
    energy = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(lag_min, lag_max + 1)
    head = energy[:, n - lags]                    # sum of x[0:n-lag]^2
    tail = energy[:, n:n + 1] - energy[:, lags]   # sum of x[lag:n]^2
    denom = np.sqrt(head * tail)
    silent = energy[:, -1] <= 1e-10 * n
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12, acf[:, lags] / denom, 0.0)
    period = np.clip(np.max(r, axis=1), 0.0, 1.0)
    period[silent] = 0.0
    return period, period > cfg.threshold


def vuv_f1(reference, estimate) -> float:
    """F1 score of voiced-frame detection, ``reference`` taken as ground truth."""
    ref, est = np.asarray(reference, bool), np.asarray(estimate, bool)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    tp = np.sum(ref & est)
    fp = np.sum(~ref & est)
    fn = np.sum(ref & ~est)
    if tp + fp + fn == 0:
        return 1.0
    return float(2 * tp / (2 * tp + fp + fn))
