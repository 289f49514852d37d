"""Vocoder metrics on encode/decode round trips, RTF timing, prosody accuracy and duration JS divergence."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import gaussian_kde

from . import dsp
from .textgrid import SILENCE_LABELS, AlignmentIntervals

JS_MAX_SECONDS = 2.0


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    m_stft: float | None = None
    mcd: float | None = None
    periodicity_error: float | None = None
    vuv_f1: float | None = None
    rtf_cpu: float | None = None
    rtf_accelerator: float | None = None
    pesq_external: float | None = None
    duration_accuracy: float | None = None
    js_mean: float | None = None
    js_var: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "metadata" and value is not None and not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite: {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def report_metadata(config_hash: str, dataset: str, **extra) -> dict:
    meta = {"config_hash": config_hash, "dataset": dataset,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    meta.update(extra)
    return meta


def read_external_pesq(path) -> float | None:
    """Mean of a one-value-per-line (optionally ``name<TAB>value``) PESQ file."""
    if path is None:
        return None
    values = [float(line.split()[-1]) for line in Path(path).read_text().splitlines() if line.strip()]
    return float(np.mean(values)) if values else None


# ---------------------------------------------------------------------------
# vocoder metrics


@dataclass
class Clip:
    name: str
    wav: torch.Tensor   # 1-D
    speaker_id: int = 0


def clip_metrics(reference, estimate, sample_rate: int) -> dict:
    """Per-clip vocoder metrics; both waveforms must have the same length."""
    ref = torch.as_tensor(reference, dtype=torch.float64)
    est = torch.as_tensor(estimate, dtype=torch.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: reference {tuple(ref.shape)} vs estimate {tuple(est.shape)}")
    with torch.no_grad():
        m_stft = float(dsp.multi_res_stft_loss(est, ref))
    cep = dsp.mcd(dsp.mel_cepstrum(est, sample_rate), dsp.mel_cepstrum(ref, sample_rate))
    p_ref, v_ref = dsp.periodicity_and_voicing(ref, sample_rate)
    p_est, v_est = dsp.periodicity_and_voicing(est, sample_rate)
    return {
        "m_stft": m_stft,
        "mcd": cep,
        "periodicity_error": float(np.sqrt(np.mean((p_ref - p_est) ** 2))),
        "vuv_f1": dsp.vuv_f1(v_ref, v_est),
    }


def encode_decode_eval(clips: Sequence[Clip], model=None, sample_rate: int = 22050,
                       hop: int = 256) -> tuple[MetricReport, list[dict]]:
    """Posterior-encode then vocode every clip and score it against the original.

    ``model`` is a :class:`~moetts.training.Synthesizer`; ``None`` selects
    bypass mode, where the reconstruction is the frame-truncated original.
    Returns the dataset-mean report and per-clip rows.
    """
    if not clips:
        raise ValueError("no clips to evaluate")
    rows = []
    for clip in clips:
        wav = torch.as_tensor(clip.wav, dtype=torch.float32)
        n_frames = wav.shape[-1] // hop
        if n_frames == 0:
            raise ValueError(f"clip {clip.name} is shorter than one hop")
        ref = wav[: n_frames * hop]
        if model is None:
            est = ref.clone()
        else:
            model.eval()
            spec = dsp.magnitude(ref, model.vocoder.stft_cfg, eps=1e-6).float()[None]
            est = model.encode_decode(spec, torch.tensor([clip.speaker_id]))[0]
        if est.shape[-1] != ref.shape[-1]:
            raise ValueError(f"clip {clip.name}: reconstruction has {est.shape[-1]} samples, expected {ref.shape[-1]}")
        row = {"name": clip.name, "samples": int(ref.shape[-1])}
        row.update(clip_metrics(ref, est, sample_rate))
        rows.append(row)
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("m_stft", "mcd", "periodicity_error", "vuv_f1")}
    return MetricReport(**agg), rows


def write_rows(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def measure_rtf(synthesize: Callable[[], object], audio_seconds: float, repeats: int = 5,
                warmup: int = 1, timer: Callable[[], float] = time.perf_counter) -> float:
    """Median wall-clock synthesis time divided by the produced audio duration."""
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        synthesize()
    times = []
    for _ in range(repeats):
        t0 = timer()
        synthesize()
        times.append(timer() - t0)
    return statistics.median(times) / audio_seconds


# ---------------------------------------------------------------------------
# prosody categories


class ProsodyCategory(str, Enum):
    LOW = "low"
    NORMAL = "normal"
    HIGH = "high"


@dataclass(frozen=True)
class ProsodyThresholds:
    t_low: float
    t_high: float

    def __post_init__(self):
        if not self.t_low < self.t_high:
            raise ValueError(f"need t_low < t_high, got ({self.t_low}, {self.t_high})")


def phone_mean_duration(intervals: AlignmentIntervals, silence=SILENCE_LABELS) -> float:
    durs = [e - s for label, s, e in intervals.intervals if label not in silence]
    if not durs:
        raise ValueError(f"no non-silence intervals in {intervals.source or 'input'}")
    return float(np.mean(durs))


def tertile_thresholds(mean_durations: Sequence[float]) -> ProsodyThresholds:
    """Ground-truth tertiles of per-utterance mean phone duration."""
    values = np.asarray(mean_durations, dtype=np.float64)
    if values.size < 3:
        raise ValueError("need at least 3 utterances to form tertiles")
    lo, hi = np.quantile(values, [1 / 3, 2 / 3])
    return ProsodyThresholds(float(lo), float(hi))


def speaker_thresholds(gt_means: Mapping[str, float], speakers: Mapping[str, int]) -> dict[int, ProsodyThresholds]:
    by_spk: dict[int, list[float]] = {}
    for name, value in gt_means.items():
        by_spk.setdefault(speakers.get(name, 0), []).append(value)
    return {spk: tertile_thresholds(vals) for spk, vals in sorted(by_spk.items())}


def categorize_prosody(mean_dur: float, thresholds: ProsodyThresholds) -> ProsodyCategory:
    if mean_dur < thresholds.t_low:
        return ProsodyCategory.LOW
    if mean_dur > thresholds.t_high:
        return ProsodyCategory.HIGH
    return ProsodyCategory.NORMAL


def prosody_accuracy(pred, gt) -> float:
    """Fraction of utterances whose predicted category equals the ground truth.

    Accepts two equal-length sequences or two mappings keyed by utterance.
    """
    if isinstance(pred, Mapping) and isinstance(gt, Mapping):
        if set(pred) != set(gt):
            raise ValueError("prediction and ground-truth utterance sets differ")
        keys = sorted(gt)
        pred, gt = [pred[k] for k in keys], [gt[k] for k in keys]
    pred, gt = list(pred), list(gt)
    if not pred or not gt:
        raise ValueError("empty prediction or ground-truth set")
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions vs {len(gt)} ground-truth items")
    return sum(ProsodyCategory(p) == ProsodyCategory(g) for p, g in zip(pred, gt)) / len(gt)


# ---------------------------------------------------------------------------
# duration distributions


@dataclass
class DurationDistribution:
    support: np.ndarray
    density: np.ndarray
    estimator: str = "histogram"
    bandwidth: float = 0.0

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.estimator not in ("histogram", "kde"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.support.shape != self.density.shape:
            raise ValueError("support and density lengths differ")
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")
        if abs(self.density.sum() - 1.0) > 1e-6:
            raise ValueError(f"density sums to {self.density.sum()}, not 1")

    def export(self, path) -> None:
        np.savetxt(path, np.column_stack([self.support, self.density]), fmt="%.10g", delimiter="\t")

    @classmethod
    def load(cls, path, estimator: str = "histogram") -> "DurationDistribution":
        if not Path(path).read_text(encoding="utf-8").strip():
            raise ValueError(f"empty distribution export {path}")
        data = np.loadtxt(path, ndmin=2)
        return cls(data[:, 0], data[:, 1], estimator)


def js_grid(bin_width: float = 256 / 22050, max_seconds: float = JS_MAX_SECONDS) -> np.ndarray:
    """Bin centres of the shared grid (one frame per bin over ``[0, max_seconds]``)."""
    n_bins = int(math.ceil(max_seconds / bin_width))
    return (np.arange(n_bins) + 0.5) * bin_width


def duration_distribution(durations, estimator: str = "histogram", bin_width: float = 256 / 22050,
                          max_seconds: float = JS_MAX_SECONDS, bandwidth: float | None = None,
                          grid: np.ndarray | None = None) -> DurationDistribution:
    """Normalised density of duration samples (seconds) on a fixed grid.

    The histogram estimator counts samples per ``bin_width`` bin (values past
    the grid fall in the last bin). The kde estimator evaluates a Gaussian
    kernel density on the same grid and renormalises it to unit mass.
    """
    x = np.asarray(list(durations), dtype=np.float64)
    if x.size == 0:
        raise ValueError("no duration samples")
    support = js_grid(bin_width, max_seconds) if grid is None else np.asarray(grid, dtype=np.float64)
    if estimator == "histogram":
        idx = np.clip(np.floor(x / bin_width).astype(int), 0, len(support) - 1)
        counts = np.bincount(idx, minlength=len(support)).astype(np.float64)
        return DurationDistribution(support, counts / counts.sum(), "histogram", bin_width)
    if estimator == "kde":
        if x.size < 2:
            raise ValueError("kde needs at least 2 samples")
        if np.ptp(x) == 0:
            raise ValueError("kde needs non-constant samples")
        kde = gaussian_kde(x, bw_method=bandwidth)
        dens = kde(support)
        if dens.sum() <= 0:
            raise ValueError("kde mass vanishes on the grid")
        return DurationDistribution(support, dens / dens.sum(), "kde", float(np.sqrt(kde.covariance[0, 0])))
    raise ValueError(f"unknown estimator {estimator!r}")


def grouped_distributions(durations, keys, **kwargs) -> dict:
    """One distribution per grouping key (e.g. speaker id)."""
    groups: dict = {}
    for d, k in zip(durations, keys, strict=True):
        groups.setdefault(k, []).append(d)
    return {k: duration_distribution(v, **kwargs) for k, v in sorted(groups.items())}


def _kl2(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / q[nz])))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits; accepts distributions or raw mass vectors."""
    if isinstance(p, DurationDistribution) and isinstance(q, DurationDistribution):
        if p.support.shape != q.support.shape or not np.array_equal(p.support, q.support):
            raise ValueError("distributions live on different grids")
        p, q = p.density, q.density
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    js = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return float(min(max(js, 0.0), 1.0))


def js_report(system_a, system_b, **kwargs) -> tuple[float, float]:
    """Mean and (population) variance of per-sample JS divergence between paired duration sets."""
    if isinstance(system_a, Mapping) and isinstance(system_b, Mapping):
        if set(system_a) != set(system_b):
            raise ValueError("duration sets are not paired (keys differ)")
        keys = sorted(system_a)
        system_a, system_b = [system_a[k] for k in keys], [system_b[k] for k in keys]
    system_a, system_b = list(system_a), list(system_b)
    if len(system_a) != len(system_b):
        raise ValueError(f"unpaired samples: {len(system_a)} vs {len(system_b)}")
    if not system_a:
        raise ValueError("no samples")
    values = np.array([
        js_divergence(duration_distribution(a, **kwargs), duration_distribution(b, **kwargs))
        for a, b in zip(system_a, system_b)
    ])
    mean = float(np.mean(values))
    return mean, float(np.mean((values - mean) ** 2))


# ---------------------------------------------------------------------------
# duration sources


def read_sidecar(path, hop: int = 256, sample_rate: int = 22050, silence=SILENCE_LABELS) -> AlignmentIntervals:
    """Turn a ``symbol<TAB>frames`` sidecar into phone intervals (silence dropped)."""
    intervals, t = [], 0.0
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            symbol, frames = line.split("\t")
            frames = int(frames)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'symbol<TAB>frames'") from None
        end = t + frames * hop / sample_rate
        if symbol not in silence:
            intervals.append((symbol, t, end))
        t = end
    return AlignmentIntervals(intervals, str(path))


def write_sidecar(path, symbols: Sequence[str], frames: Sequence[int]) -> None:
    if len(symbols) != len(frames):
        raise ValueError("symbols and frames differ in length")
    Path(path).write_text("".join(f"{s}\t{int(d)}\n" for s, d in zip(symbols, frames)), encoding="utf-8")
