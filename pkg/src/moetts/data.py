"""Manifests, datasets and the synthetic toy corpus."""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from . import dsp
from .textgrid import write_textgrid

HOP = 256
SAMPLE_RATE = 22050


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    audio_path: str
    speaker_id: int
    phoneme_ids: list[int]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path
    sample_rate: int | None = None

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.audio_path)
        return p if p.is_absolute() else self.root / p

    @property
    def n_speakers(self) -> int:
        return max(e.speaker_id for e in self.entries) + 1


def read_vocabulary(path) -> list[str]:
    """One symbol per line; the line index is the id."""
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


def write_vocabulary(path, symbols) -> None:
    Path(path).write_text("".join(f"{s}\n" for s in symbols), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    """Parse ``audio_path<TAB>speaker_id<TAB>space-separated ids`` lines."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            ids = [int(t) for t in parts[2].split()]
            entries.append(ManifestEntry(parts[0], int(parts[1]), ids))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if not ids:
            raise ManifestError(f"{path}:{lineno}: empty phoneme sequence")
    return DatasetManifest(entries, path.parent)


def write_manifest(path, entries) -> None:
    lines = [f"{e.audio_path}\t{e.speaker_id}\t{' '.join(map(str, e.phoneme_ids))}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_wav(path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32) / float(np.iinfo(data.dtype).max + 1)
    return data.astype(np.float32), int(sr)


def write_wav(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / 32768)
    wavfile.write(path, sample_rate, np.round(pcm * 32768).astype(np.int16))


@dataclass
class Utterance:
    name: str
    wav: torch.Tensor          # (frames * hop,)
    spec: torch.Tensor         # (n_freqs, frames) linear magnitude
    ids: torch.Tensor
    speaker_id: int


class SpeechDataset:
    """Decoded utterances, trimmed to a whole number of hops, with cached spectrograms."""

    def __init__(self, utterances: list[Utterance], sample_rate: int, n_speakers: int):
        self.utterances = utterances
        self.sample_rate = sample_rate
        self.n_speakers = n_speakers

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    def batches(self, batch_size: int, seed: int, epoch: int = 0, bucket: bool = True):
        """Deterministic batch order for ``(seed, epoch)``; length-bucketed when ``bucket``."""
        rng = random.Random(seed * 100003 + epoch)
        order = list(range(len(self)))
        rng.shuffle(order)
        if bucket:
            span = batch_size * 4
            chunks = [sorted(order[i:i + span], key=lambda j: self.utterances[j].spec.shape[-1])
                      for i in range(0, len(order), span)]
            order = [j for c in chunks for j in c]
        groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        rng.shuffle(groups)
        for g in groups:
            yield collate([self.utterances[j] for j in g])


def collate(items: list[Utterance]) -> dict:
    b = len(items)
    t_text = max(len(u.ids) for u in items)
    t_spec = max(u.spec.shape[-1] for u in items)
    n_freqs = items[0].spec.shape[0]
    hop = items[0].wav.shape[-1] // items[0].spec.shape[-1]
    ids = torch.zeros(b, t_text, dtype=torch.long)
    spec = torch.zeros(b, n_freqs, t_spec)
    wav = torch.zeros(b, t_spec * hop)
    for i, u in enumerate(items):
        ids[i, :len(u.ids)] = u.ids
        spec[i, :, :u.spec.shape[-1]] = u.spec
        wav[i, :u.wav.shape[-1]] = u.wav
    return {
        "ids": ids,
        "id_lengths": torch.tensor([len(u.ids) for u in items]),
        "spec": spec,
        "spec_lengths": torch.tensor([u.spec.shape[-1] for u in items]),
        "wav": wav,
        "speakers": torch.tensor([u.speaker_id for u in items]),
        "names": [u.name for u in items],
    }


def prepare_utterance(name, wav, ids, speaker_id, cfg: dsp.StftConfig = dsp.MODEL_STFT) -> Utterance:
    n_frames = len(wav) // cfg.hop_length
    wav = torch.as_tensor(np.asarray(wav[: n_frames * cfg.hop_length], dtype=np.float32))
    spec = dsp.magnitude(wav, cfg, eps=1e-6).float()
    return Utterance(name, wav, spec, torch.as_tensor(ids, dtype=torch.long), speaker_id)


def load_dataset(manifest_path, sample_rate: int | None = None,
                 cfg: dsp.StftConfig = dsp.MODEL_STFT) -> SpeechDataset:
    """Decode every manifest entry; errors name the offending file."""
    manifest = read_manifest(manifest_path)
    if not manifest.entries:
        raise ManifestError(f"no entries in {manifest_path}")
    utts = []
    for entry in manifest.entries:
        path = manifest.resolve(entry)
        if not path.exists():
            raise ManifestError(f"missing audio file: {path}")
        try:
            wav, sr = read_wav(path)
        except Exception as exc:
            raise ManifestError(f"cannot decode {path}: {exc}") from None
        if sample_rate is None:
            sample_rate = sr
        elif sr != sample_rate:
            raise ManifestError(f"{path}: sample rate {sr} != {sample_rate}")
        if len(wav) < cfg.win_length:
            raise ManifestError(f"{path}: shorter than one analysis window")
        utts.append(prepare_utterance(Path(entry.audio_path).stem, wav, entry.phoneme_ids, entry.speaker_id, cfg))
    n_speakers = max(u.speaker_id for u in utts) + 1
    return SpeechDataset(utts, sample_rate, n_speakers)


# ---------------------------------------------------------------------------
# toy corpus

TOY_PHONES = ["sil", "a", "e", "i", "o", "u", "m", "n", "s", "f", "t", "k"]
_VOWELS = {"a": (730, 1090), "e": (530, 1840), "i": (270, 2290), "o": (570, 840), "u": (300, 870)}
_NASALS = {"m": (250, 1200), "n": (250, 1500)}
_FRICATIVES = {"s": (4000, 8000), "f": (1200, 5000)}
_STOPS = {"t": (3000, 6000), "k": (1500, 3000)}
_BASE_FRAMES = {"vowel": 9.0, "nasal": 6.0, "fricative": 7.0, "stop": 4.0, "sil": 8.0}


@dataclass(frozen=True)
class ToySpeaker:
    name: str
    f0: float
    rate: float          # >1 speaks slower
    vowel_stretch: float  # extra lengthening of vowels


TOY_SPEAKERS = (
    ToySpeaker("spk0", 110.0, 0.75, 1.0),
    ToySpeaker("spk1", 190.0, 1.0, 1.4),
    ToySpeaker("spk2", 250.0, 1.3, 0.8),
)


def _phone_class(p: str) -> str:
    if p == "sil":
        return "sil"
    if p in _VOWELS:
        return "vowel"
    if p in _NASALS:
        return "nasal"
    if p in _FRICATIVES:
        return "fricative"
    return "stop"


def toy_durations(phones, speaker: ToySpeaker, rng: np.random.Generator) -> list[int]:
    """Speaker- and context-dependent frame counts."""
    out = []
    for i, p in enumerate(phones):
        cls = _phone_class(p)
        d = _BASE_FRAMES[cls] * speaker.rate
        if cls == "vowel":
            d *= speaker.vowel_stretch
            nxt = phones[i + 1] if i + 1 < len(phones) else "sil"
            if nxt == "sil":
                d *= 1.6   # phrase-final lengthening
            elif _phone_class(nxt) == "stop":
                d *= 0.8
        d *= float(np.exp(rng.normal(0.0, 0.12)))
        out.append(max(2, int(round(d))))
    return out


def _bandpass_noise(n, lo, hi, sr, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-9)


def _harmonic(n, f0, formants, sr, phase0=0.0):
    t = np.arange(n) / sr
    x = np.zeros(n)
    for h in range(1, int((sr / 2 - 200) // f0)):
        fh = h * f0
        gain = sum(1.0 / (1.0 + ((fh - fc) / 120.0) ** 2) for fc in formants) + 0.02
        x += gain * np.sin(2 * np.pi * fh * t + phase0 * h)
    return x / (np.std(x) + 1e-9)


def synthesize_toy(phones, durations, speaker: ToySpeaker, rng, sr: int = SAMPLE_RATE, hop: int = HOP):
    segs = []
    for p, d in zip(phones, durations):
        n = d * hop
        cls = _phone_class(p)
        if cls == "sil":
            x = 0.003 * rng.standard_normal(n)
        elif cls == "vowel":
            x = 0.3 * _harmonic(n, speaker.f0, _VOWELS[p], sr, rng.uniform(0, np.pi))
        elif cls == "nasal":
            x = 0.15 * _harmonic(n, speaker.f0, _NASALS[p], sr, rng.uniform(0, np.pi))
        elif cls == "fricative":
            x = 0.12 * _bandpass_noise(n, *_FRICATIVES[p], sr, rng)
        else:
            x = np.zeros(n)
            burst = min(n // 2, 3 * hop)
            x[-burst:] = 0.2 * _bandpass_noise(burst, *_STOPS[p], sr, rng) * np.hanning(burst)
        ramp = min(64, n // 4)
        env = np.ones(n)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
        segs.append(x * env)
    return np.concatenate(segs).astype(np.float32)


def _random_phones(rng) -> list[str]:
    vowels = list(_VOWELS)
    cons = list(_NASALS) + list(_FRICATIVES) + list(_STOPS)
    phones = ["sil"]
    for _ in range(int(rng.integers(2, 5))):
        phones.append(str(rng.choice(cons)))
        phones.append(str(rng.choice(vowels)))
        if rng.random() < 0.3:
            phones.append(str(rng.choice(cons)))
    phones.append("sil")
    return phones


def make_toy_corpus(root, n_train: int = 50, n_heldout: int = 9, seed: int = 0,
                    sr: int = SAMPLE_RATE, hop: int = HOP) -> dict:
    """Write a small multi-speaker corpus.

    Layout::

        root/phones.txt                  vocabulary, one symbol per line
        root/<speaker>/<utt>.wav         16-bit PCM
        root/<speaker>/<utt>.lab         space-separated phone symbols
        root/<speaker>/<utt>.TextGrid    "phones" tier at the true boundaries
        root/heldout/...                 same layout for held-out clips

    Returns the ground-truth durations (frames) keyed by utterance name.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "heldout").mkdir(parents=True, exist_ok=True)
    write_vocabulary(root / "phones.txt", TOY_PHONES)
    write_vocabulary(root / "heldout" / "phones.txt", TOY_PHONES)
    truth = {}
    for split, count in (("train", n_train), ("heldout", n_heldout)):
        base = root if split == "train" else root / "heldout"
        for k in range(count):
            spk = TOY_SPEAKERS[k % len(TOY_SPEAKERS)]
            phones = _random_phones(rng)
            durs = toy_durations(phones, spk, rng)
            wav = synthesize_toy(phones, durs, spk, rng, sr, hop)
            name = f"{spk.name}_{split}_{k:03d}"
            d = base / spk.name
            d.mkdir(parents=True, exist_ok=True)
            write_wav(d / f"{name}.wav", wav, sr)
            (d / f"{name}.lab").write_text(" ".join(phones) + "\n", encoding="utf-8")
            ends = np.cumsum(durs) * hop / sr
            starts = np.concatenate([[0.0], ends[:-1]])
            write_textgrid(d / f"{name}.TextGrid",
                           {"phones": [(p, float(s), float(e)) for p, s, e in zip(phones, starts, ends)]})
            truth[name] = durs
    return truth


def scan_corpus(root, vocab_file: str = "phones.txt"):
    """Collect ``(wav_path, speaker_name, phone_symbols)`` triples under the documented layout.

    Returns ``(records, errors, speakers)``; speakers are the immediate sub-directories
    (excluding ``heldout``) in sorted order.
    """
    root = Path(root)
    vocab = read_vocabulary(root / vocab_file)
    index = {s: i for i, s in enumerate(vocab)}
    records, errors = [], []
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != "heldout")
    for spk_id, spk in enumerate(speakers):
        for wav_path in sorted((root / spk).glob("*.wav")):
            lab = wav_path.with_suffix(".lab")
            if not lab.exists():
                errors.append(f"{wav_path}: missing transcript {lab.name}")
                continue
            symbols = lab.read_text(encoding="utf-8").split()
            unknown = [s for s in symbols if s not in index]
            if unknown:
                errors.append(f"{lab}: unknown symbols {unknown}")
                continue
            try:
                wav, sr = read_wav(wav_path)
            except Exception as exc:
                errors.append(f"{wav_path}: unreadable audio ({exc})")
                continue
            records.append((wav_path, spk_id, [index[s] for s in symbols], len(wav) / sr, sr))
    return records, errors, speakers
