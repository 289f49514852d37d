"""``moetts`` command line: data preparation, training, synthesis, evaluation and plots."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data, dsp, evaluation, training
from .textgrid import parse_textgrid

RUN_DIR_ENV = "MOETTS_RUN_DIR"


class CliError(RuntimeError):
    pass


def default_run_dir() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs/default"))


def args_snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def write_snapshot(run_dir: Path, name: str, payload: dict) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# prepare-data


def cmd_prepare_data(args) -> int:
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise CliError(f"corpus directory not found: {corpus}")
    records, errors, speakers = data.scan_corpus(corpus, args.vocab)
    for msg in errors:
        print(f"invalid: {msg}", file=sys.stderr)
    if errors:
        raise data.ManifestError(f"{len(errors)} invalid entries; first: {errors[0]}")
    if not records:
        raise data.ManifestError(f"no entries found under {corpus}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    base = out.parent.resolve()
    entries = [data.ManifestEntry(os.path.relpath(p.resolve(), base), spk, ids) for p, spk, ids, _, _ in records]
    data.write_manifest(out, entries)
    write_snapshot(out.parent, out.stem + ".config", args_snapshot(args))
    hours = sum(r[3] for r in records) / 3600
    print(f"clips={len(records)} speakers={len(speakers)} hours={hours:.4f} manifest={out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_config_file(path) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def resolve_configs(args) -> tuple[training.ModelConfig, training.TrainingConfig]:
    """defaults < config file < command-line flags."""
    layered = _load_config_file(args.config)
    model_d = layered.get("model", {})
    train_d = dict(layered.get("train", {}))
    for flag in ("lr0", "lr_decay", "batch_size", "alpha", "top_k", "seed", "segment_frames", "lambda_mel",
                 "fm_weight", "grad_clip"):
        value = getattr(args, flag, None)
        if value is not None:
            train_d[flag] = value
    model_cfg = training.config_from_dict(training.ModelConfig, model_d)
    return model_cfg, training.config_from_dict(training.TrainingConfig, train_d)


def cmd_train(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(max(1, args.threads))
    ckpt = run_dir / "checkpoint.pt"
    if args.resume:
        dataset = data.load_dataset(args.manifest)
        trainer = training.resume_trainer(ckpt, dataset, run_dir)
        print(f"resumed at step {trainer.state.step}")
    else:
        model_cfg, train_cfg = resolve_configs(args)
        vocab_path = Path(args.vocab) if args.vocab else Path(args.manifest).parent / "phones.txt"
        dataset = data.load_dataset(args.manifest)
        if vocab_path.exists():
            vocab = data.read_vocabulary(vocab_path)
            data.write_vocabulary(run_dir / "phones.txt", vocab)
            model_cfg.n_vocab = len(vocab)
        else:
            model_cfg.n_vocab = max(int(u.ids.max()) for u in dataset.utterances) + 1
        model_cfg.n_speakers = dataset.n_speakers
        trainer = training.Trainer(dataset, model_cfg, train_cfg, run_dir)
    st = trainer.state
    write_snapshot(run_dir, "config", {
        "model": asdict(st.model_cfg), "train": asdict(st.train_cfg), "manifest": str(args.manifest),
        "max_steps": args.max_steps, "config_hash": training.config_hash(st.model_cfg, st.train_cfg),
    })

    def progress(report):
        if report["step"] % max(1, args.print_every) == 0:
            print(f"step {report['step']} epoch {report['epoch']} total {report['total']:.4f} "
                  f"rec {report['rec']:.4f} kl {report['kl']:.4f} dur {report['dur']:.4f} adv {report['adv']:.4f}")

    trainer.train(args.max_steps, checkpoint_every=args.checkpoint_every, callback=progress)
    print(f"checkpoint={ckpt} step={st.step}")
    return 0


# ---------------------------------------------------------------------------
# synth


def _vocab_for(checkpoint: Path, explicit) -> list[str]:
    path = Path(explicit) if explicit else checkpoint.parent / "phones.txt"
    if not path.exists():
        raise CliError(f"vocabulary file not found: {path}")
    return data.read_vocabulary(path)


def cmd_synth(args) -> int:
    ckpt = Path(args.checkpoint)
    gen = training.load_generator(ckpt)
    vocab = _vocab_for(ckpt, args.vocab)
    index = {s: i for i, s in enumerate(vocab)}
    symbols = args.phonemes.split() if args.phonemes else Path(args.phoneme_file).read_text().split()
    if not symbols:
        raise CliError("empty phoneme input")
    unknown = [s for s in symbols if s not in index]
    if unknown:
        raise CliError(f"unknown phonemes {unknown}")
    n_spk = gen.cfg.n_speakers
    if not 0 <= args.speaker < n_spk:
        raise CliError(f"unknown speaker id {args.speaker}; valid range is 0..{n_spk - 1}")
    torch.manual_seed(args.seed)
    g = torch.Generator().manual_seed(args.seed)
    ids = torch.tensor([[index[s] for s in symbols]])
    wavs, durations = gen.infer(ids, torch.tensor([args.speaker]), noise_scale=args.noise_scale, generator=g)
    wav = wavs[0].numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_wav(out, wav, gen.cfg.sample_rate)
    sidecar = Path(args.sidecar) if args.sidecar else out.with_suffix(".dur.tsv")
    evaluation.write_sidecar(sidecar, symbols, durations[0].tolist())
    write_snapshot(out.parent, out.stem + ".config", args_snapshot(args))
    print(f"audio={out} samples={len(wav)} frames={int(durations.sum())} sidecar={sidecar}")
    return 0


# ---------------------------------------------------------------------------
# eval-vocoder


def collect_clips(audio_dir: Path) -> tuple[list[evaluation.Clip], int]:
    if not audio_dir.is_dir():
        raise CliError(f"audio directory not found: {audio_dir}")
    subdirs = sorted(p.name for p in audio_dir.iterdir() if p.is_dir())
    clips, sample_rate = [], None
    for path in sorted(audio_dir.rglob("*.wav")):
        wav, sr = data.read_wav(path)
        if sample_rate is None:
            sample_rate = sr
        elif sr != sample_rate:
            raise CliError(f"{path}: sample rate {sr} != {sample_rate}")
        rel = path.relative_to(audio_dir)
        spk = subdirs.index(rel.parts[0]) if len(rel.parts) > 1 else 0
        clips.append(evaluation.Clip(path.stem, torch.from_numpy(wav), spk))
    if not clips:
        raise CliError(f"no .wav files under {audio_dir}")
    return clips, sample_rate


def cmd_eval_vocoder(args) -> int:
    clips, sr = collect_clips(Path(args.audio_dir))
    if args.identity:
        model, cfg_hash = None, "identity"
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --identity is given")
        payload = training.read_checkpoint(args.checkpoint)
        cfg_hash = training.config_hash(*training.checkpoint_configs(payload))
        model = training.load_generator(args.checkpoint)
        if model.cfg.sample_rate != sr:
            raise CliError(f"audio sample rate {sr} != model sample rate {model.cfg.sample_rate}")
        n_spk = model.cfg.n_speakers
        for c in clips:
            c.speaker_id = min(c.speaker_id, n_spk - 1)
    report, rows = evaluation.encode_decode_eval(clips, model, sr)
    if args.rtf and model is not None:
        clip = clips[0]
        n = (clip.wav.shape[-1] // model.hop) * model.hop
        spec = dsp.magnitude(clip.wav[:n], model.vocoder.stft_cfg, eps=1e-6).float()[None]
        spk = torch.tensor([clip.speaker_id])
        report.rtf_cpu = evaluation.measure_rtf(lambda: model.encode_decode(spec, spk), n / sr)
    report.pesq_external = evaluation.read_external_pesq(args.pesq_file)
    report.metadata = evaluation.report_metadata(cfg_hash, args.dataset or Path(args.audio_dir).name,
                                                 clips=len(clips), sample_rate=sr, mode="identity"
                                                 if model is None else "encode-decode")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    if args.rows:
        evaluation.write_rows(args.rows, rows)
    write_snapshot(out.parent, out.stem + ".config", args_snapshot(args))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "metadata"}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval-prosody


def load_duration_dir(path: Path, hop: int, sample_rate: int) -> dict:
    """Utterance stem -> (speaker key, AlignmentIntervals) from TextGrids or sidecars."""
    if not path.is_dir():
        raise CliError(f"duration directory not found: {path}")
    out = {}
    for f in sorted(path.rglob("*")):
        if f.suffix == ".TextGrid":
            iv = parse_textgrid(f)
            stem = f.stem
        elif f.name.endswith(".dur.tsv"):
            iv = evaluation.read_sidecar(f, hop, sample_rate)
            stem = f.name[: -len(".dur.tsv")]
        else:
            continue
        rel = f.relative_to(path)
        out[stem] = (rel.parts[0] if len(rel.parts) > 1 else "all", iv)
    if not out:
        raise CliError(f"no TextGrid or .dur.tsv files under {path}")
    return out


def cmd_eval_prosody(args) -> int:
    hop, sr = args.hop, args.sample_rate
    gt = load_duration_dir(Path(args.gt), hop, sr)
    systems = {}
    for spec in args.system:
        name, _, folder = spec.partition("=")
        if not folder:
            raise CliError(f"--system expects NAME=DIR, got {spec!r}")
        systems[name] = load_duration_dir(Path(folder), hop, sr)
    speaker_of = {k: v[0] for k, v in gt.items()}
    if args.manifest:
        m = data.read_manifest(args.manifest)
        speaker_of.update({Path(e.audio_path).stem: f"spk{e.speaker_id}" for e in m.entries})
    gt_means = {k: evaluation.phone_mean_duration(iv) for k, (_, iv) in gt.items()}
    thresholds = evaluation.speaker_thresholds(gt_means, speaker_of)
    gt_cat = {k: evaluation.categorize_prosody(v, thresholds[speaker_of[k]]).value for k, v in gt_means.items()}

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bin_width = hop / sr
    result = {"thresholds": {str(k): asdict(v) for k, v in thresholds.items()},
              "threshold_rule": "per-speaker ground-truth tertiles", "js_base": 2,
              "js_bin_seconds": bin_width, "systems": {}}
    all_sets = {"gt": gt, **systems}
    for name, sets in all_sets.items():
        by_spk: dict[str, list[float]] = {}
        for k, (_, iv) in sets.items():
            by_spk.setdefault(speaker_of.get(k, "all"), []).extend(iv.durations())
        for spk, durs in sorted(by_spk.items()):
            evaluation.duration_distribution(durs, bin_width=bin_width).export(out_dir / f"dist_{name}_{spk}.tsv")
    for name, sets in systems.items():
        missing = sorted(set(gt) - set(sets))
        if missing:
            raise CliError(f"system {name} lacks utterances {missing[:3]}")
        pred_cat = {k: evaluation.categorize_prosody(evaluation.phone_mean_duration(sets[k][1]),
                                                      thresholds[speaker_of[k]]).value for k in gt}
        acc = evaluation.prosody_accuracy(pred_cat, gt_cat)
        js_mean, js_var = evaluation.js_report({k: sets[k][1].durations() for k in gt},
                                               {k: gt[k][1].durations() for k in gt}, bin_width=bin_width)
        result["systems"][name] = {"duration_accuracy": acc, "js_mean": js_mean, "js_var": js_var}
    names = list(systems)
    pairs = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = sorted(set(systems[a]) & set(systems[b]))
            m, v = evaluation.js_report({k: systems[a][k][1].durations() for k in common},
                                        {k: systems[b][k][1].durations() for k in common}, bin_width=bin_width)
            pairs[f"{a}|{b}"] = {"js_mean": m, "js_var": v}
    result["pairs"] = pairs
    (out_dir / "prosody_report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_snapshot(out_dir, "config", args_snapshot(args))
    print(json.dumps(result["systems"], sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.exports:
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        for path in args.exports:
            dist = evaluation.DurationDistribution.load(path)
            ax.plot(dist.support, dist.density, label=Path(path).stem, linewidth=1.2)
        ax.set_xlabel("duration (s)")
        ax.set_ylabel("probability")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out, metadata={"Software": None})
        plt.close(fig)
        print(f"overlay={out}")
    if args.audio:
        wav, sr = data.read_wav(args.audio)
        log_mag = torch.log10(dsp.magnitude(torch.from_numpy(wav), dsp.MODEL_STFT, eps=1e-5)).numpy()
        spec_out = Path(args.spec_out) if args.spec_out else out.with_name(out.stem + "_spec.png")
        plt.imsave(spec_out, np.flipud(log_mag), cmap="magma", metadata={"Software": None})
        print(f"spectrogram={spec_out} frames={log_mag.shape[1]}")
    if not args.exports and not args.audio:
        raise CliError("nothing to plot: give --exports and/or --audio")
    write_snapshot(out.parent, out.stem + ".config", args_snapshot(args))
    return 0


# ---------------------------------------------------------------------------
# toy corpus


def cmd_make_toy_corpus(args) -> int:
    data.make_toy_corpus(args.out, args.n_train, args.n_heldout, args.seed)
    write_snapshot(Path(args.out), "toy_corpus.config", args_snapshot(args))
    print(f"toy corpus written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moetts")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="scan a corpus and write a manifest")
    s.add_argument("corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--vocab", default="phones.txt", help="vocabulary file name inside the corpus")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", help="train the synthesizer")
    s.add_argument("--manifest", required=True)
    s.add_argument("--run-dir", default=None, help=f"defaults to ${RUN_DIR_ENV} or runs/default")
    s.add_argument("--config", default=None, help="JSON file with 'model' and 'train' sections")
    s.add_argument("--vocab", default=None)
    s.add_argument("--max-steps", type=int, default=1000)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--checkpoint-every", type=int, default=100)
    s.add_argument("--print-every", type=int, default=10)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--lr0", type=float)
    s.add_argument("--lr-decay", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--top-k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--segment-frames", type=int)
    s.add_argument("--lambda-mel", type=float)
    s.add_argument("--fm-weight", type=float)
    s.add_argument("--grad-clip", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize speech from phonemes")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--phonemes", help="space-separated phoneme symbols")
    g.add_argument("--phoneme-file")
    s.add_argument("--speaker", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--sidecar", default=None)
    s.add_argument("--vocab", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-scale", type=float, default=0.667)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval-vocoder", help="encode/decode metrics on an audio set")
    s.add_argument("--audio-dir", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--identity", action="store_true", help="score the audio against itself")
    s.add_argument("--out", required=True)
    s.add_argument("--rows", default=None, help="optional per-clip NDJSON output")
    s.add_argument("--rtf", action="store_true")
    s.add_argument("--pesq-file", default=None)
    s.add_argument("--dataset", default=None)
    s.set_defaults(func=cmd_eval_vocoder)

    s = sub.add_parser("eval-prosody", help="prosody accuracy and duration JS divergence")
    s.add_argument("--gt", required=True, help="directory of ground-truth TextGrids")
    s.add_argument("--system", action="append", default=[], help="NAME=DIR of TextGrids or .dur.tsv sidecars")
    s.add_argument("--manifest", default=None)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--hop", type=int, default=256)
    s.add_argument("--sample-rate", type=int, default=22050)
    s.set_defaults(func=cmd_eval_prosody)

    s = sub.add_parser("plot", help="duration overlays and spectrogram images")
    s.add_argument("--exports", nargs="*", default=[])
    s.add_argument("--audio", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--spec-out", default=None)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("make-toy-corpus", help="write the synthetic multi-speaker corpus")
    s.add_argument("out")
    s.add_argument("--n-train", type=int, default=50)
    s.add_argument("--n-heldout", type=int, default=9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
