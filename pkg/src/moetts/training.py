"""Model assembly, composite objective, optimisation schedule and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dsp
from .alignment import durations_to_frames, mas_align
from .backbone import (CouplingFlow, PosteriorEncoder, TextEncoder, gaussian_log_likelihood, kl_loss,
                       reconstruction_loss, sequence_mask)
from .discriminators import (CombdConfig, Discriminators, SbdConfig, adversarial_losses,
                             feature_matching_loss, generator_adversarial_loss)
from .moe import MoeDpConfig, MoeDurationPredictor, duration_loss, load_stats
from .vocoder import Vocoder, VocoderConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_vocab: int = 12
    n_speakers: int = 3
    sample_rate: int = 22050
    channels: int = 192
    text_layers: int = 2
    text_heads: int = 2
    text_filter: int = 768
    posterior_layers: int = 4
    flow_couplings: int = 2
    flow_layers: int = 2
    dropout: float = 0.1
    moe: MoeDpConfig = field(default_factory=MoeDpConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    combd: CombdConfig = field(default_factory=CombdConfig)
    sbd: SbdConfig = field(default_factory=SbdConfig)


@dataclass
class TrainingConfig:
    lr0: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    lr_decay: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 8
    segment_frames: int = 32
    alpha: float = 0.01
    top_k: int = 1
    lambda_mel: float = 45.0
    fm_weight: float = 2.0
    grad_clip: float = 1000.0
    seed: int = 1234

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def config_from_dict(cls, data: dict):
    """Rebuild a (nested) config dataclass from ``asdict`` output."""
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = f.default_factory
        if is_dataclass(sub) and isinstance(value, dict):
            value = config_from_dict(sub, value)
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lr_at(epoch: int, cfg: TrainingConfig = TrainingConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** epoch


class Synthesizer(nn.Module):
    """Text encoder, speaker table, posterior encoder, flow, MoE duration predictor and vocoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.speaker = nn.Embedding(cfg.n_speakers, c)
        self.text_encoder = TextEncoder(cfg.n_vocab, c, cfg.text_filter, cfg.text_heads, cfg.text_layers,
                                        dropout=cfg.dropout)
        self.posterior = PosteriorEncoder(cfg.vocoder.fft_size // 2 + 1, c, c, n_layers=cfg.posterior_layers,
                                          gin_channels=c)
        self.flow = CouplingFlow(c, c, cfg.flow_couplings, n_layers=cfg.flow_layers, gin_channels=c)
        self.duration_predictor = MoeDurationPredictor(cfg.moe)
        self.vocoder = Vocoder(cfg.vocoder)

    @property
    def hop(self) -> int:
        return self.cfg.vocoder.hop

    def speaker_vector(self, speakers: torch.Tensor) -> torch.Tensor:
        if speakers.numel() and (speakers.min() < 0 or speakers.max() >= self.cfg.n_speakers):
            raise ValueError(f"speaker id outside [0, {self.cfg.n_speakers})")
        return self.speaker(speakers)

    def forward_train(self, batch: dict, segment_frames: int, generator: torch.Generator | None = None) -> dict:
        s = self.speaker_vector(batch["speakers"])
        h, m_p, logs_p, x_mask = self.text_encoder(batch["ids"], batch["id_lengths"])
        z, m_q, logs_q, y_mask = self.posterior(batch["spec"], batch["spec_lengths"], s, generator=generator)
        z_p, logdet = self.flow(z, y_mask, s)

        with torch.no_grad():
            ll = gaussian_log_likelihood(z_p, m_p, logs_p)
            attn = torch.zeros_like(ll)
            for i in range(ll.shape[0]):
                tx, ty = int(batch["id_lengths"][i]), int(batch["spec_lengths"][i])
                attn[i, :tx, :ty] = torch.from_numpy(mas_align(ll[i, :tx, :ty].double().numpy())).to(ll)
        durations = attn.sum(-1)

        log_d, states = self.duration_predictor(h.detach(), x_mask, s.detach())
        l_mas = duration_loss(log_d, durations, x_mask[:, 0])
        l_aux = self.duration_predictor.aux_loss(states)

        m_exp = torch.einsum("bct,bts->bcs", m_p, attn)
        logs_exp = torch.einsum("bct,bts->bcs", logs_p, attn)
        l_kl = kl_loss(m_q, logs_q, m_exp, logs_exp, y_mask, z_p=z_p, logdet=logdet)

        z_seg, starts = random_segments(z, batch["spec_lengths"], segment_frames, generator)
        w_hat = self.vocoder(z_seg, s)
        w_seg = slice_waveform(batch["wav"], starts, segment_frames, self.hop)
        return {
            "w_hat": w_hat, "w_seg": w_seg, "l_mas": l_mas, "l_aux": l_aux, "l_kl": l_kl,
            "states": states, "durations": durations, "attn": attn,
        }

    @torch.no_grad()
    def infer(self, ids: torch.Tensor, speakers: torch.Tensor, noise_scale: float = 0.667,
              generator: torch.Generator | None = None):
        """Text to waveform. Returns ``(wav, durations)`` for a batch of one or more equal-length inputs."""
        lengths = torch.full((ids.shape[0],), ids.shape[1], dtype=torch.long)
        s = self.speaker_vector(speakers)
        h, m_p, logs_p, x_mask = self.text_encoder(ids, lengths)
        log_d, _ = self.duration_predictor(h, x_mask, s)
        durations = durations_to_frames(log_d)
        wavs = []
        for i in range(ids.shape[0]):
            m = torch.repeat_interleave(m_p[i], durations[i], dim=-1)[None]
            logs = torch.repeat_interleave(logs_p[i], durations[i], dim=-1)[None]
            eps = torch.randn(m.shape, generator=generator)
            z_p = m + eps * torch.exp(logs) * noise_scale
            mask = torch.ones(1, 1, z_p.shape[-1])
            z, _ = self.flow(z_p, mask, s[i:i + 1], reverse=True)
            wavs.append(self.vocoder(z, s[i:i + 1])[0])
        return wavs, durations

    @torch.no_grad()
    def encode_decode(self, spec: torch.Tensor, speakers: torch.Tensor) -> torch.Tensor:
        """Posterior mean of a linear spectrogram ``(B, F, T)`` decoded back to ``(B, T * hop)`` samples."""
        lengths = torch.full((spec.shape[0],), spec.shape[-1], dtype=torch.long)
        s = self.speaker_vector(speakers)
        z, _, _, _ = self.posterior(spec, lengths, s, noise_scale=0.0)
        return self.vocoder(z, s)


def random_segments(x: torch.Tensor, lengths: torch.Tensor, size: int, generator=None):
    """Crop ``size`` frames per item at random valid offsets (zero padding for short items)."""
    b, c, t = x.shape
    out = torch.zeros(b, c, size, dtype=x.dtype, device=x.device)
    starts = []
    for i in range(b):
        max_start = max(int(lengths[i]) - size, 0)
        start = int(torch.randint(0, max_start + 1, (1,), generator=generator))
        seg = x[i, :, start:start + size]
        out[i, :, :seg.shape[-1]] = seg
        starts.append(start)
    return out, starts


def slice_waveform(wav: torch.Tensor, starts, size: int, hop: int) -> torch.Tensor:
    out = torch.zeros(wav.shape[0], size * hop, dtype=wav.dtype, device=wav.device)
    for i, start in enumerate(starts):
        seg = wav[i, start * hop:(start + size) * hop]
        out[i, :seg.shape[-1]] = seg
    return out


def total_loss(components: dict) -> tuple[torch.Tensor, dict]:
    """Generator-side objective ``L_rec + L_kl + L_dur + L_gen``.

    ``components`` must hold ``rec``, ``kl``, ``dur`` and ``gen``; any extra
    entries are reported but not summed. Non-finite components raise.
    """
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss component {name!r}: {v}")
    total = components["rec"] + components["kl"] + components["dur"] + components["gen"]
    return total, {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in components.items()}


def build_models(model_cfg: ModelConfig, train_cfg: TrainingConfig):
    model_cfg.moe.alpha = train_cfg.alpha
    model_cfg.moe.top_k = train_cfg.top_k
    torch.manual_seed(train_cfg.seed)
    gen = Synthesizer(model_cfg)
    disc = Discriminators(model_cfg.combd, model_cfg.sbd)
    opt_g = torch.optim.AdamW(gen.parameters(), lr=train_cfg.lr0, betas=train_cfg.betas,
                              weight_decay=train_cfg.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=train_cfg.lr0, betas=train_cfg.betas,
                              weight_decay=train_cfg.weight_decay)
    return gen, disc, opt_g, opt_d


def _grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.norm(torch.stack(norms))) if norms else 0.0


def train_step(batch: dict, gen: Synthesizer, disc: Discriminators, opt_g, opt_d, cfg: TrainingConfig,
               generator: torch.Generator | None = None) -> dict:
    """One discriminator update followed by one generator update."""
    gen.train()
    disc.train()
    out = gen.forward_train(batch, cfg.segment_frames, generator)
    w_hat, w_seg = out["w_hat"], out["w_seg"]
    sr = gen.cfg.sample_rate

    # discriminator phase
    opt_d.zero_grad(set_to_none=True)
    l_adv, _ = adversarial_losses(disc(w_seg), disc(w_hat.detach()))
    if not math.isfinite(l_adv.item()):
        raise TrainingError(f"non-finite loss component 'adv': {l_adv.item()}")
    l_adv.backward()
    d_norm = float(torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip))
    opt_d.step()

    # generator phase
    opt_g.zero_grad(set_to_none=True)
    with torch.no_grad():
        real = disc(w_seg)
    fake = disc(w_hat)
    l_gen_adv = generator_adversarial_loss(fake)
    l_fm = feature_matching_loss(real, fake)
    l_rec = reconstruction_loss(w_hat, w_seg, sr, cfg.lambda_mel)
    l_dur = out["l_mas"] + out["l_aux"]
    components = {
        "rec": l_rec, "kl": out["l_kl"], "dur": l_dur, "gen": l_gen_adv + cfg.fm_weight * l_fm,
    }
    loss_g, report = total_loss(components)
    loss_g.backward()
    disc.zero_grad(set_to_none=True)
    g_norm = float(torch.nn.utils.clip_grad_norm_(gen.parameters(), cfg.grad_clip))
    opt_g.step()

    hist = [load_stats(st.probs.detach()).counts.tolist() for st in out["states"]]
    report.update({
        "total": loss_g.item(), "adv": l_adv.item(), "mas": out["l_mas"].item(), "aux": out["l_aux"].item(),
        "gen_adv": l_gen_adv.item(), "fm": l_fm.item(), "grad_norm_g": g_norm, "grad_norm_d": d_norm,
        "expert_counts": hist,
    })
    return report


@dataclass
class TrainState:
    gen: Synthesizer
    disc: Discriminators
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    model_cfg: ModelConfig
    train_cfg: TrainingConfig
    step: int = 0
    epoch: int = 0
    rng_state: bytes | None = None


class Trainer:
    """End-to-end loop with epoch-wise LR decay, structured logs and checkpoints."""

    def __init__(self, dataset, model_cfg: ModelConfig, train_cfg: TrainingConfig, run_dir=None):
        self.dataset = dataset
        model_cfg.sample_rate = dataset.sample_rate
        model_cfg.n_speakers = max(model_cfg.n_speakers, dataset.n_speakers)
        gen, disc, opt_g, opt_d = build_models(model_cfg, train_cfg)
        self.state = TrainState(gen, disc, opt_g, opt_d, model_cfg, train_cfg)
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.generator = torch.Generator().manual_seed(train_cfg.seed)
        self.history: list[dict] = []

    def _set_lr(self):
        lr = lr_at(self.state.epoch, self.state.train_cfg)
        for opt in (self.state.opt_g, self.state.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def batches(self):
        cfg = self.state.train_cfg
        while True:
            yield from self.dataset.batches(cfg.batch_size, cfg.seed, self.state.epoch)
            self.state.epoch += 1

    def train(self, max_steps: int, checkpoint_every: int = 0, log_every: int = 1, callback=None):
        st = self.state
        log_file = open(self.run_dir / "train_log.jsonl", "a") if self.run_dir else None
        try:
            it = self._batches_from(st.epoch)
            while st.step < max_steps:
                epoch, batch = next(it)
                st.epoch = epoch
                lr = self._set_lr()
                try:
                    report = train_step(batch, st.gen, st.disc, st.opt_g, st.opt_d, st.train_cfg, self.generator)
                except TrainingError:
                    if self.run_dir:
                        log.error("non-finite loss at step %d; last good checkpoint kept", st.step + 1)
                    raise
                st.step += 1
                report.update(step=st.step, epoch=st.epoch, lr=lr)
                self.history.append(report)
                if log_file and st.step % log_every == 0:
                    log_file.write(json.dumps(report) + "\n")
                    log_file.flush()
                if callback:
                    callback(report)
                if self.run_dir and checkpoint_every and st.step % checkpoint_every == 0:
                    save_checkpoint(st, self.run_dir / "checkpoint.pt", self.generator)
        finally:
            if log_file:
                log_file.close()
        if self.run_dir:
            save_checkpoint(st, self.run_dir / "checkpoint.pt", self.generator)
        return self.history

    def _batches_from(self, epoch: int):
        cfg = self.state.train_cfg
        # skip the part of the epoch consumed before a resume
        per_epoch = math.ceil(len(self.dataset) / cfg.batch_size)
        skip = self.state.step - epoch * per_epoch if self.state.step else 0
        while True:
            for i, batch in enumerate(self.dataset.batches(cfg.batch_size, cfg.seed, epoch)):
                if skip > 0 and i < skip:
                    continue
                yield epoch, batch
            skip = 0
            epoch += 1


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path, generator: torch.Generator | None = None) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "step": state.step,
        "epoch": state.epoch,
        "config": json.dumps({"model": asdict(state.model_cfg), "train": asdict(state.train_cfg)}),
        "generator": state.gen.state_dict(),
        "discriminator": state.disc.state_dict(),
        "optim_g": state.opt_g.state_dict(),
        "optim_d": state.opt_d.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "data_rng": generator.get_state() if generator is not None else None,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
        payload = torch.load(io.BytesIO(raw), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema_version {payload['schema_version']} != supported {SCHEMA_VERSION}")
    return payload


def checkpoint_configs(payload: dict) -> tuple[ModelConfig, TrainingConfig]:
    cfg = json.loads(payload["config"])
    return config_from_dict(ModelConfig, cfg["model"]), config_from_dict(TrainingConfig, cfg["train"])


def load_checkpoint(path, generator: torch.Generator | None = None) -> TrainState:
    """Rebuild models and optimisers; nothing is constructed unless the whole file is valid."""
    payload = read_checkpoint(path)
    model_cfg, train_cfg = checkpoint_configs(payload)
    gen, disc, opt_g, opt_d = build_models(model_cfg, train_cfg)
    try:
        gen.load_state_dict(payload["generator"])
        disc.load_state_dict(payload["discriminator"])
        opt_g.load_state_dict(payload["optim_g"])
        opt_d.load_state_dict(payload["optim_d"])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from None
    torch.set_rng_state(payload["torch_rng"])
    if generator is not None and payload.get("data_rng") is not None:
        generator.set_state(payload["data_rng"])
    return TrainState(gen, disc, opt_g, opt_d, model_cfg, train_cfg, payload["step"], payload["epoch"])


def load_generator(path) -> Synthesizer:
    payload = read_checkpoint(path)
    model_cfg, _ = checkpoint_configs(payload)
    gen = Synthesizer(model_cfg)
    gen.load_state_dict(payload["generator"])
    return gen.eval()


def resume_trainer(path, dataset, run_dir=None) -> Trainer:
    payload = read_checkpoint(path)
    model_cfg, train_cfg = checkpoint_configs(payload)
    trainer = Trainer(dataset, model_cfg, train_cfg, run_dir)
    trainer.state = load_checkpoint(path, trainer.generator)
    return trainer


# ---------------------------------------------------------------------------
# duration-predictor-only training (routing/load-balance studies)


class DurationModel(nn.Module):
    """Speaker table + text encoder + MoE duration predictor."""

    def __init__(self, n_vocab: int, n_speakers: int, moe_cfg: MoeDpConfig, text_layers: int = 2,
                 dropout: float = 0.1):
        super().__init__()
        channels = moe_cfg.channels
        self.speaker = nn.Embedding(n_speakers, channels)
        self.text_encoder = TextEncoder(n_vocab, channels, 4 * channels, 2, text_layers, dropout=dropout)
        self.duration_predictor = MoeDurationPredictor(moe_cfg)

    def forward(self, ids, lengths, speakers):
        s = self.speaker(speakers)
        h, _, _, mask = self.text_encoder(ids, lengths)
        log_d, states = self.duration_predictor(h, mask, s)
        return log_d, states, mask


def duration_batches(items, batch_size: int, seed: int, epoch: int):
    rng = np.random.default_rng(seed * 7919 + epoch)
    order = rng.permutation(len(items))
    for i in range(0, len(order), batch_size):
        chunk = [items[j] for j in order[i:i + batch_size]]
        t = max(len(ids) for ids, _, _ in chunk)
        ids = torch.zeros(len(chunk), t, dtype=torch.long)
        dur = torch.ones(len(chunk), t)
        for k, (x, _, d) in enumerate(chunk):
            ids[k, :len(x)] = torch.as_tensor(x)
            dur[k, :len(d)] = torch.as_tensor(d, dtype=torch.float32)
        yield ids, torch.tensor([len(x) for x, _, _ in chunk]), torch.tensor([s for _, s, _ in chunk]), dur


def train_duration_model(items, n_vocab: int, n_speakers: int, alpha: float, steps: int, seed: int = 0,
                         batch_size: int = 8, lr: float = 2e-4, top_k: int = 1, telemetry_path=None,
                         moe_overrides: dict | None = None):
    """Fit the MoE duration model on ``(ids, speaker, durations)`` triples.

    Returns per-step records with losses and per-block argmax-assignment counts.
    When ``telemetry_path`` is given, one ``{"step", "block", "counts"}`` line per
    block per step is appended to it.
    """
    torch.manual_seed(seed)
    moe_cfg = MoeDpConfig(alpha=alpha, top_k=top_k, **(moe_overrides or {}))
    model = DurationModel(n_vocab, n_speakers, moe_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.8, 0.99), weight_decay=0.01)
    records = []
    telemetry = open(telemetry_path, "a") if telemetry_path else None
    step, epoch = 0, 0
    try:
        while step < steps:
            for ids, lengths, spk, dur in duration_batches(items, batch_size, seed, epoch):
                if step >= steps:
                    break
                model.train()
                log_d, states, mask = model(ids, lengths, spk)
                l_mas = duration_loss(log_d, dur, mask[:, 0])
                l_aux = model.duration_predictor.aux_loss(states)
                loss = l_mas + l_aux
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                counts = [load_stats(st.probs.detach()).counts.tolist() for st in states]
                records.append({"step": step, "mas": l_mas.item(), "aux": l_aux.item(), "counts": counts})
                if telemetry:
                    for b, c in enumerate(counts):
                        telemetry.write(json.dumps({"step": step, "block": b, "counts": c}) + "\n")
            epoch += 1
    finally:
        if telemetry:
            telemetry.close()
    return model, records
