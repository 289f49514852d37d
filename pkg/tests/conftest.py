from pathlib import Path

import pytest
import torch

from moetts import data

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("toy")
    data.make_toy_corpus(root, n_train=50, n_heldout=9, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_manifest(toy_root) -> Path:
    records, errors, _ = data.scan_corpus(toy_root)
    assert not errors
    path = toy_root / "train.tsv"
    data.write_manifest(path, [data.ManifestEntry(str(p.relative_to(toy_root)), s, ids)
                               for p, s, ids, _, _ in records])
    return path


@pytest.fixture(scope="session")
def toy_dataset(toy_manifest):
    return data.load_dataset(toy_manifest)


def tiny_configs(**train_overrides):
    """Small widths so a training step takes well under a second."""
    from moetts import discriminators, moe, training, vocoder

    c = 32
    model = training.ModelConfig(
        channels=c, text_filter=64, posterior_layers=2, flow_layers=1, dropout=0.0,
        moe=moe.MoeDpConfig(channels=c, n_heads=2, expert_hidden=32, gin_channels=c, dropout=0.0),
        vocoder=vocoder.VocoderConfig(in_channels=c, blocks=1, hidden_dim=32, intermediate_dim=64, gin_channels=c),
        combd=discriminators.CombdConfig(channels=(4, 8, 8), groups=(1, 2, 2)),
        sbd=discriminators.SbdConfig(channels=(8, 8), pqmf_taps=64),
    )
    train = training.TrainingConfig(batch_size=4, segment_frames=8, seed=7, **train_overrides)
    return model, train
