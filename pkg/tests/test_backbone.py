import math

import numpy as np
import pytest
import torch

from moetts import backbone as bb
from moetts import dsp


@pytest.fixture
def text_encoder():
    torch.manual_seed(0)
    return bb.TextEncoder(12, 32, 64, 2, 2).eval()


def test_text_encoder_shapes(text_encoder):
    h, m, logs, mask = text_encoder(torch.tensor([[3]]), torch.tensor([1]))
    assert h.shape == m.shape == logs.shape == (1, 32, 1)
    assert mask.shape == (1, 1, 1)


def test_text_encoder_deterministic(text_encoder):
    ids = torch.tensor([[1, 2, 3, 4]])
    a = text_encoder(ids, torch.tensor([4]))
    b = text_encoder(ids, torch.tensor([4]))
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_text_encoder_batch_permutation(text_encoder):
    ids = torch.randint(0, 12, (4, 6))
    lengths = torch.tensor([6, 4, 5, 3])
    perm = torch.tensor([2, 0, 3, 1])
    h, *_ = text_encoder(ids, lengths)
    hp, *_ = text_encoder(ids[perm], lengths[perm])
    torch.testing.assert_close(hp, h[perm], atol=1e-5, rtol=1e-5)


def test_text_encoder_oov(text_encoder):
    with pytest.raises(ValueError, match="out of range"):
        text_encoder(torch.tensor([[12]]), torch.tensor([1]))


def test_text_encoder_logstd_clamped(text_encoder):
    _, _, logs, _ = text_encoder(torch.randint(0, 12, (2, 9)), torch.tensor([9, 9]))
    assert torch.all(logs >= bb.LOGSTD_MIN) and torch.all(logs <= bb.LOGSTD_MAX)


@pytest.fixture
def posterior():
    torch.manual_seed(0)
    return bb.PosteriorEncoder(513, 16, 16, n_layers=2, gin_channels=8)


def test_posterior_frames_and_eval_mean(posterior):
    spec = torch.rand(1, 513, 13)
    g = torch.randn(1, 8)
    z, m, logs, mask = posterior(spec, torch.tensor([13]), g, noise_scale=0.0)
    assert z.shape == (1, 16, 13)
    assert torch.equal(z, m * mask)
    assert torch.all(logs <= bb.LOGSTD_MAX) and torch.all(logs >= bb.LOGSTD_MIN)


def test_posterior_rejects_nan(posterior):
    spec = torch.rand(1, 513, 4)
    spec[0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="NaN"):
        posterior(spec, torch.tensor([4]))


def test_posterior_speaker_conditioning_changes_z(posterior):
    spec = torch.rand(1, 513, 10)
    z1, *_ = posterior(spec, torch.tensor([10]), torch.randn(1, 8), noise_scale=0.0)
    z2, *_ = posterior(spec, torch.tensor([10]), torch.randn(1, 8), noise_scale=0.0)
    assert torch.mean(torch.abs(z1 - z2)) > 0


def _random_flow(seed=0):
    torch.manual_seed(seed)
    flow = bb.CouplingFlow(16, 16, n_flows=2, n_layers=2, gin_channels=8)
    for c in flow.couplings:
        torch.nn.init.normal_(c.post.weight, std=0.1)
        torch.nn.init.normal_(c.post.bias, std=0.1)
    return flow


def test_flow_identity_at_init():
    torch.manual_seed(0)
    flow = bb.CouplingFlow(16, 16, n_flows=2, n_layers=2, gin_channels=8)
    z = torch.randn(2, 16, 7)
    mask = torch.ones(2, 1, 7)
    out, logdet = flow(z, mask, torch.randn(2, 8))
    assert torch.equal(out, z)
    assert torch.all(logdet == 0)


def test_flow_round_trip():
    flow = _random_flow()
    z = torch.randn(3, 16, 11)
    mask = torch.ones(3, 1, 11)
    g = torch.randn(3, 8)
    u, logdet = flow(z, mask, g)
    back, inv_logdet = flow(u, mask, g, reverse=True)
    assert torch.max(torch.abs(back - z)) <= 1e-4
    torch.testing.assert_close(logdet, -inv_logdet, atol=1e-4, rtol=1e-4)
    assert torch.any(logdet != 0)


def test_flow_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        _random_flow()(torch.randn(1, 8, 3), torch.ones(1, 1, 3))


def test_flow_logdet_matches_jacobian():
    flow = _random_flow().double()
    z = torch.randn(1, 16, 2, dtype=torch.float64)
    mask = torch.ones(1, 1, 2, dtype=torch.float64)
    g = torch.randn(1, 8, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda x: flow(x.view(1, 16, 2), mask, g)[0].flatten(), z.flatten())
    _, logdet = flow(z, mask, g)
    assert logdet.item() == pytest.approx(float(torch.linalg.slogdet(jac)[1]), abs=1e-8)


def test_gaussian_log_likelihood_matches_direct():
    torch.manual_seed(0)
    z = torch.randn(1, 4, 5, dtype=torch.float64)
    m = torch.randn(1, 4, 3, dtype=torch.float64)
    logs = 0.3 * torch.randn(1, 4, 3, dtype=torch.float64)
    ll = bb.gaussian_log_likelihood(z, m, logs)
    direct = torch.distributions.Normal(m[0, :, :, None], torch.exp(logs[0, :, :, None])).log_prob(z[0, :, None, :])
    torch.testing.assert_close(ll[0], direct.sum(0))


def test_kl_zero_when_matched():
    m = torch.randn(1, 4, 6)
    logs = 0.2 * torch.randn(1, 4, 6)
    assert float(bb.kl_loss(m, logs, m, logs)) == pytest.approx(0.0, abs=1e-7)


def test_kl_mean_shift_closed_form():
    mu = 0.7
    zeros = torch.zeros(1, 10, 5, dtype=torch.float64)
    kl = bb.kl_loss(zeros + mu, zeros, zeros, zeros)
    assert float(kl) == pytest.approx(0.5 * mu ** 2)


def test_kl_increases_with_posterior_std():
    zeros = torch.zeros(1, 10, 5, dtype=torch.float64)
    base = bb.kl_loss(zeros, zeros + 0.1, zeros, zeros)
    wider = bb.kl_loss(zeros, zeros + 0.1 + math.log(2), zeros, zeros)
    assert float(wider) > float(base)


def test_kl_frame_mismatch():
    with pytest.raises(ValueError, match="frame mismatch"):
        bb.kl_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), torch.zeros(1, 2, 4))


def test_kl_sample_estimator_identity_flow_unbiased():
    # with z_p a posterior sample and identity flow, the estimator's expectation is the closed form
    torch.manual_seed(0)
    mp = torch.zeros(1, 1, 200_000, dtype=torch.float64)
    lp = torch.zeros_like(mp)
    mq, lq = mp + 0.4, lp - 0.3
    z = mq + torch.exp(lq) * torch.randn_like(mq)
    est = bb.kl_loss(mq, lq, mp, lp, z_p=z, logdet=torch.zeros(1, dtype=torch.float64))
    exact = bb.kl_loss(mq, lq, mp, lp)
    assert float(est) == pytest.approx(float(exact), abs=5e-3)


def test_kl_gradcheck():
    torch.manual_seed(0)
    args = [(torch.randn(1, 10, 1, dtype=torch.float64) * s).requires_grad_(True) for s in (1, 0.3, 1, 0.3)]
    assert torch.autograd.gradcheck(lambda a, b, c, d: bb.kl_loss(a, b, c, d), args, eps=1e-6, atol=1e-7, rtol=1e-3)


def test_reconstruction_loss_examples():
    sr = 22050
    w = torch.from_numpy(np.sin(2 * np.pi * 300 * np.arange(4096) / sr))
    assert float(bb.reconstruction_loss(w, w, sr)) == 0.0
    with pytest.raises(ValueError, match="length mismatch"):
        bb.reconstruction_loss(w[:-1], w, sr)


def test_mel_l1_homogeneity_and_hand_value():
    a = torch.tensor([[0.0], [1.0], [-2.0]])
    b = torch.tensor([[1.0], [1.0], [0.0]])
    assert float(bb.mel_l1_loss(a, b)) == pytest.approx(45 * (1 + 0 + 2) / 3)
    assert float(bb.mel_l1_loss(2 * a, 2 * b)) == pytest.approx(2 * float(bb.mel_l1_loss(a, b)))


def test_reconstruction_loss_gradcheck():
    torch.manual_seed(0)
    w = torch.randn(1024, dtype=torch.float64) * 0.3
    w_hat = (w + 0.05 * torch.randn_like(w)).requires_grad_(True)
    loss = bb.reconstruction_loss(w_hat, w, 22050)
    (grad,) = torch.autograd.grad(loss, w_hat)
    rng = np.random.default_rng(0)
    for i in rng.choice(1024, 10, replace=False):
        e = torch.zeros_like(w)
        e[i] = 1e-6
        fd = (bb.reconstruction_loss(w_hat.detach() + e, w, 22050) - bb.reconstruction_loss(w_hat.detach() - e, w, 22050)) / 2e-6
        assert float(grad[i]) == pytest.approx(float(fd), rel=1e-3, abs=1e-6)


def test_log_mel_uses_model_stft():
    w = torch.zeros(8 * 256)
    assert dsp.log_mel(w, 22050).shape == (80, 8)
