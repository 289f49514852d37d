import numpy as np
import pytest
import torch

from moetts import discriminators as D


def _count(module):
    return sum(p.numel() for p in module.parameters())


@pytest.fixture(scope="module")
def combd():
    torch.manual_seed(0)
    return D.CoMBD()


@pytest.fixture(scope="module")
def sbd():
    torch.manual_seed(0)
    return D.SBD()


def test_combd_three_maps_at_4096(combd):
    out = combd(torch.randn(2, 4096))
    assert len(out.logits) == 3
    lengths = [x.shape[-1] for x in out.logits]
    assert lengths[0] == 2 * lengths[1] == 4 * lengths[2]
    assert all(len(f) == len(combd.discs[0].layers) for f in out.features)
    assert all(torch.isfinite(x).all() for x in out.logits)


def test_combd_sharing_is_independent_of_resolutions():
    single = D.CoMBD(D.CombdConfig(resolutions=(1,)))
    triple = D.CoMBD(D.CombdConfig(resolutions=(1, 2, 4)))
    assert _count(single) == _count(triple) == _count(D.ScaleDiscriminator())
    unshared = D.CoMBD(D.CombdConfig(shared_params=False))
    assert _count(unshared) == 3 * _count(single)


def test_combd_zero_input_identical_logits(combd):
    out = combd(torch.zeros(1, 4096))
    # pooled zero is zero, so each map is the shared network's response to silence
    for f, score in zip((1, 2, 4), out.logits):
        assert torch.equal(score, combd.discs[0](torch.zeros(1, 1, 4096 // f))[0])
    # the maps differ only in length: their leading positions see identical (zero) context
    lead = torch.stack([x[0, :4] for x in out.logits])
    torch.testing.assert_close(lead, lead[:1].expand(3, 4), atol=1e-6, rtol=0)


def test_combd_too_short(combd):
    with pytest.raises(ValueError, match="shorter"):
        combd(torch.randn(1, 100))


def test_combd_config_validation():
    with pytest.raises(ValueError):
        D.CombdConfig(resolutions=(2, 4))
    with pytest.raises(ValueError):
        D.CombdConfig(resolutions=(1, 4, 2))
    with pytest.raises(ValueError, match="power of two"):
        D.CoMBD(D.CombdConfig(resolutions=(1, 3)))


def test_sbd_three_maps(sbd):
    out = sbd(torch.randn(1, 4096))
    assert len(out.logits) == 3
    assert all(len(f) == len(sbd.cfg.channels) for f in out.features)


def test_sbd_low_tone_energy_in_band_zero(sbd):
    t = np.arange(8192) / 22050
    w = torch.from_numpy(np.sin(2 * np.pi * 200 * t)).float()[None]
    energy = sbd.bands(w).pow(2).sum(-1)[0]
    assert float(energy[0] / energy.sum()) >= 0.9
    # the low group (bands 0-7) holds essentially everything
    assert float(energy[8:].sum() / energy.sum()) < 1e-3


def test_sbd_zero_input_gives_bias_response(sbd):
    x = sbd.bands(torch.zeros(1, 1024))
    assert torch.equal(x, torch.zeros_like(x))
    out = sbd(torch.zeros(1, 1024))
    for score in out.logits:
        # constant interior, edges differ only by zero padding of later layers
        assert torch.isfinite(score).all()
    assert torch.equal(sbd(torch.zeros(1, 1024)).logits[0], out.logits[0])


def test_sbd_length_must_divide(sbd):
    with pytest.raises(ValueError, match="divisible"):
        sbd(torch.randn(1, 1000))


def test_sbd_config_validation():
    with pytest.raises(ValueError, match="cover"):
        D.SbdConfig(band_groups=((0, 8),))
    with pytest.raises(ValueError, match="outside"):
        D.SbdConfig(band_groups=((0, 17),))
    with pytest.raises(ValueError, match="dilations"):
        D.SbdConfig(dilations=(0, 1))


def _out(*maps):
    return D.DiscriminatorOutput([torch.as_tensor(m, dtype=torch.float64) for m in maps], [[]])


def test_lsgan_examples():
    adv, gen = D.adversarial_losses(_out(np.ones(5)), _out(np.zeros(5)))
    assert float(adv) == 0.0
    assert float(D.generator_adversarial_loss(_out(np.ones(5)))) == 0.0
    adv, gen = D.adversarial_losses(_out([0.5]), _out([0.5]))
    assert float(adv) == pytest.approx(0.5)
    assert float(gen) == pytest.approx(0.25)
    assert float(D.discriminator_loss(_out([0.5]), _out([0.5]))) == pytest.approx(0.5)


def test_lsgan_structure_mismatch():
    with pytest.raises(ValueError):
        D.adversarial_losses([_out([1.0])], [_out([1.0]), _out([1.0])])
    with pytest.raises(ValueError):
        D.adversarial_losses(_out([1.0], [1.0]), _out([1.0]))
    with pytest.raises(ValueError, match="shape"):
        D.adversarial_losses(_out([1.0, 2.0]), _out([1.0]))


def test_feature_matching_examples():
    torch.manual_seed(0)
    real = [[torch.randn(2, 3, 5), torch.randn(2, 4, 3)], [torch.randn(1, 2)]]
    assert float(D.feature_matching_loss(real, real)) == 0.0
    shifted = [[t + 1 for t in scale] for scale in real]
    assert float(D.feature_matching_loss(real, shifted)) == pytest.approx(1.0)
    noisy = [[t + torch.randn_like(t) for t in scale] for scale in real]
    half = [[r + 0.5 * (n - r) for r, n in zip(rs, ns)] for rs, ns in zip(real, noisy)]
    assert float(D.feature_matching_loss(real, half)) == pytest.approx(0.5 * float(D.feature_matching_loss(real, noisy)))


def test_feature_matching_congruence():
    with pytest.raises(ValueError):
        D.feature_matching_loss([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)])
    with pytest.raises(ValueError, match="shape"):
        D.feature_matching_loss([torch.zeros(2)], [torch.zeros(3)])


def test_losses_non_negative():
    torch.manual_seed(1)
    discs = D.Discriminators()
    real, fake = discs(torch.randn(1, 4096)), discs(torch.randn(1, 4096))
    adv, gen = D.adversarial_losses(real, fake)
    assert adv.item() >= 0 and gen.item() >= 0
    assert D.feature_matching_loss(real, fake).item() >= 0


def test_gradient_wrt_generator_output():
    torch.manual_seed(0)
    discs = D.Discriminators(D.CombdConfig(channels=(4, 8, 8), groups=(1, 2, 2)),
                             D.SbdConfig(channels=(4, 4), pqmf_taps=64)).double()
    w = (0.1 * torch.randn(1, 1024, dtype=torch.float64)).requires_grad_(True)

    def loss(x):
        return D.generator_adversarial_loss(discs(x))

    (grad,) = torch.autograd.grad(loss(w), w)
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in rng.choice(1024, 12, replace=False):
        e = torch.zeros_like(w)
        e[0, i] = h
        with torch.no_grad():
            fd = (loss(w + e) - loss(w - e)) / (2 * h)
        assert abs(float(grad[0, i] - fd)) <= 1e-3 * max(abs(float(fd)), 1e-9)
