import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from moetts import moe


def _router(weight, bias=None):
    r = nn.Linear(weight.shape[1], weight.shape[0])
    with torch.no_grad():
        r.weight.copy_(weight)
        r.bias.copy_(torch.zeros(weight.shape[0]) if bias is None else bias)
    return r


def test_zero_router_uniform_and_lowest_index():
    r = _router(torch.zeros(8, 4))
    state = moe.route(torch.randn(5, 4), torch.randn(4), r, top_k=1)
    torch.testing.assert_close(state.probs, torch.full((5, 8), 1 / 8))
    assert state.selected.flatten().tolist() == [0] * 5


def test_two_expert_closed_form():
    r = _router(torch.zeros(2, 1), torch.tensor([math.log(3), 0.0]))
    state = moe.route(torch.zeros(1, 1), torch.zeros(1), r)
    torch.testing.assert_close(state.probs, torch.tensor([[0.75, 0.25]]))
    assert state.selected.tolist() == [[0]]


def test_routing_is_speaker_dependent():
    torch.manual_seed(0)
    changed = 0
    for _ in range(20):
        r = nn.Linear(16, 8)
        x = torch.randn(3, 16)
        a = moe.route(x, torch.randn(16), r).probs
        b = moe.route(x, torch.randn(16), r).probs
        changed += int(not torch.allclose(a, b))
    assert changed == 20


def test_route_rejects_nan():
    r = _router(torch.zeros(2, 2))
    with pytest.raises(ValueError, match="NaN"):
        moe.route(torch.tensor([[float("nan"), 0.0]]), torch.zeros(2), r)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(2, 8), st.integers(0, 10_000))
def test_probability_simplex(n_tok, n_exp, seed):
    torch.manual_seed(seed)
    state = moe.route(torch.randn(n_tok, 6), torch.randn(6), nn.Linear(6, n_exp), top_k=min(2, n_exp))
    torch.testing.assert_close(state.probs.sum(-1), torch.ones(n_tok), atol=1e-6, rtol=0)
    top = torch.topk(state.probs, state.top_k, dim=-1).values
    torch.testing.assert_close(torch.gather(state.probs, 1, state.selected), top)


class _Scale(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        return self.c * x


def test_saturated_identity_expert():
    x = torch.randn(4, 3)
    probs = torch.tensor([[1 - 1e-9, 1e-9]]).expand(4, 2)
    state = moe.RouterState(probs, moe.topk_stable(probs, 1))
    y = moe.moe_combine(x, state, [nn.Identity(), _Scale(5.0)])
    torch.testing.assert_close(y, x, atol=1e-6, rtol=0)


def test_eq2_direct_evaluation():
    x = torch.randn(1, 3)
    probs = torch.tensor([[0.6, 0.4]])
    state = moe.RouterState(probs, moe.topk_stable(probs, 1))
    y = moe.moe_combine(x, state, [_Scale(2.0), _Scale(-7.0)])
    torch.testing.assert_close(y, 1.2 * x)


def test_expert_width_mismatch():
    x = torch.randn(2, 3)
    probs = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    state = moe.RouterState(probs, moe.topk_stable(probs, 1))
    with pytest.raises(ValueError, match="width"):
        moe.moe_combine(x, state, [nn.Linear(3, 4), nn.Linear(3, 3)])


def test_dense_limit_matches_mixture():
    torch.manual_seed(1)
    for _ in range(20):
        layer = moe.SwitchFeedForward(8, 16, n_experts=4, top_k=4).double()
        x, s = torch.randn(6, 8, dtype=torch.float64), torch.randn(6, 8, dtype=torch.float64)
        y, state = layer(x, s)
        torch.testing.assert_close(y, moe.dense_mixture(x, state.probs, layer.experts), atol=1e-6, rtol=0)


def test_load_balance_examples():
    n = 8
    # exactly uniform probabilities: P_i = 1/N, so the loss is alpha however ties are counted
    uniform = torch.full((16, n), 1 / n, dtype=torch.float64)
    assert float(moe.load_balancing_loss(uniform, 0.01)) == pytest.approx(0.01, abs=1e-15)
    # near-uniform with argmax spread evenly over experts
    spread = uniform + 1e-9 * (torch.eye(n, dtype=torch.float64).repeat(2, 1) - 1 / n)
    assert moe.load_stats(spread).counts.tolist() == [2] * n
    assert float(moe.load_balancing_loss(spread, 0.01)) == pytest.approx(0.01, abs=1e-12)
    collapsed = torch.zeros(16, n, dtype=torch.float64)
    collapsed[:, 3] = 1
    assert float(moe.load_balancing_loss(collapsed, 0.01)) == pytest.approx(0.08, abs=1e-15)
    p1 = torch.tensor([0.9, 0.8, 0.6, 0.4], dtype=torch.float64)
    probs = torch.stack([p1, 1 - p1], dim=1)
    stats = moe.load_stats(probs)
    assert stats.f.tolist() == [0.75, 0.25]
    torch.testing.assert_close(stats.P, torch.tensor([0.675, 0.325], dtype=torch.float64))
    assert float(moe.load_balancing_loss(probs, 1.0)) == pytest.approx(1.175, abs=1e-9)


def test_load_balance_empty_batch():
    with pytest.raises(ValueError):
        moe.load_balancing_loss(torch.zeros(0, 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(2, 8), st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_load_balance_bounds(n_tok, n_exp, seed, temp):
    torch.manual_seed(seed)
    probs = torch.softmax(torch.randn(n_tok, n_exp, dtype=torch.float64) * temp, -1)
    loss = float(moe.load_balancing_loss(probs, 0.01))
    assert 0.0 <= loss <= 0.01 * n_exp + 1e-12


def test_load_balance_can_dip_below_alpha():
    # a minority of confident tokens pulls P away from the majority's argmax expert
    probs = torch.tensor([[0.51, 0.49]] * 9 + [[0.0, 1.0]], dtype=torch.float64)
    loss = float(moe.load_balancing_loss(probs, 1.0))
    assert loss == pytest.approx(2 * (0.9 * 0.459 + 0.1 * 0.541), abs=1e-12)
    assert loss < 1.0


def test_load_balance_gradient_finite_differences():
    torch.manual_seed(0)
    probs = torch.softmax(torch.randn(12, 8, dtype=torch.float64), -1).requires_grad_(True)
    loss = moe.load_balancing_loss(probs, 0.01)
    (grad,) = torch.autograd.grad(loss, probs)
    h = 1e-6
    for t in range(12):
        for i in range(8):
            e = torch.zeros_like(probs)
            e[t, i] = h
            # perturbations small enough to leave the argmax counts fixed
            fd = (moe.load_balancing_loss(probs.detach() + e, 0.01) - moe.load_balancing_loss(probs.detach() - e, 0.01)) / (2 * h)
            assert float(grad[t, i]) == pytest.approx(float(fd), rel=1e-4, abs=1e-12)


def _predictor(**kw):
    torch.manual_seed(0)
    cfg = moe.MoeDpConfig(channels=32, n_heads=4, expert_hidden=48, gin_channels=16, dropout=0.0, **kw)
    return moe.MoeDurationPredictor(cfg)


def test_predictor_shape():
    dp = _predictor()
    log_d, states = dp(torch.randn(2, 32, 7), torch.ones(2, 1, 7), torch.randn(2, 16))
    assert log_d.shape == (2, 7)
    assert len(states) == 2
    assert states[0].probs.shape == (14, 8)


def test_predictor_width_mismatch():
    dp = _predictor()
    with pytest.raises(ValueError, match="speaker width"):
        dp(torch.randn(1, 32, 5), torch.ones(1, 1, 5), torch.randn(1, 8))
    with pytest.raises(ValueError, match="expected width"):
        dp(torch.randn(1, 16, 5), torch.ones(1, 1, 5), torch.randn(1, 16))


def test_predictor_masks_padding_tokens():
    dp = _predictor()
    mask = torch.ones(2, 1, 6)
    mask[1, :, 4:] = 0
    _, states = dp(torch.randn(2, 32, 6), mask, torch.randn(2, 16))
    assert states[0].probs.shape[0] == 10


def test_gradient_sparsity_of_unselected_experts():
    dp = _predictor()
    # two tokens are routed to at most two experts per block
    log_d, states = dp(torch.randn(1, 32, 2), torch.ones(1, 1, 2), torch.randn(1, 16))
    log_d.mean().backward()
    for block, state in zip(dp.blocks, states):
        used = set(state.selected.flatten().tolist())
        assert len(used) < 8
        for i, expert in enumerate(block.moe.experts):
            grads = [p.grad for p in expert.parameters()]
            if i in used:
                assert any(g is not None and torch.any(g != 0) for g in grads)
            else:
                assert all(g is None or torch.all(g == 0) for g in grads)


def test_duration_loss_examples():
    target = torch.tensor([[2.0, 5.0, 1.0]])
    assert float(moe.duration_loss(torch.log(target), target)) == 0.0
    assert float(moe.duration_loss(torch.zeros(1, 1), torch.tensor([[math.e]]))) == pytest.approx(1.0)
    with pytest.raises(ValueError, match=">= 1"):
        moe.duration_loss(torch.zeros(1, 2), torch.tensor([[1.0, 0.0]]))


def test_duration_loss_permutation_invariant():
    torch.manual_seed(0)
    pred = torch.randn(1, 9)
    target = torch.randint(1, 10, (1, 9)).float()
    perm = torch.randperm(9)
    assert float(moe.duration_loss(pred, target)) == pytest.approx(float(moe.duration_loss(pred[:, perm], target[:, perm])))


def test_duration_loss_ignores_masked_targets():
    pred = torch.zeros(1, 3)
    target = torch.tensor([[1.0, 1.0, 0.0]])
    mask = torch.tensor([[1.0, 1.0, 0.0]])
    assert float(moe.duration_loss(pred, target, mask)) == 0.0


def test_combined_objective():
    assert float(moe.combined_duration_objective(torch.tensor(1.0), torch.tensor(0.02))) == pytest.approx(1.02)
    uniform_terms = [torch.tensor(0.01), torch.tensor(0.01)]
    assert float(moe.combined_duration_objective(torch.tensor(0.0), uniform_terms)) == pytest.approx(0.01 * 2)
    dp = _predictor(alpha=0.0)
    _, states = dp(torch.randn(1, 32, 5), torch.ones(1, 1, 5), torch.randn(1, 16))
    l_mas = torch.tensor(0.37)
    assert moe.combined_duration_objective(l_mas, dp.aux_loss(states)).item() == pytest.approx(0.37)


def test_assignment_entropy():
    assert moe.assignment_entropy([5, 5, 5, 5]) == pytest.approx(math.log(4))
    assert moe.assignment_entropy([7, 0, 0]) == 0.0
    assert moe.uniform_entropy(8) == pytest.approx(math.log(8))
    stats = moe.load_stats(torch.eye(4))
    assert stats.entropy() == pytest.approx(math.log(4))
    assert np.isclose(float(stats.f.sum()), 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        moe.MoeDpConfig(top_k=9)
    with pytest.raises(ValueError):
        moe.MoeDpConfig(alpha=-1)
