import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from advgen.adversarial import PerturbationBudget
from advgen.baselines import AttackConfig, CwParams, bim, cw, fgsm, pgd, run_attack
from advgen.labels import LIVE, LIVE_INDEX, SPOOF
from advgen.transforms import NotDifferentiableError


class LinearLogit(nn.Module):
    """Two-class model whose live-minus-spoof logit is w . x."""

    def __init__(self, w):
        super().__init__()
        self.w = torch.as_tensor(w, dtype=torch.float32)

    def forward(self, x):
        z = x.flatten(1) @ self.w
        return torch.stack([torch.zeros_like(z), z], 1)  # (spoof, live)


class SmallPad(nn.Module):
    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Tanh(), nn.Flatten(), nn.Linear(4 * 64, 2))

    def forward(self, x):
        return self.net(x)


def test_fgsm_linear_closed_form():
    x = torch.tensor([[0.5, 0.5]])
    model = LinearLogit([1.0, -2.0])
    # ascending the spoof loss = ascending w . x
    out = fgsm(model, x, SPOOF, 0.1, targeted=False)
    assert torch.allclose(out, torch.tensor([[0.6, 0.4]]), atol=1e-7)
    # targeted toward live descends the live loss: same direction here
    assert torch.allclose(fgsm(model, x, LIVE, 0.1), torch.tensor([[0.6, 0.4]]), atol=1e-7)


def test_fgsm_zero_eps_is_identity():
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(fgsm(SmallPad(), x, LIVE, 0.0), x)


def test_fgsm_rejects_non_differentiable():
    with pytest.raises(NotDifferentiableError):
        fgsm(lambda z: torch.zeros(z.shape[0], 2), torch.zeros(1, 3, 8, 8), LIVE, 0.1)


def test_bim_and_pgd_collapse_to_fgsm():
    torch.manual_seed(0)
    x = torch.rand(4, 3, 8, 8) * 1.6 - 0.8
    pad = SmallPad()
    ref = fgsm(pad, x, LIVE, 0.1)
    assert torch.equal(bim(pad, x, LIVE, 0.1, steps=1, step_size=0.1), ref)
    assert torch.equal(pgd(pad, x, LIVE, 0.1, steps=1, step_size=0.1, rand_init=0.0), ref)


def test_pgd_seeded():
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    a = pgd(SmallPad(), x, LIVE, 0.1, rng=np.random.default_rng(3))
    b = pgd(SmallPad(), x, LIVE, 0.1, rng=np.random.default_rng(3))
    c = pgd(SmallPad(), x, LIVE, 0.1, rng=np.random.default_rng(4))
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_projection_holds_for_10k_cases():
    """Every iterate-producing attack stays in the eps ball and the valid range."""
    g = torch.Generator().manual_seed(0)
    pad = SmallPad(1)
    rng = np.random.default_rng(0)
    n, total = 2500, 0
    x = torch.rand(n, 3, 8, 8, generator=g) * 2 - 1
    # eps drawn from a grid so each value's samples go through one batched call
    grid = rng.choice([0.01, 0.05, 0.1, 0.2, 0.3, 0.5], n)
    for method in ("fgsm", "bim", "pgd", "bim_small"):
        for e in np.unique(grid):
            idx = torch.as_tensor(np.flatnonzero(grid == e))
            xb = x[idx]
            if method == "fgsm":
                out = fgsm(pad, xb, LIVE, float(e))
            elif method == "bim":
                out = bim(pad, xb, LIVE, float(e), steps=3)
            elif method == "bim_small":
                out = bim(pad, xb, SPOOF, float(e), steps=2, step_size=float(e))
            else:
                out = pgd(pad, xb, LIVE, float(e), steps=3, rng=rng)
            assert (out - xb).abs().amax(dim=(1, 2, 3)).max() <= e + 1e-6
            assert out.min() >= -1 and out.max() <= 1
            total += len(idx)
    assert total == 4 * n


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0.0, 0.5), steps=st.integers(1, 4), seed=st.integers(0, 1000))
def test_bim_ball_property(eps, steps, seed):
    x = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    out = bim(SmallPad(), x, LIVE, eps, steps=steps, step_size=max(eps, 1e-3) / 2)
    assert (out - x).abs().max() <= eps + 1e-6
    assert out.abs().max() <= 1


def test_bim_at_least_as_strong_as_fgsm():
    torch.manual_seed(0)
    pad = SmallPad(2)
    x = torch.rand(64, 3, 8, 8) * 2 - 1
    live = lambda z: (pad(z).argmax(1) == LIVE_INDEX).float().mean().item()  # noqa: E731
    loss = lambda z: F.cross_entropy(pad(z), torch.full((len(z),), LIVE_INDEX)).item()  # noqa: E731
    a, b = fgsm(pad, x, LIVE, 0.05), bim(pad, x, LIVE, 0.05, steps=10)
    assert live(b) >= live(a)
    assert loss(b) <= loss(a)


def test_cw_already_target():
    pad = LinearLogit(torch.ones(3 * 8 * 8))
    x = torch.full((2, 3, 8, 8), 0.5)  # live logit 96 > 0
    from advgen.baselines import _cw_margin
    assert (_cw_margin(pad(x), torch.full((2,), LIVE_INDEX), 0.0) <= 0).all()
    adv, found = cw(pad, x, LIVE, CwParams(iterations=20, search_steps=2))
    assert found.all()
    assert (adv - x).flatten(1).norm(dim=1).max() < 1e-3


def test_cw_output_range_and_determinism():
    x = torch.rand(3, 3, 8, 8) * 2 - 1
    a, fa = cw(SmallPad(), x, LIVE, CwParams(iterations=15, search_steps=2))
    b, fb = cw(SmallPad(), x, LIVE, CwParams(iterations=15, search_steps=2))
    assert torch.equal(a, b) and torch.equal(fa, fb)
    assert a.abs().max() <= 1


def test_cw_confidence_counts_as_success_only_with_margin():
    pad = SmallPad(3)
    x = torch.rand(8, 3, 8, 8) * 2 - 1
    adv, found = cw(pad, x, LIVE, CwParams(confidence=1.0, iterations=60, search_steps=3, lr=0.05))
    with torch.no_grad():
        z = pad(adv)
    lead = z[:, LIVE_INDEX] - z[:, 1 - LIVE_INDEX]
    assert (lead[found] >= 1.0 - 1e-5).all()
    assert torch.equal(adv[~found], x[~found])


def test_config_validation_and_dispatch():
    with pytest.raises(ValueError):
        AttackConfig(method="ga")
    with pytest.raises(ValueError):
        AttackConfig(steps=0)
    with pytest.raises(ValueError):
        PerturbationBudget(p=3)
    with pytest.raises(ValueError):
        PerturbationBudget(epsilon=0)
    with pytest.raises(ValueError):
        CwParams(c=0)
    cfg = AttackConfig(method="bim")
    assert cfg.resolved_step_size == pytest.approx(0.025)
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    assert torch.equal(run_attack(SmallPad(), x, LIVE, AttackConfig(method="fgsm")), fgsm(SmallPad(), x, LIVE, 0.1))
