import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from advgen.transforms import (IDENTITY, KIND_ORDER, NotDifferentiableError, Transform, TransformDistribution,
                               TransformSpec, apply_transform, eot_loss, gaussian_blur, geometric_residual, lp_norm,
                               sample_transform)


class Linear(nn.Module):
    def __init__(self, n):
        super().__init__()
        torch.manual_seed(0)
        self.fc = nn.Linear(n, 2)

    def forward(self, x):
        return self.fc(x.flatten(1))


def test_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec("rotation", (200.0,))
    with pytest.raises(ValueError):
        TransformSpec("translation", (0.1,))
    with pytest.raises(ValueError):
        TransformSpec("swirl", (1.0,))
    with pytest.raises(ValueError):
        Transform((TransformSpec("rotation", 1.0), TransformSpec("rotation", 2.0)))
    with pytest.raises(ValueError):
        TransformDistribution(ranges={"rotation": (5.0, -5.0)})


def test_specs_sorted_geometric_first():
    t = Transform.of(brightness=0.1, rotation=3.0, defocus=1.0)
    assert [s.kind for s in t.specs] == ["rotation", "defocus", "brightness"]
    assert KIND_ORDER.index("rotation") < KIND_ORDER.index("brightness")


def test_empty_distribution_gives_identity(rng):
    assert sample_transform(TransformDistribution.identity(), rng).is_identity
    assert sample_transform(TransformDistribution.identity(), rng) == IDENTITY


def test_degenerate_range(rng):
    d = TransformDistribution(enabled={"rotation": True}, ranges={"rotation": (10.0, 10.0)})
    assert all(sample_transform(d, rng).get("rotation") == (10.0,) for _ in range(20))


def test_rotation_samples_centered(rng):
    d = TransformDistribution(enabled={"rotation": True}, ranges={"rotation": (-30.0, 30.0)})
    angles = [sample_transform(d, rng).get("rotation")[0] for _ in range(10_000)]
    assert abs(np.mean(angles)) < 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_default_samples_stay_in_range(seed):
    d = TransformDistribution.default()
    t = sample_transform(d, np.random.default_rng(seed))
    for s in t.specs:
        lo, hi = d.ranges[s.kind]
        vals = s.params[1:] if s.kind == "horizontal_fold_shade" else s.params
        assert all(lo <= v <= hi for v in vals)


def test_identity_is_exact(images):
    assert apply_transform(IDENTITY, images) is images
    assert torch.equal(apply_transform(Transform.of(rotation=0.0, brightness=0.0), images), images)
    assert torch.count_nonzero(geometric_residual(IDENTITY, images)) == 0


def test_rotation_round_trip_interior():
    torch.manual_seed(0)
    # smooth image so bilinear resampling error stays small
    x = torch.nn.functional.interpolate(torch.rand(1, 3, 8, 8) * 2 - 1, size=64, mode="bilinear", align_corners=False)
    back = apply_transform(Transform.of(rotation=-12.0), apply_transform(Transform.of(rotation=12.0), x))
    assert (back - x)[..., 16:48, 16:48].abs().mean() < 0.02


def test_brightness_adds_constant():
    x = torch.zeros(1, 3, 16, 16) + torch.linspace(-0.5, 0.5, 16)
    y = apply_transform(Transform.of(brightness=0.1), x)
    assert torch.allclose(y - x, torch.full_like(x, 0.1), atol=1e-6)
    r = geometric_residual(Transform.of(brightness=0.1), x)
    assert torch.allclose(r, torch.full_like(x, 0.1), atol=1e-6)


def test_rotation_residual_matches_direct(images):
    t = Transform.of(rotation=15.0)
    r = geometric_residual(t, images)
    assert r.norm() > 0
    assert torch.allclose(r.norm(), (apply_transform(t, images) - images).norm())


def test_out_of_frame_fill():
    x = torch.ones(1, 3, 32, 32)
    y = apply_transform(Transform.of(translation=(0.5, 0.0)), x)
    assert y[..., :4].abs().max() == 0.0  # mid-gray entered from the left edge


def test_gaussian_blur_preserves_constants_and_mean():
    x = torch.full((1, 3, 16, 16), 0.3)
    assert torch.allclose(gaussian_blur(x, 1.2), x, atol=1e-6)
    y = torch.zeros(1, 1, 21, 21)
    y[..., 10, 10] = 1.0
    assert torch.isclose(gaussian_blur(y, 1.0).sum(), torch.tensor(1.0), atol=1e-5)


@pytest.mark.parametrize("p", [1, 2, float("inf")])
def test_lp_norm_matches_brute_force(p, rng):
    x = torch.as_tensor(rng.normal(size=(3, 3, 4, 4)))
    ref = [np.linalg.norm(row, ord=p) for row in x.reshape(3, -1).numpy()]
    np.testing.assert_allclose(lp_norm(x, p).numpy(), ref, rtol=1e-6)


def test_eot_identity_dist_is_plain_ce(rng):
    model = Linear(3 * 8 * 8)
    x = torch.rand(2, 3, 8, 8)
    rho = torch.rand_like(x) * 0.1
    plain = torch.nn.functional.cross_entropy(model(x + rho), torch.ones(2, dtype=torch.long))
    got = eot_loss(model, x, rho, "live", TransformDistribution.identity(), 3, rng)
    assert torch.allclose(got, plain)
    zero = eot_loss(model, x, torch.zeros_like(x), "live", TransformDistribution.identity(), 1, rng, lam=1.0)
    base = eot_loss(model, x, torch.zeros_like(x), "live", TransformDistribution.identity(), 1, rng)
    assert torch.equal(zero, base)


def test_eot_singleton_independent_of_samples(rng):
    model = Linear(3 * 8 * 8)
    d = TransformDistribution(enabled={"rotation": True}, ranges={"rotation": (7.0, 7.0)})
    x, rho = torch.rand(2, 3, 8, 8), torch.zeros(2, 3, 8, 8)
    a = eot_loss(model, x, rho, "live", d, 1, rng)
    b = eot_loss(model, x, rho, "live", d, 5, rng)
    assert torch.allclose(a, b, atol=1e-6)


def test_eot_variance_shrinks():
    model = Linear(3 * 8 * 8)
    d = TransformDistribution.default()
    x, rho = torch.rand(1, 3, 8, 8), torch.zeros(1, 3, 8, 8)
    stds = {}
    with torch.no_grad():
        for n in (1, 16, 256):
            r = np.random.default_rng(n)
            stds[n] = np.std([eot_loss(model, x, rho, "live", d, n, r).item() for _ in range(100)])
    assert 0.5 < stds[1] / stds[16] / 4 < 2
    assert 0.5 < stds[16] / stds[256] / 4 < 2


def test_eot_rejects_non_differentiable(rng):
    model = lambda z: torch.zeros(z.shape[0], 2)  # noqa: E731
    rho = torch.zeros(1, 3, 8, 8, requires_grad=True)
    with pytest.raises(NotDifferentiableError):
        eot_loss(model, torch.zeros(1, 3, 8, 8), rho, "live", TransformDistribution.identity(), 1, rng)


def test_recapture_distribution_is_mild():
    d = TransformDistribution.recapture()
    assert d.ranges["rotation"] == (-3.0, 3.0)
    assert "defocus" in d.active_kinds() and "defocus" not in TransformDistribution.default().active_kinds()
    assert math.isclose(d.ranges["perspective"][1], 0.02)
