import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import advgen.adversarial as A
from advgen.adversarial import (ADVGEN_LOG_FIELDS, COMPONENTS, AdvgenBundle, AdvgenConfig, SpoofNoiseSynthesizer,
                                advgen_gan_loss, attack, geometric_hinge, hinge_l2, identity_loss, physical_hinge,
                                total_loss, train_advgen, weighted_total)
from advgen.data import DataError, generate_toy_dataset
from advgen.labels import LIVE, SPOOF
from advgen.models import IntegrityError, UntrainedModelError, build, phy_noise
from advgen.transforms import IDENTITY, Transform, TransformDistribution, geometric_residual

from conftest import advgen_bundle, trained


def _with_norm(norm, shape=(1, 3, 4, 4), seed=0):
    v = torch.randn(shape, generator=torch.Generator().manual_seed(seed))
    return v / v.flatten(1).norm(dim=1).view(-1, 1, 1, 1) * norm


@pytest.mark.parametrize("norm,expect", [(0.05, 0.1), (0.3, 0.3)])
def test_hinge_examples(norm, expect):
    assert hinge_l2(_with_norm(norm), 0.1).item() == pytest.approx(expect, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(norm=st.floats(0.0, 5.0), eps=st.floats(0.01, 3.0))
def test_hinge_is_max_of_eps_and_norm(norm, eps):
    x = _with_norm(norm)
    true_norm = x.double().flatten(1).norm(dim=1).item()
    assert hinge_l2(x, eps).item() == pytest.approx(max(eps, true_norm), rel=1e-5, abs=1e-7)
    assert hinge_l2(x, eps, "conventional").item() == pytest.approx(max(0.0, true_norm - eps), rel=1e-5, abs=1e-6)


def test_hinge_per_pixel_and_errors():
    x = torch.full((2, 3, 4, 4), 0.2)
    assert hinge_l2(x, 0.1, per_pixel=True).item() == pytest.approx(0.2)
    with pytest.raises(ValueError):
        hinge_l2(x, 0.0)
    with pytest.raises(ValueError):
        hinge_l2(x, 0.1, form="soft")


@pytest.fixture
def bundle():
    return advgen_bundle()


def test_bundle_validation(bundle):
    with pytest.raises(ValueError):
        AdvgenBundle(bundle.generator, bundle.discriminator, bundle.decomposer, bundle.embedder, bundle.pad,
                     bundle.idgan, lambda_phy=-1.0)
    with pytest.raises(ValueError):
        AdvgenBundle(bundle.generator, bundle.discriminator, bundle.decomposer, bundle.embedder, bundle.pad,
                     bundle.idgan, eps2=0.0)


def test_physical_hinge_zero_noise_and_composition(bundle, images):
    zero = trained("decomposer")  # head is not zero-initialized for the noise mode, so zero it
    for p in zero.parameters():
        p.data.zero_()
    bundle.decomposer = zero
    assert physical_hinge(bundle, images).item() == pytest.approx(bundle.eps1)
    bundle2 = advgen_bundle()
    expect = hinge_l2(phy_noise(bundle2.decomposer, images), bundle2.eps1, per_pixel=True)
    assert physical_hinge(bundle2, images).item() == expect.item()


def test_physical_hinge_reaches_generator(images):
    b = advgen_bundle(eps1=1e-4)
    for p in b.generator.parameters():
        p.requires_grad_(True)
    loss = physical_hinge(b, b.idgan.g_rs(b.perturb(images * 0.5)))
    grads = torch.autograd.grad(loss, list(b.generator.parameters()))
    assert sum(g.abs().sum() for g in grads) > 0


def test_geometric_hinge(bundle, images):
    assert geometric_hinge(bundle, IDENTITY, images).item() == pytest.approx(bundle.eps2)
    t = Transform.of(rotation=25.0)
    expect = hinge_l2(geometric_residual(t, images), bundle.eps2, per_pixel=True)
    assert geometric_hinge(bundle, t, images).item() == expect.item()


def test_geometric_hinge_monte_carlo_variance_shrinks(images):
    b = advgen_bundle(eps2=0.01)
    dist = TransformDistribution.default()

    def estimate(k, rng):
        return np.mean([geometric_hinge(b, A.sample_transform(dist, rng), images).item() for _ in range(k)])

    rng = np.random.default_rng(0)
    s1 = np.std([estimate(1, rng) for _ in range(60)])
    s16 = np.std([estimate(16, rng) for _ in range(60)])
    assert s16 < s1 / 2


def test_identity_loss_examples(bundle, images):
    for p in bundle.generator.parameters():
        p.data.zero_()
    assert identity_loss(bundle, images).item() == pytest.approx(0.0, abs=1e-6)
    # orthogonal embeddings of source and adversarial image
    bundle.embedder = trained("embedder")
    e1, e2 = torch.eye(64)[0], torch.eye(64)[1]

    class Stub(torch.nn.Module):
        def forward(self, z):
            return torch.where((z.mean((1, 2, 3)) > 0)[:, None], e1, e2)

    bundle.embedder.net = Stub()
    x = torch.full((2, 3, 32, 32), 0.5)
    assert identity_loss(bundle, x, -x).item() == pytest.approx(1.0)
    bundle.embedder.meta["trained"] = False
    with pytest.raises(UntrainedModelError):
        identity_loss(bundle, x)


def test_gan_loss_half_discriminator(bundle, images):
    for p in bundle.discriminator.parameters():
        p.data.zero_()  # logits 0 => D = 0.5 on every patch
    gen, disc = advgen_gan_loss(bundle, images)
    assert -disc.item() == pytest.approx(2 * math.log(0.5))
    assert gen.item() == pytest.approx(-math.log(0.5))


def test_discriminator_fixed_point_when_generator_is_zero(images):
    """With G = 0 real and fake inputs coincide, so D's optimum is 0.5."""
    b = advgen_bundle()
    for p in b.generator.parameters():
        p.data.zero_()
    torch.manual_seed(0)
    b.discriminator = build("patch_discriminator", 32)
    opt = torch.optim.Adam(b.discriminator.parameters(), lr=1e-3)
    for _ in range(200):
        _, loss = advgen_gan_loss(b, images)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        d = torch.sigmoid(b.discriminator(images))
    assert (d - 0.5).abs().max() < 0.05


def test_total_loss_zero_weights(images):
    b = advgen_bundle(lambda_phy=0, lambda_geom=0, lambda_identity=0, lambda_gan=0, lambda_attack=0)
    total, parts = total_loss(b, images, np.random.default_rng(0))
    assert total.item() == 0.0 and all(v.item() == 0 for v in parts.values())


def test_total_loss_is_weighted_sum(images):
    b = advgen_bundle(lambda_phy=0.7, lambda_geom=1.3, lambda_identity=2.0, lambda_gan=0.5, lambda_attack=1.1,
                      eps1=1e-3, eps2=1e-3)
    total, parts = total_loss(b, images, np.random.default_rng(0))
    manual = sum(getattr(b, f"lambda_{c}") * parts[c].item() for c in COMPONENTS)
    assert abs(total.item() - manual) < 1e-6
    assert weighted_total({c: parts[c].item() for c in COMPONENTS}, b.weights) == pytest.approx(manual)


@pytest.mark.parametrize("off", COMPONENTS)
def test_zero_weight_term_contributes_no_gradient(off, images):
    kw = dict(lambda_phy=1.0, lambda_geom=1.0, lambda_identity=1.0, lambda_gan=1.0, lambda_attack=1.0,
              eps1=1e-3, eps2=1e-3)

    def generator_grads(weights):
        b = advgen_bundle(**weights)
        params = list(b.generator.parameters())
        for p in params:
            p.requires_grad_(True)
        total, parts = total_loss(b, images * 0.5, np.random.default_rng(0))
        flat = lambda t: torch.cat([g.flatten() for g in torch.autograd.grad(  # noqa: E731
            t, params, retain_graph=True, allow_unused=True, materialize_grads=True)])
        others = sum(weights[f"lambda_{c}"] * parts[c] for c in COMPONENTS if c != off)
        return flat(total), flat(others), parts

    g_total, g_others, parts = generator_grads({**kw, f"lambda_{off}": 0.0})
    assert parts[off].item() == 0.0
    assert torch.allclose(g_total, g_others, atol=1e-7)
    g_on, _, _ = generator_grads(kw)
    assert not torch.allclose(g_on, g_total, atol=1e-7)


def test_total_loss_needs_trained_dependencies(images):
    b = advgen_bundle()
    b.pad = build("pad_cnn_small", 32)
    with pytest.raises(UntrainedModelError):
        total_loss(b, images, np.random.default_rng(0))


def test_synthesizer():
    bank = torch.arange(2 * 3 * 4 * 4, dtype=torch.float32).view(2, 3, 4, 4)
    s = SpoofNoiseSynthesizer(bank, gain=2.0)
    out = s.sample(5, np.random.default_rng(0))
    assert out.shape == (5, 3, 4, 4)
    for o in out:
        assert any(torch.equal(torch.sort((o / 2).flatten()).values, torch.sort(b.flatten()).values) for b in bank)
    with pytest.raises(ValueError):
        SpoofNoiseSynthesizer(torch.zeros(0, 3, 4, 4))
    with pytest.raises(UntrainedModelError):
        SpoofNoiseSynthesizer.from_spoofs(build("decomposer", 32), bank)


def test_attack_contract(bundle, images):
    base = bundle.perturb(images).detach()
    assert torch.equal(attack(bundle, images, 0.1, 0, bundle.pad), base)
    out = attack(bundle, images, 0.1, 3, bundle.pad)
    assert (out - base).abs().max() <= 0.1 + 1e-6
    assert out.abs().max() <= 1
    with pytest.raises(ValueError):
        attack(bundle, images, 0.0, 3, bundle.pad)
    with pytest.raises(ValueError):
        attack(bundle, images, 0.1, -1, bundle.pad)


@pytest.fixture(scope="module")
def spoof_data(tmp_path_factory):
    m = generate_toy_dataset(4, 2, 32, 9, tmp_path_factory.mktemp("adv"))
    return m.select(liveness=SPOOF), m.select(liveness=LIVE)


def _frozen(b):
    return b.decomposer, b.embedder, b.pad, b.idgan


def test_train_smoke_decomposition_and_frozen_hashes(spoof_data, tmp_path):
    spoofs, lives = spoof_data
    ref = advgen_bundle()
    before = ref.frozen_hashes()
    cfg = AdvgenConfig(epochs=2, batch_size=4, lr=1e-3, seed=0)
    weights = dict(lambda_phy=1.0, lambda_geom=1.0, lambda_identity=1.0, lambda_gan=1.0, eot_samples=2)
    b, rows = train_advgen(spoofs, *_frozen(ref), cfg, tmp_path / "advgen.csv", lives=lives, **weights)
    assert b.frozen_hashes() == before
    logged = list(csv.DictReader(open(tmp_path / "advgen.csv")))
    assert tuple(logged[0]) == ADVGEN_LOG_FIELDS
    assert len(logged) == 2 * math.ceil((len(spoofs) + len(lives)) / 4)
    for r in logged:
        recomputed = sum(getattr(b, f"lambda_{c}") * float(r[f"loss_{c}"]) for c in COMPONENTS)
        assert abs(float(r["total"]) - recomputed) <= 1e-6
    b.save(tmp_path / "ck")
    back = AdvgenBundle.load(tmp_path / "ck", *_frozen(ref))
    with torch.no_grad():
        x = spoofs.load_batch()
        assert (back.perturb(x) - b.perturb(x)).abs().max() < 1e-6
    other = advgen_bundle()
    for p in other.pad.parameters():
        p.data.add_(1.0)
    with pytest.raises(IntegrityError):
        AdvgenBundle.load(tmp_path / "ck", *_frozen(other))


def test_train_detects_frozen_mutation(spoof_data, monkeypatch):
    spoofs, _ = spoof_data
    ref = advgen_bundle()
    real = A.total_loss

    def tampering(bundle, x, rng):
        with torch.no_grad():
            next(bundle.pad.parameters()).add_(1e-3)
        return real(bundle, x, rng)

    monkeypatch.setattr(A, "total_loss", tampering)
    with pytest.raises(IntegrityError):
        train_advgen(spoofs, *_frozen(ref), AdvgenConfig(epochs=1, batch_size=4))


def test_train_rejects_live_inputs(spoof_data):
    _, lives = spoof_data
    with pytest.raises(DataError):
        train_advgen(lives, *_frozen(advgen_bundle()), AdvgenConfig(epochs=1))
