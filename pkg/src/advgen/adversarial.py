"""Stage 2: the perturbation generator, its PatchGAN critic and the loss terms.

The generator ``G`` maps a spoof ``x`` to a bounded residual; the adversarial
image is ``clamp(x + G(x))``. Training minimizes

    lambda_phy * L_phy + lambda_geom * L_geom + lambda_identity * L_identity
    + lambda_gan * L_gan + lambda_attack * L_attack

where the last term (an expectation-over-transformation cross-entropy toward
"live") is what makes the residual adversarial at all. ``strict_eq12``
drops it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DataError, DatasetManifest
from .idgan import IdganBundle
from .labels import LIVE_INDEX, SPOOF
from .models import (
    RESIDUAL_CAP,
    IntegrityError,
    ModelHandle,
    UntrainedModelError,
    build_generator,
    build_patch_discriminator,
    cosine,
    phy_noise,
)
from .transforms import TransformDistribution, apply_transform, geometric_residual, lp_norm, sample_transform

log = logging.getLogger(__name__)

ADVGEN_LOG_FIELDS = ("step", "loss_phy", "loss_geom", "loss_identity", "loss_gan", "loss_attack", "total")
HINGE_FORMS = ("paper_floor", "conventional")
PHY_SOURCES = ("simulated", "idgan")
GEOM_SOURCES = ("adversarial", "perturbation")
COMPONENTS = ("phy", "geom", "identity", "gan", "attack")


@dataclass(frozen=True)
class PerturbationBudget:
    p: float = 2
    epsilon: float = 0.1
    lam: float = 0.0

    def __post_init__(self):
        if self.p not in (1, 2, float("inf")):
            raise ValueError(f"norm order must be 1, 2 or inf, got {self.p}")
        if self.epsilon <= 0:
            raise ValueError("budget epsilon must be > 0")
        if self.lam < 0:
            raise ValueError("budget lambda must be >= 0")


def hinge_l2(x_term: torch.Tensor, eps: float, form: str = "paper_floor", per_pixel: bool = False) -> torch.Tensor:
    """Batch mean of ``max(eps, ||x_term||_2)`` (per sample).

    ``form="conventional"`` gives ``max(0, ||x_term||_2 - eps)`` instead.
    ``per_pixel`` divides the norm by sqrt(numel per sample), i.e. uses the RMS.
    """
    if eps <= 0:
        raise ValueError("hinge eps must be > 0")
    norm = lp_norm(x_term, 2)
    if per_pixel:
        norm = norm / math.sqrt(x_term[0].numel())
    if form == "paper_floor":
        return torch.clamp(norm, min=eps).mean()
    if form == "conventional":
        return torch.clamp(norm - eps, min=0.0).mean()
    raise ValueError(f"unknown hinge form {form!r}")


class SpoofNoiseSynthesizer:
    """Draws spoof-noise samples for simulated recapture.

    The bank holds decomposer noise estimates of spoof images. A sample is a
    random bank entry, circularly shifted by a random offset so it carries no
    alignment with the image it is added to, times ``gain``.
    """

    def __init__(self, bank: torch.Tensor, gain: float = 1.5):
        if bank.ndim != 4 or len(bank) == 0:
            raise ValueError("noise bank must be a non-empty (N, 3, H, W) tensor")
        if gain < 0:
            raise ValueError("gain must be >= 0")
        self.bank, self.gain = bank.detach(), gain

    @classmethod
    def from_spoofs(cls, decomposer: ModelHandle, spoofs: torch.Tensor, gain: float = 1.5, chunk: int = 64):
        if not decomposer.trained:
            raise UntrainedModelError("decomposer has not been trained")
        with torch.no_grad():
            bank = torch.cat([decomposer(spoofs[i:i + chunk]) for i in range(0, len(spoofs), chunk)])
        return cls(bank, gain)

    def sample(self, n: int, rng: np.random.Generator) -> torch.Tensor:
        idx = rng.integers(0, len(self.bank), n)
        h, w = self.bank.shape[-2:]
        shifts = rng.integers(0, (h, w), size=(n, 2))
        out = [torch.roll(self.bank[i], (int(dy), int(dx)), (1, 2)) for i, (dy, dx) in zip(idx, shifts)]
        return self.gain * torch.stack(out)


@dataclass
class AdvgenBundle:
    generator: ModelHandle
    discriminator: ModelHandle
    decomposer: ModelHandle
    embedder: ModelHandle
    pad: ModelHandle
    idgan: IdganBundle
    synthesizer: SpoofNoiseSynthesizer | None = None
    eps1: float = 0.1
    eps2: float = 0.5
    lambda_phy: float = 1.0
    lambda_geom: float = 1.0
    lambda_identity: float = 1.0
    lambda_gan: float = 0.0
    lambda_attack: float = 1.0
    hinge_form: str = "paper_floor"
    hinge_per_pixel: bool = True
    phy_source: str = "simulated"
    geom_source: str = "adversarial"
    eot_samples: int = 4
    dist: TransformDistribution = field(default_factory=TransformDistribution.default)
    recapture: TransformDistribution = field(default_factory=TransformDistribution.recapture)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lambda_phy", "lambda_geom", "lambda_identity", "lambda_gan", "lambda_attack"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("hinge bounds eps1, eps2 must be > 0")
        if self.hinge_form not in HINGE_FORMS:
            raise ValueError(f"hinge_form must be one of {HINGE_FORMS}")
        if self.phy_source not in PHY_SOURCES:
            raise ValueError(f"phy_source must be one of {PHY_SOURCES}")
        if self.geom_source not in GEOM_SOURCES:
            raise ValueError(f"geom_source must be one of {GEOM_SOURCES}")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")

    @property
    def weights(self) -> dict:
        return {c: getattr(self, f"lambda_{c}") for c in COMPONENTS}

    def frozen(self) -> dict:
        return {"decomposer": self.decomposer, "embedder": self.embedder, "pad": self.pad,
                **{f"idgan_{k}": h for k, h in self.idgan.handles().items()}}

    def frozen_hashes(self) -> dict:
        return {k: h.param_hash() for k, h in self.frozen().items()}

    def check_dependencies(self):
        for name, h in self.frozen().items():
            if h is None or not h.trained:
                raise UntrainedModelError(f"{name} is missing or untrained")
        if not self.idgan.trained:
            raise UntrainedModelError("IdGAN bundle has not been trained")

    _SCALARS = ("eps1", "eps2", "lambda_phy", "lambda_geom", "lambda_identity", "lambda_gan", "lambda_attack",
                "hinge_form", "hinge_per_pixel", "phy_source", "geom_source", "eot_samples")

    def save(self, directory) -> Path:
        """Write generator, critic and settings; frozen models are saved by their own stages."""
        directory = Path(directory)
        self.generator.save(directory / "advgen_generator.pt")
        self.discriminator.save(directory / "advgen_discriminator.pt")
        blob = {k: getattr(self, k) for k in self._SCALARS}
        blob["meta"] = self.meta
        (directory / "advgen_meta.json").write_text(json.dumps(blob, sort_keys=True, indent=1, default=str))
        return directory

    @classmethod
    def load(cls, directory, decomposer, embedder, pad, idgan) -> "AdvgenBundle":
        """Reload a saved bundle around frozen models; their hashes must match training time."""
        directory = Path(directory)
        blob = json.loads((directory / "advgen_meta.json").read_text())
        bundle = cls(ModelHandle.load(directory / "advgen_generator.pt", "generator_perturbation"),
                     ModelHandle.load(directory / "advgen_discriminator.pt", "patch_discriminator"),
                     decomposer, embedder, pad, idgan, None, **{k: blob[k] for k in cls._SCALARS},
                     meta=blob["meta"])
        expected = blob["meta"].get("frozen_hashes", {})
        actual = bundle.frozen_hashes()
        bad = [k for k in expected if expected[k] != actual.get(k)]
        if bad:
            raise IntegrityError(f"frozen models differ from those AdvGen was trained with: {bad}")
        return bundle

    def perturb(self, x: torch.Tensor) -> torch.Tensor:
        """x + G(x), clamped to the valid range."""
        return (x + self.generator(x)).clamp(-1, 1)


def simulate_recapture(bundle: AdvgenBundle, x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """One differentiable stand-in for printing/replaying ``x`` and photographing it.

    A recapture transform (pose jitter, defocus, exposure) followed by an
    additive spoof-noise sample. Without a synthesizer only the transform is
    applied.
    """
    out = apply_transform(sample_transform(bundle.recapture, rng), x)
    if bundle.synthesizer is not None:
        out = out + bundle.synthesizer.sample(x.shape[0], rng).to(x.dtype)
    return out.clamp(-1, 1)


def physical_hinge(bundle: AdvgenBundle, x_spoof_sim: torch.Tensor) -> torch.Tensor:
    return hinge_l2(phy_noise(bundle.decomposer, x_spoof_sim), bundle.eps1, bundle.hinge_form, bundle.hinge_per_pixel)


def geometric_hinge(bundle: AdvgenBundle, t, x: torch.Tensor) -> torch.Tensor:
    return hinge_l2(geometric_residual(t, x), bundle.eps2, bundle.hinge_form, bundle.hinge_per_pixel)


def identity_loss(bundle: AdvgenBundle, x: torch.Tensor, x_adv: torch.Tensor | None = None) -> torch.Tensor:
    if not bundle.embedder.trained:
        raise UntrainedModelError("embedder has not been trained")
    if x_adv is None:
        x_adv = bundle.perturb(x)
    return (1 - cosine(bundle.embedder, x, x_adv)).mean()


def advgen_gan_loss(bundle: AdvgenBundle, x: torch.Tensor, x_adv: torch.Tensor | None = None):
    """(generator term, discriminator term) on patch scores.

    The discriminator term is the negated log-likelihood objective
    ``-(E log D(x) + E log(1 - D(x_adv)))``; the generator term is the
    non-saturating ``-E log D(x_adv)``.
    """
    if x_adv is None:
        x_adv = bundle.perturb(x)
    s_real, s_fake = bundle.discriminator(x), bundle.discriminator(x_adv)
    value = F.logsigmoid(s_real).mean() + F.logsigmoid(-s_fake).mean()
    return -F.logsigmoid(s_fake).mean(), -value


def _live_ce(pad, x):
    return F.cross_entropy(pad(x), torch.full((x.shape[0],), LIVE_INDEX, dtype=torch.long))


def total_loss(bundle: AdvgenBundle, batch: torch.Tensor, rng: np.random.Generator):
    """Weighted objective and its unweighted components.

    ``eot_samples`` simulated recaptures of the adversarial image feed the
    attack term (together with the plain digital image) and the physical
    hinge; ``eot_samples`` draws from ``dist`` feed the geometric hinge.
    Components with zero weight are reported as 0 and skipped.
    """
    bundle.check_dependencies()
    x = batch
    delta = bundle.generator(x)
    x_adv = (x + delta).clamp(-1, 1)
    w = bundle.weights
    k = bundle.eot_samples
    parts = dict.fromkeys(COMPONENTS, x.new_zeros(()))
    sims = []
    if w["attack"] > 0 or (w["phy"] > 0 and bundle.phy_source == "simulated"):
        sims = [simulate_recapture(bundle, x_adv, rng) for _ in range(k)]
    if w["attack"] > 0:
        parts["attack"] = sum(_live_ce(bundle.pad, s) for s in [x_adv] + sims) / (k + 1)
    if w["phy"] > 0:
        if bundle.phy_source == "simulated":
            parts["phy"] = sum(physical_hinge(bundle, s) for s in sims) / k
        else:
            parts["phy"] = physical_hinge(bundle, bundle.idgan.g_rs(x_adv))
    if w["geom"] > 0:
        src = x_adv if bundle.geom_source == "adversarial" else delta
        parts["geom"] = sum(geometric_hinge(bundle, sample_transform(bundle.dist, rng), src) for _ in range(k)) / k
    if w["identity"] > 0:
        parts["identity"] = identity_loss(bundle, x, x_adv)
    if w["gan"] > 0:
        parts["gan"] = advgen_gan_loss(bundle, x, x_adv)[0]
    total = sum(w[c] * parts[c] for c in COMPONENTS)
    return total, parts


@dataclass
class AdvgenConfig:
    epochs: int = 100
    lr: float = 2e-4
    betas: tuple = (0.5, 0.9)
    batch_size: int = 1
    noise_gain: float = 1.5
    simulated_inputs: bool = True
    residual_cap: float = RESIDUAL_CAP
    seed: int = 0


def weighted_total(parts: dict, weights: dict) -> float:
    return float(sum(weights[c] * float(parts[c]) for c in COMPONENTS))


def train_advgen(
    spoofs: DatasetManifest,
    decomposer: ModelHandle,
    embedder: ModelHandle,
    pad: ModelHandle,
    idgan: IdganBundle,
    cfg: AdvgenConfig,
    csv_path=None,
    lives: DatasetManifest | None = None,
    **bundle_kw,
):
    """Alternating critic/generator training; returns (bundle, step log rows).

    The generator sees the real spoofs plus, with ``cfg.simulated_inputs``,
    IdGAN translations ``g_rs(live)`` of the ``lives`` manifest. The noise
    synthesizer is built from the decomposer's estimates on the real spoofs.
    """
    if not spoofs.entries or any(e.liveness != SPOOF for e in spoofs.entries):
        raise DataError("AdvGen trains on a non-empty spoof-only manifest")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    size = spoofs.image_size
    x_all = spoofs.load_batch()
    synth = SpoofNoiseSynthesizer.from_spoofs(decomposer, x_all, cfg.noise_gain) if cfg.noise_gain > 0 else None
    bundle = AdvgenBundle(build_generator("perturbation", size, cfg.residual_cap), build_patch_discriminator(size),
                          decomposer, embedder, pad, idgan, synth, **bundle_kw)
    bundle.check_dependencies()
    frozen = bundle.frozen()
    for h in frozen.values():
        h.freeze()
    before = bundle.frozen_hashes()

    if cfg.simulated_inputs and lives is not None and lives.entries:
        with torch.no_grad():
            x_all = torch.cat([x_all, idgan.g_rs(lives.load_batch())])
    opt_g = torch.optim.Adam(bundle.generator.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.lr, betas=cfg.betas)
    weights = bundle.weights
    rows = []
    fh = writer = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(ADVGEN_LOG_FIELDS)
    try:
        step = 0
        for epoch in range(cfg.epochs):
            bundle.generator.net.train()
            bundle.discriminator.net.train()
            order = rng.permutation(len(x_all))
            for start in range(0, len(order), cfg.batch_size):
                x = x_all[torch.as_tensor(order[start:start + cfg.batch_size])]
                if weights["gan"] > 0:
                    with torch.no_grad():
                        x_adv = bundle.perturb(x)
                    _, loss_d = advgen_gan_loss(bundle, x, x_adv)
                    opt_d.zero_grad()
                    loss_d.backward()
                    opt_d.step()

                total, parts = total_loss(bundle, x, rng)
                opt_g.zero_grad()
                if total.requires_grad:
                    total.backward()
                    opt_g.step()
                step += 1
                vals = {c: float(parts[c].detach()) for c in COMPONENTS}
                row = {"step": step, **{f"loss_{c}": vals[c] for c in COMPONENTS}, "total": float(total.detach())}
                recomputed = weighted_total(vals, weights)
                if abs(recomputed - row["total"]) > 1e-6 * max(1.0, abs(recomputed)):
                    raise IntegrityError(f"step {step}: total {row['total']} != weighted sum {recomputed}")
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[k] for k in ADVGEN_LOG_FIELDS])
            log.info("advgen epoch %d last total %.4f", epoch + 1, rows[-1]["total"] if rows else float("nan"))
    finally:
        if fh is not None:
            fh.close()
    after = bundle.frozen_hashes()
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise IntegrityError(f"frozen models changed during AdvGen training: {changed}")
    bundle.generator.freeze()
    bundle.discriminator.freeze()
    bundle.generator.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed)
    bundle.discriminator.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed)
    bundle.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed, frozen_hashes=after)
    return bundle, rows


def attack(bundle: AdvgenBundle, x_spoof: torch.Tensor, fgsm_eps: float, iters: int, pad: ModelHandle) -> torch.Tensor:
    """Generator output refined by ``iters`` signed-gradient steps toward "live".

    Each step has size ``fgsm_eps / iters``; the result stays inside the
    ``fgsm_eps`` infinity-ball around ``x + G(x)`` and the valid range.
    """
    if fgsm_eps <= 0:
        raise ValueError("fgsm_eps must be > 0")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    with torch.no_grad():
        base = bundle.perturb(x_spoof)
    x = base.clone()
    step = fgsm_eps / iters if iters else 0.0
    for _ in range(iters):
        x.requires_grad_(True)
        grad, = torch.autograd.grad(_live_ce(pad, x), x)
        with torch.no_grad():
            x = x - step * grad.sign()
            x = torch.min(torch.max(x, base - fgsm_eps), base + fgsm_eps).clamp(-1, 1)
    return x.detach()
