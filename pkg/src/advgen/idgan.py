"""IdGAN: live <-> spoof CycleGAN with an identity-preserving regularizer.

Stage 1 of the attack. ``g_rs`` maps live (real) faces to spoofs and
``g_sr`` maps back; ``d_r`` and ``d_s`` are PatchGAN critics for the live and
spoof domains. The trained ``g_rs`` is the differentiable print/replay
simulator consumed by Stage 2.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DataError, DatasetManifest
from .labels import LIVE, SPOOF
from .models import ModelHandle, UntrainedModelError, build_generator, build_patch_discriminator, cosine
from .transforms import TransformDistribution, apply_transform, sample_transform

log = logging.getLogger(__name__)

IDGAN_LOG_FIELDS = ("epoch", "loss_adv", "loss_cycle", "loss_id", "total")


@dataclass
class IdganBundle:
    g_rs: ModelHandle
    g_sr: ModelHandle
    d_r: ModelHandle
    d_s: ModelHandle
    lambda_cycle: float = 10.0
    lambda_id: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_id < 0:
            raise ValueError("IdGAN loss weights must be non-negative")

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("trained", False))

    def handles(self) -> dict:
        return {"g_rs": self.g_rs, "g_sr": self.g_sr, "d_r": self.d_r, "d_s": self.d_s}

    def save(self, directory) -> Path:
        directory = Path(directory)
        for name, h in self.handles().items():
            h.save(directory / f"idgan_{name}.pt")
        torch.save({"lambda_cycle": self.lambda_cycle, "lambda_id": self.lambda_id, "meta": self.meta},
                   directory / "idgan_meta.pt")
        return directory

    @classmethod
    def load(cls, directory) -> "IdganBundle":
        directory = Path(directory)
        meta = torch.load(directory / "idgan_meta.pt", weights_only=False)
        arch = {"g_rs": "generator_translation", "g_sr": "generator_translation",
                "d_r": "patch_discriminator", "d_s": "patch_discriminator"}
        nets = {k: ModelHandle.load(directory / f"idgan_{k}.pt", arch[k]) for k in arch}
        return cls(**nets, lambda_cycle=meta["lambda_cycle"], lambda_id=meta["lambda_id"], meta=meta["meta"])


def build_idgan(image_size: int = 64, lambda_cycle: float = 10.0, lambda_id: float = 1.0) -> IdganBundle:
    return IdganBundle(
        build_generator("translation", image_size),
        build_generator("translation", image_size),
        build_patch_discriminator(image_size),
        build_patch_discriminator(image_size),
        lambda_cycle,
        lambda_id,
    )


def identity_regularizer(bundle, x_r, x_s, embedder, one_way: bool = False) -> torch.Tensor:
    """Round-trip identity loss: E[1 - cos(F(G_sr(G_rs(x_r))), F(x_r))] + the spoof-side term.

    ``one_way=True`` compares the one-way translations G_rs(x_r), G_sr(x_s)
    with their inputs instead.
    """
    if one_way:
        rec_r, rec_s = bundle.g_rs(x_r), bundle.g_sr(x_s)
    else:
        rec_r, rec_s = bundle.g_sr(bundle.g_rs(x_r)), bundle.g_rs(bundle.g_sr(x_s))
    return (1 - cosine(embedder, rec_r, x_r)).mean() + (1 - cosine(embedder, rec_s, x_s)).mean()


def _gan_terms(d, real, fake, mode):
    """(generator loss, discriminator loss) for one direction."""
    s_real, s_fake = d(real), d(fake)
    if mode == "log":
        # D = sigmoid(score): log D = logsigmoid(s), log(1 - D) = logsigmoid(-s)
        value = F.logsigmoid(s_real).mean() + F.logsigmoid(-s_fake).mean()
        return F.logsigmoid(-s_fake).mean(), -value
    if mode == "least_squares":
        gen = ((s_fake - 1) ** 2).mean()
        disc = ((s_real - 1) ** 2).mean() + (s_fake ** 2).mean()
        return gen, disc
    raise ValueError(f"unknown adversarial loss mode {mode!r}")


def gan_adversarial_loss(bundle, x_r, x_s, mode: str = "least_squares", fakes=None):
    """Two-direction adversarial loss; returns (generator loss, discriminator loss).

    ``log`` follows the log-likelihood form (the discriminator loss is the
    negated objective the critics maximize; the generator minimizes
    log(1 - D(fake))). ``least_squares`` is the LSGAN form with targets 1/0.
    ``fakes`` may pass precomputed (G_rs(x_r), G_sr(x_s)).
    """
    fake_s, fake_r = fakes if fakes is not None else (bundle.g_rs(x_r), bundle.g_sr(x_s))
    g1, d1 = _gan_terms(bundle.d_s, x_s, fake_s, mode)
    g2, d2 = _gan_terms(bundle.d_r, x_r, fake_r, mode)
    return g1 + g2, d1 + d2


def cycle_loss(bundle, x_r, x_s) -> torch.Tensor:
    """Mean absolute round-trip error in both directions (per-pixel mean L1)."""
    rec_r = bundle.g_sr(bundle.g_rs(x_r))
    rec_s = bundle.g_rs(bundle.g_sr(x_s))
    return (rec_r - x_r).abs().mean() + (rec_s - x_s).abs().mean()


@dataclass
class IdganConfig:
    epochs: int = 100
    lr: float = 2e-4
    betas: tuple = (0.5, 0.9)
    batch_size: int = 1
    lambda_cycle: float = 10.0
    lambda_id: float = 1.0
    adv_mode: str = "least_squares"
    one_way_id: bool = False
    augment: bool = False
    input_noise: float = 0.0
    seed: int = 0


def augmentation_distribution() -> TransformDistribution:
    """Geometric-only augmentation (rotation, crop/resize, shift)."""
    ranges = {"rotation": (-10.0, 10.0), "scale": (0.95, 1.08), "translation": (-0.04, 0.04)}
    return TransformDistribution(enabled={k: True for k in ranges}, ranges=ranges)


def _check_liveness(manifest, liveness):
    bad = [e.path for e in manifest.entries if e.liveness != liveness]
    if bad or not manifest.entries:
        raise DataError(f"{liveness} manifest is empty or holds other labels: {bad[:3]}")


def train_idgan(live: DatasetManifest, spoof: DatasetManifest, embedder, cfg: IdganConfig,
                csv_path=None, image_size: int | None = None):
    """Alternating discriminator/generator optimization of the IdGAN objective.

    Returns (bundle, history); history rows carry the epoch means of every loss
    component and ``total = adv + lambda_cycle * cycle + lambda_id * id``.
    """
    _check_liveness(live, LIVE)
    _check_liveness(spoof, SPOOF)
    if embedder is None or not getattr(embedder, "trained", True):
        raise UntrainedModelError("IdGAN needs a trained embedder")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    bundle = build_idgan(image_size or live.image_size, cfg.lambda_cycle, cfg.lambda_id)
    x_live, x_spoof = live.load_batch(), spoof.load_batch()
    gens = list(bundle.g_rs.parameters()) + list(bundle.g_sr.parameters())
    discs = list(bundle.d_r.parameters()) + list(bundle.d_s.parameters())
    opt_g = torch.optim.Adam(gens, lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(discs, lr=cfg.lr, betas=cfg.betas)
    aug = augmentation_distribution()
    for p in embedder.parameters():
        p.requires_grad_(False)

    writer = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(IDGAN_LOG_FIELDS)
        fh.flush()
    history = []
    n = max(len(x_live), len(x_spoof))
    try:
        for epoch in range(1, cfg.epochs + 1):
            for h in bundle.handles().values():
                h.net.train()
            sums = np.zeros(4)
            steps = 0
            i_live, i_spoof = rng.permutation(n) % len(x_live), rng.permutation(n) % len(x_spoof)
            for start in range(0, n, cfg.batch_size):
                xr = x_live[torch.as_tensor(i_live[start:start + cfg.batch_size])]
                xs = x_spoof[torch.as_tensor(i_spoof[start:start + cfg.batch_size])]
                if cfg.augment:
                    xr = apply_transform(sample_transform(aug, rng), xr)
                    xs = apply_transform(sample_transform(aug, rng), xs)
                xr_in = xr
                if cfg.input_noise > 0:
                    # pixel noise on the live side, reconstructed to the clean face: the spoof
                    # critic then teaches g_rs to low-pass content a recapture would not keep
                    amp = torch.as_tensor(rng.uniform(0, cfg.input_noise, (len(xr), 1, 1, 1)), dtype=xr.dtype)
                    xr_in = (xr + amp * torch.as_tensor(rng.uniform(-1, 1, xr.shape), dtype=xr.dtype)).clamp(-1, 1)
                fake_s, fake_r = bundle.g_rs(xr_in), bundle.g_sr(xs)

                # discriminator step on detached fakes
                _, loss_d = gan_adversarial_loss(bundle, xr, xs, cfg.adv_mode, (fake_s.detach(), fake_r.detach()))
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()

                # generator step
                loss_adv, _ = gan_adversarial_loss(bundle, xr, xs, cfg.adv_mode, (fake_s, fake_r))
                rec_r, rec_s = bundle.g_sr(fake_s), bundle.g_rs(fake_r)
                loss_cyc = (rec_r - xr).abs().mean() + (rec_s - xs).abs().mean()
                if cfg.one_way_id:
                    a, b = fake_s, fake_r
                else:
                    a, b = rec_r, rec_s
                loss_id = (1 - cosine(embedder, a, xr)).mean() + (1 - cosine(embedder, b, xs)).mean()
                total = loss_adv + cfg.lambda_cycle * loss_cyc + cfg.lambda_id * loss_id
                opt_g.zero_grad()
                total.backward()
                opt_g.step()

                parts = [loss_adv.item(), loss_cyc.item(), loss_id.item()]
                sums += parts + [parts[0] + cfg.lambda_cycle * parts[1] + cfg.lambda_id * parts[2]]
                steps += 1
            means = sums / steps
            row = {"epoch": epoch, "loss_adv": means[0], "loss_cycle": means[1], "loss_id": means[2],
                   "total": means[0] + cfg.lambda_cycle * means[1] + cfg.lambda_id * means[2]}
            history.append(row)
            log.info("idgan epoch %d adv=%.4f cyc=%.4f id=%.4f", epoch, *means[:3])
            if writer is not None:
                writer.writerow([row[k] for k in IDGAN_LOG_FIELDS])
                fh.flush()
    finally:
        if writer is not None:
            fh.close()
    for h in bundle.handles().values():
        h.freeze()
        h.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed)
    bundle.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed, adv_mode=cfg.adv_mode)
    return bundle, history


def simulate_spoof(bundle: IdganBundle, x_live: torch.Tensor, dist: TransformDistribution, rng) -> torch.Tensor:
    """G_rs(t(x_live)) for one transform t drawn from ``dist``."""
    if not bundle.trained:
        raise UntrainedModelError("IdGAN bundle has not been trained")
    return bundle.g_rs(apply_transform(sample_transform(dist, rng), x_live))
