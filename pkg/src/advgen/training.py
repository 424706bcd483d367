"""Training loops for the PAD classifiers, the identity embedder and the noise decomposer."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DataError, DatasetManifest
from .labels import LIVE, LIVE_INDEX, SPOOF, SPOOF_INDEX
from .models import ModelHandle, build_decomposer, build_embedder
from .transforms import TransformDistribution, apply_transform, sample_transform

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    augment: bool = True


def mild_augmentation() -> TransformDistribution:
    """Half-strength version of the default EOT ranges, used as training augmentation."""
    dist = TransformDistribution.default()
    dist.ranges = {k: ((lo + hi) / 2 - (hi - lo) / 4, (lo + hi) / 2 + (hi - lo) / 4) for k, (lo, hi) in dist.ranges.items()}
    return dist


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.as_tensor(order[i:i + batch_size])


def _augment(x, dist, rng, prob=0.5):
    if rng.random() < prob:
        x = apply_transform(sample_transform(dist, rng), x)
    return x


def labeled_tensors(manifest: DatasetManifest):
    images = manifest.load_batch()
    labels = torch.tensor([LIVE_INDEX if e.liveness == LIVE else SPOOF_INDEX for e in manifest.entries])
    return images, labels


def check_disjoint(a: DatasetManifest, b: DatasetManifest):
    overlap = a.identities & b.identities
    if overlap:
        raise DataError(f"splits share identities {sorted(overlap)}")


def pad_accuracy(pad: ModelHandle, images: torch.Tensor, labels: torch.Tensor) -> float:
    with torch.no_grad():
        return (pad(images).argmax(1) == labels).double().mean().item()


def train_pad(model: ModelHandle, train: DatasetManifest, val: DatasetManifest, cfg: TrainConfig):
    """Cross-entropy training; returns the best-validation checkpoint and metrics."""
    check_disjoint(train, val)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    x_tr, y_tr = labeled_tensors(train)
    x_va, y_va = labeled_tensors(val)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr, betas=cfg.betas)
    aug = mild_augmentation()
    history, best, best_loss = [], None, float("inf")
    for epoch in range(cfg.epochs):
        model.net.train()
        losses = []
        for idx in _batches(len(x_tr), cfg.batch_size, rng):
            xb = _augment(x_tr[idx], aug, rng) if cfg.augment else x_tr[idx]
            loss = F.cross_entropy(model(xb), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.net.eval()
        with torch.no_grad():
            val_loss = F.cross_entropy(model(x_va), y_va).item() if len(x_va) else float(np.mean(losses))
        rec = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_acc": pad_accuracy(model, x_va, y_va) if len(x_va) else float("nan")}
        history.append(rec)
        log.debug("pad epoch %d %s", epoch + 1, rec)
        if val_loss < best_loss:
            best_loss, best = val_loss, copy.deepcopy(model.net.state_dict())
    if best is not None:
        model.net.load_state_dict(best)
    model.net.eval()
    model.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed)
    return model, {"history": history, "best_val_loss": best_loss}


class ArcMarginHead(nn.Module):
    """Additive angular margin classifier over unit embeddings."""

    def __init__(self, dim, n_classes, scale=16.0, margin=0.3):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, dim) * 0.1)
        self.scale, self.margin = scale, margin

    def forward(self, emb, labels):
        cos = F.linear(emb, F.normalize(self.weight, dim=1)).clamp(-1 + 1e-6, 1 - 1e-6)
        theta = torch.acos(cos)
        target = F.one_hot(labels, cos.shape[1]).bool()
        logits = torch.where(target, torch.cos(theta + self.margin), cos)
        return F.cross_entropy(self.scale * logits, labels)


def train_embedder(train: DatasetManifest, cfg: TrainConfig, image_size: int | None = None) -> ModelHandle:
    """Margin-based identity classification on live faces with photometric jitter."""
    lives = train.select(liveness=LIVE)
    ids = sorted(lives.identities)
    if len(ids) < 2:
        raise DataError("embedder training needs at least two identities")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    handle = build_embedder(image_size or train.image_size)
    x = lives.load_batch()
    remap = {i: k for k, i in enumerate(ids)}
    y = torch.tensor([remap[e.identity] for e in lives.entries])
    head = ArcMarginHead(handle.net.proj.out_features, len(ids))
    opt = torch.optim.Adam(list(handle.net.parameters()) + list(head.parameters()), lr=cfg.lr, betas=cfg.betas)
    aug = mild_augmentation()
    for epoch in range(cfg.epochs):
        handle.net.train()
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb = x[idx]
            if cfg.augment:
                xb = _augment(xb, aug, rng, prob=0.7)
                gain = torch.as_tensor(rng.uniform(-0.08, 0.08, (len(idx), 1, 1, 1)), dtype=xb.dtype)
                noise = torch.as_tensor(rng.normal(0, rng.uniform(0, 0.06), xb.shape), dtype=xb.dtype)
                xb = (xb + gain + noise).clamp(-1, 1)
            loss = head(handle(xb), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    handle.net.eval()
    handle.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed, n_identities=len(ids))
    return handle


def noise_error(decomposer: ModelHandle, spoofs, lives) -> float:
    """Mean per-image L2 distance between predicted and true spoof noise."""
    with torch.no_grad():
        err = decomposer(spoofs) - (spoofs - lives)
    return err.flatten(1).norm(dim=1).mean().item()


def train_decomposer(paired: DatasetManifest, cfg: TrainConfig, image_size: int | None = None):
    """Regress the spoof noise ``spoof - live``; live inputs regress to zero noise."""
    pairs = paired.pairs()
    if not pairs:
        raise DataError("decomposer training needs paired live/spoof entries")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    handle = build_decomposer(image_size or paired.image_size)
    lives = DatasetManifest(paired.root, [p[0] for p in pairs], image_size=paired.image_size).load_batch()
    spoofs = DatasetManifest(paired.root, [p[1] for p in pairs], image_size=paired.image_size).load_batch()
    inputs = torch.cat([spoofs, lives])
    targets = torch.cat([spoofs - lives, torch.zeros_like(lives)])
    init_err = noise_error(handle, spoofs, lives)
    opt = torch.optim.Adam(handle.net.parameters(), lr=cfg.lr, betas=cfg.betas)
    for epoch in range(cfg.epochs):
        handle.net.train()
        for idx in _batches(len(inputs), cfg.batch_size, rng):
            loss = F.mse_loss(handle(inputs[idx]), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    handle.net.eval()
    final_err = noise_error(handle, spoofs, lives)
    handle.meta.update(trained=True, epochs=cfg.epochs, seed=cfg.seed)
    return handle, {"init_noise_error": init_err, "final_noise_error": final_err}
