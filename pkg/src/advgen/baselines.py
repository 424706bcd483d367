"""Standard digital white-box attacks: FGSM, BIM, PGD and Carlini-Wagner L2.

All operate on symmetric-range (N, 3, H, W) batches; budgets are measured in
that range. ``target`` is the class index the attack pushes toward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .adversarial import PerturbationBudget
from .labels import target_index
from .transforms import NotDifferentiableError

METHODS = ("fgsm", "bim", "pgd", "cw")


@dataclass(frozen=True)
class CwParams:
    confidence: float = 0.0
    c: float = 1.0
    iterations: int = 100
    search_steps: int = 5
    lr: float = 0.01

    def __post_init__(self):
        if self.confidence < 0 or self.c <= 0 or self.iterations < 1 or self.search_steps < 1:
            raise ValueError("invalid C&W parameters")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    budget: PerturbationBudget = field(default_factory=lambda: PerturbationBudget(p=float("inf"), epsilon=0.1))
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4
    cw: CwParams = field(default_factory=CwParams)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.budget.epsilon / 4


def _target_labels(x, target):
    return torch.full((x.shape[0],), target_index(target), dtype=torch.long)


def _loss_grad(pad, x, labels, loss_fn):
    x = x.detach().requires_grad_(True)
    out = pad(x)
    if not out.requires_grad:
        raise NotDifferentiableError("PAD output carries no gradient")
    grad, = torch.autograd.grad(loss_fn(out, labels), x)
    return grad


def fgsm(pad, x, target, eps: float, targeted: bool = True, loss_fn=F.cross_entropy) -> torch.Tensor:
    """Fast gradient sign method (Goodfellow et al., 2015).

    Targeted: ``x - eps * sign(grad L(f(x), target))``; untargeted ascends
    the loss of ``target`` instead. Output is clamped to [-1, 1].
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return x.detach().clone()
    grad = _loss_grad(pad, x, _target_labels(x, target), loss_fn)
    sign = -1.0 if targeted else 1.0
    return (x.detach() + sign * eps * grad.sign()).clamp(-1, 1)


def _project(x_adv, x, eps):
    return torch.min(torch.max(x_adv, x - eps), x + eps).clamp(-1, 1)


def bim(pad, x, target, eps: float, steps: int = 10, step_size: float | None = None, start=None) -> torch.Tensor:
    """Basic iterative method (Kurakin et al., 2017): repeated FGSM steps,
    each followed by projection onto the eps infinity-ball around ``x``."""
    if eps < 0 or steps < 1:
        raise ValueError("need eps >= 0 and steps >= 1")
    step_size = eps / 4 if step_size is None else step_size
    x = x.detach()
    labels = _target_labels(x, target)
    x_adv = x.clone() if start is None else _project(start.detach(), x, eps)
    for _ in range(steps):
        grad = _loss_grad(pad, x_adv, labels, F.cross_entropy)
        x_adv = _project(x_adv - step_size * grad.sign(), x, eps)
    return x_adv


def pgd(pad, x, target, eps: float, steps: int = 10, step_size: float | None = None,
        rng: np.random.Generator | None = None, rand_init: float | None = None) -> torch.Tensor:
    """Projected gradient descent (Madry et al., 2018): BIM from a uniform
    random start inside the ball of radius ``rand_init`` (default eps)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    radius = eps if rand_init is None else rand_init
    noise = torch.as_tensor(rng.uniform(-radius, radius, size=tuple(x.shape)), dtype=x.dtype) if radius > 0 else 0.0
    return bim(pad, x, target, eps, steps, step_size, start=(x.detach() + noise).clamp(-1, 1))


def _cw_gap(logits, t):
    """max_{i != t} Z_i - Z_t per sample."""
    other = logits.clone()
    other[torch.arange(len(t)), t] = -torch.inf
    return other.max(dim=1).values - logits[torch.arange(len(t)), t]


def _cw_margin(logits, t, kappa):
    return torch.clamp(_cw_gap(logits, t), min=-kappa)


def cw(pad, x, target, params: CwParams = CwParams()):
    """Carlini-Wagner L2 attack (Carlini & Wagner, 2017).

    Optimizes ``w`` with ``x' = tanh(w)`` (always in range) to minimize
    ``||x' - x||_2^2 + c * max(max_{i != t} Z_i - Z_t, -kappa)`` with Adam,
    binary-searching ``c`` per sample. Returns ``(best adversarial, found)``;
    samples without a success are returned unchanged with ``found=False``.
    """
    x = x.detach()
    n = x.shape[0]
    t = _target_labels(x, target)
    lo = torch.zeros(n)
    hi = torch.full((n,), float("inf"))
    c = torch.full((n,), float(params.c))
    best = x.clone()
    best_l2 = torch.full((n,), float("inf"))
    w0 = torch.atanh(x.clamp(-1 + 1e-6, 1 - 1e-6))
    for _ in range(params.search_steps):
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=params.lr)
        success = torch.zeros(n, dtype=torch.bool)
        for _ in range(params.iterations):
            adv = torch.tanh(w)
            logits = pad(adv)
            l2 = (adv - x).flatten(1).pow(2).sum(1)
            loss = (l2 + c * _cw_margin(logits, t, params.confidence)).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                # success needs the target to lead by kappa, not just win the argmax
                gap = _cw_gap(logits, t)
                hit = (gap < 0) & (gap <= -params.confidence)
                improved = hit & (l2 < best_l2)
                best[improved] = adv.detach()[improved]
                best_l2[improved] = l2[improved]
                success |= hit
        # binary search on c: shrink on success, grow otherwise
        hi = torch.where(success, torch.minimum(hi, c), hi)
        lo = torch.where(success, lo, torch.maximum(lo, c))
        c = torch.where(torch.isinf(hi), c * 10, (lo + hi) / 2)
    return best, torch.isfinite(best_l2)


def run_attack(pad, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> torch.Tensor:
    eps = cfg.budget.epsilon
    if cfg.method == "fgsm":
        return fgsm(pad, x, target, eps)
    if cfg.method == "bim":
        return bim(pad, x, target, eps, cfg.steps, cfg.resolved_step_size)
    if cfg.method == "pgd":
        return pgd(pad, x, target, eps, cfg.steps, cfg.resolved_step_size, rng)
    return cw(pad, x, target, cfg.cw)[0]
