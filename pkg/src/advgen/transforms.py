"""Differentiable geometric/photometric transforms and the EOT objective.

All transforms act on (N, 3, H, W) tensors in the symmetric range. Geometric
kinds are folded into a single inverse warp and resampled once with bilinear
interpolation; photometric kinds follow. Composition order is fixed by
``KIND_ORDER``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .labels import target_index

GEOMETRIC = ("rotation", "scale", "translation", "perspective", "horizontal_fold_shade")
OPTICAL = ("defocus",)
PHOTOMETRIC = ("brightness", "contrast")
KIND_ORDER = GEOMETRIC + OPTICAL + PHOTOMETRIC

# number of params, legal [lo, hi] per param
_LEGAL = {
    "rotation": (1, (-180.0, 180.0)),
    "scale": (1, (1e-6, 4.0)),
    "translation": (2, (-1.0, 1.0)),  # fraction of image width/height
    "perspective": (8, (-0.5, 0.5)),  # corner offsets, fraction of width/height
    "horizontal_fold_shade": (2, (-1.0, 1.0)),  # (crease position, strength)
    "defocus": (1, (0.0, 8.0)),  # Gaussian blur sigma in pixels
    "brightness": (1, (-2.0, 2.0)),
    "contrast": (1, (0.0, 4.0)),
}
_IDENTITY_PARAMS = {
    "rotation": (0.0,),
    "scale": (1.0,),
    "translation": (0.0, 0.0),
    "perspective": (0.0,) * 8,
    "horizontal_fold_shade": None,  # identity whenever strength == 0
    "defocus": (0.0,),
    "brightness": (0.0,),
    "contrast": (1.0,),
}
# fold: shear slope per unit strength, crease positions drawn from this range
FOLD_SHEAR = 0.25
FOLD_POSITION_RANGE = (-0.4, 0.4)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in _LEGAL:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        n, (lo, hi) = _LEGAL[self.kind]
        params = tuple(float(p) for p in np.atleast_1d(self.params))
        if len(params) != n:
            raise ValueError(f"{self.kind} takes {n} params, got {len(params)}")
        for p in params:
            if not lo <= p <= hi:
                raise ValueError(f"{self.kind} param {p} outside [{lo}, {hi}]")
        object.__setattr__(self, "params", params)

    @property
    def is_identity(self) -> bool:
        if self.kind == "horizontal_fold_shade":
            return self.params[1] == 0.0
        return self.params == _IDENTITY_PARAMS[self.kind]


@dataclass(frozen=True)
class Transform:
    """A composite transform: at most one spec per kind, applied in KIND_ORDER."""

    specs: tuple = ()

    def __post_init__(self):
        specs = tuple(sorted(self.specs, key=lambda s: KIND_ORDER.index(s.kind)))
        kinds = [s.kind for s in specs]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate transform kinds in {kinds}")
        object.__setattr__(self, "specs", specs)

    @classmethod
    def of(cls, **kinds) -> "Transform":
        """``Transform.of(rotation=15, brightness=0.1)``."""
        return cls(tuple(TransformSpec(k, v) for k, v in kinds.items()))

    @property
    def is_identity(self) -> bool:
        return all(s.is_identity for s in self.specs)

    def get(self, kind):
        for s in self.specs:
            if s.kind == kind:
                return s.params
        return None


IDENTITY = Transform()


@dataclass
class TransformDistribution:
    """Independent uniform ranges per enabled kind.

    Multi-parameter kinds share one range: translation draws dx and dy from it,
    perspective draws all eight corner offsets, and the fold draws its
    strength (the crease position uses ``FOLD_POSITION_RANGE``).
    """

    enabled: dict = field(default_factory=dict)
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        for kind in list(self.enabled) + list(self.ranges):
            if kind not in _LEGAL:
                raise ValueError(f"unknown transform kind {kind!r}")
        for kind, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise ValueError(f"{kind}: min {lo} > max {hi}")

    @classmethod
    def default(cls) -> "TransformDistribution":
        ranges = {
            "rotation": (-25.0, 25.0),
            "scale": (0.9, 1.1),
            "translation": (-0.05, 0.05),
            "perspective": (-0.04, 0.04),
            "horizontal_fold_shade": (0.0, 0.1),
            "brightness": (-0.15, 0.15),
            "contrast": (0.85, 1.15),
        }
        return cls(enabled={k: True for k in ranges}, ranges=ranges)

    @classmethod
    def recapture(cls) -> "TransformDistribution":
        """Mild pose jitter plus camera defocus: what one recapture does to an image."""
        ranges = {
            "rotation": (-3.0, 3.0),
            "perspective": (-0.02, 0.02),
            "defocus": (0.5, 1.5),
            "brightness": (-0.1, 0.1),
            "contrast": (0.9, 1.1),
        }
        return cls(enabled={k: True for k in ranges}, ranges=ranges)

    @classmethod
    def identity(cls) -> "TransformDistribution":
        return cls()

    @classmethod
    def from_config(cls, section: dict) -> "TransformDistribution":
        return cls(
            enabled={k: bool(v["enabled"]) for k, v in section.items()},
            ranges={k: (float(v["min"]), float(v["max"])) for k, v in section.items()},
        )

    def active_kinds(self):
        return [k for k in KIND_ORDER if self.enabled.get(k, False)]


def sample_transform(dist: TransformDistribution, rng: np.random.Generator) -> Transform:
    specs = []
    for kind in dist.active_kinds():
        lo, hi = dist.ranges[kind]
        if kind == "horizontal_fold_shade":
            params = (rng.uniform(*FOLD_POSITION_RANGE), rng.uniform(lo, hi))
        else:
            n = _LEGAL[kind][0]
            params = tuple(rng.uniform(lo, hi, size=n))
        specs.append(TransformSpec(kind, params))
    return Transform(tuple(specs))


def _forward_matrix(t: Transform, aspect: float) -> np.ndarray:
    """3x3 homography mapping source to destination in normalized coords."""
    m = np.eye(3)
    angle = t.get("rotation")
    if angle is not None:
        th = math.radians(angle[0])
        c, s = math.cos(th), math.sin(th)
        # rotate in pixel-isotropic coordinates, then rescale x by the aspect
        a = np.diag([aspect, 1.0, 1.0])
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        m = np.linalg.inv(a) @ r @ a @ m
    scale = t.get("scale")
    if scale is not None:
        m = np.diag([scale[0], scale[0], 1.0]) @ m
    shift = t.get("translation")
    if shift is not None:
        m = np.array([[1.0, 0.0, 2 * shift[0]], [0.0, 1.0, 2 * shift[1]], [0.0, 0.0, 1.0]]) @ m
    corners = t.get("perspective")
    if corners is not None and any(corners):
        m = perspective_matrix(corners) @ m
    return m


def perspective_matrix(offsets) -> np.ndarray:
    """Homography sending the frame corners to corners displaced by ``offsets``.

    ``offsets`` holds (dx, dy) for the corners TL, TR, BR, BL as fractions of
    the frame size.
    """
    src = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    dst = src + 2.0 * np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def _base_grid(h, w, dtype, device):
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * 2 - 1
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * 2 - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def _warp(t: Transform, x: torch.Tensor, fill: float) -> torch.Tensor:
    n, _, h, w = x.shape
    gx, gy = _base_grid(h, w, x.dtype, x.device)
    fold = t.get("horizontal_fold_shade")
    if fold is not None and fold[1] != 0.0:
        # sheared half: y' = y + k (x - c) for x > c; invert before the homography
        crease, k = fold[0], FOLD_SHEAR * fold[1]
        gy = gy - k * torch.clamp(gx - crease, min=0.0)
    inv = torch.as_tensor(np.linalg.inv(_forward_matrix(t, w / h)), dtype=x.dtype)
    den = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / den
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / den
    grid = torch.stack([sx, sy], dim=-1).expand(n, h, w, 2)
    out = F.grid_sample(x - fill, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out + fill


def _fold_shade(x: torch.Tensor, crease: float, strength: float) -> torch.Tensor:
    w = x.shape[-1]
    px = torch.arange(w, dtype=x.dtype, device=x.device) + 0.5
    crease_px = (crease + 1) / 2 * w
    ramp = torch.clamp(px - crease_px + 0.5, 0.0, 1.0)  # 1-pixel feathered seam
    return x - strength * ramp


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with edge replication, radius ceil(3 sigma)."""
    r = max(1, math.ceil(3 * sigma))
    k = torch.exp(-torch.arange(-r, r + 1, dtype=x.dtype, device=x.device) ** 2 / (2 * sigma**2))
    k = (k / k.sum()).repeat(x.shape[1], 1, 1)
    c = x.shape[1]
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), k.view(c, 1, 1, -1), groups=c)
    return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), k.view(c, 1, -1, 1), groups=c)


def apply_transform(t: Transform, x, fill: float = 0.0):
    """Apply composite ``t`` to a batch ``x`` (or an ImageTensor).

    Out-of-frame pixels take the value ``fill``; photometric stages clamp the
    result to [-1, 1]. The identity transform returns ``x`` untouched.
    """
    from .image import ImageTensor

    if isinstance(x, ImageTensor):
        return ImageTensor.from_torch(apply_transform(t, x.to_torch(), fill))
    if t.is_identity:
        return x
    geometric = [s for s in t.specs if s.kind in GEOMETRIC and not s.is_identity]
    out = _warp(t, x, fill) if geometric else x
    blur = t.get("defocus")
    if blur is not None and blur[0] > 0.0:
        out = gaussian_blur(out, blur[0])
    photometric = False
    fold = t.get("horizontal_fold_shade")
    if fold is not None and fold[1] != 0.0:
        out = _fold_shade(out, fold[0], fold[1])
        photometric = True
    b = t.get("brightness")
    if b is not None and b[0] != 0.0:
        out = out + b[0]
        photometric = True
    c = t.get("contrast")
    if c is not None and c[0] != 1.0:
        out = out * c[0]
        photometric = True
    if photometric:
        out = out.clamp(-1.0, 1.0)
    return out


def geometric_residual(t: Transform, x):
    """Image-space displacement ``t(x) - x`` induced by a sampled transform."""
    from .image import ImageTensor

    if isinstance(x, ImageTensor):
        x = x.to_torch()
    return apply_transform(t, x) - x


def lp_norm(x: torch.Tensor, p) -> torch.Tensor:
    """Per-sample Lp norm over all non-batch dims."""
    flat = x.reshape(x.shape[0], -1)
    if p in (float("inf"), "inf"):
        return flat.abs().amax(dim=1)
    return torch.linalg.vector_norm(flat, ord=float(p), dim=1)


class NotDifferentiableError(TypeError):
    """The model does not propagate gradients to its input."""


def eot_loss(
    model,
    x: torch.Tensor,
    rho: torch.Tensor,
    target,
    dist: TransformDistribution,
    n_samples: int,
    rng: np.random.Generator,
    lam: float = 0.0,
    p=2,
    compose: bool = False,
) -> torch.Tensor:
    """Monte-Carlo expectation-over-transformation attack objective.

    Averages the cross-entropy of ``model(t_i(x) + rho)`` toward ``target``
    over ``n_samples`` transforms drawn i.i.d. from ``dist``, plus
    ``lam * ||rho||_p`` (batch mean). With ``compose=True`` the transform is
    applied to the perturbed image instead, ``model(t_i(x + rho))``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    label = torch.full((x.shape[0],), target_index(target), dtype=torch.long)
    total = 0.0
    for _ in range(n_samples):
        t = sample_transform(dist, rng)
        inp = apply_transform(t, x + rho) if compose else apply_transform(t, x) + rho
        logits = model(inp)
        if rho.requires_grad and not logits.requires_grad:
            raise NotDifferentiableError("model output carries no gradient")
        total = total + F.cross_entropy(logits, label)
    loss = total / n_samples
    if lam:
        loss = loss + lam * lp_norm(rho, p).mean()
    return loss
