"""Synthetic face/spoof dataset, manifests and identity-disjoint splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .channel import ChannelConfig, apply_channel
from .image import ImageTensor, UNIT, load_image, save_image, to_batch
from .labels import LIVE, LIVENESS, MEDIA, SPOOF

MANIFEST_VERSION = 1
SPLITS = ("all", "train", "val", "test")


class DataError(ValueError):
    """Invalid dataset parameters or inconsistent manifests."""


@dataclass(frozen=True)
class LabeledFace:
    image: ImageTensor
    liveness: str
    identity: int
    medium: str = "none"

    def __post_init__(self):
        if self.liveness not in LIVENESS or self.medium not in MEDIA:
            raise DataError(f"bad labels {self.liveness!r}/{self.medium!r}")
        if (self.liveness == LIVE) != (self.medium == "none"):
            raise DataError("live faces have medium 'none'; spoofs have print or replay")
        if self.identity < 0:
            raise DataError("identity must be >= 0")


@dataclass(frozen=True)
class Entry:
    path: str
    liveness: str
    identity: int
    medium: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    split: str = "all"
    seed: int = 0
    image_size: int = 64

    def __post_init__(self):
        self.root = Path(self.root)
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.entries)

    @property
    def identities(self) -> set:
        return {e.identity for e in self.entries}

    def select(self, liveness=None, identities=None) -> "DatasetManifest":
        entries = [
            e for e in self.entries
            if (liveness is None or e.liveness == liveness)
            and (identities is None or e.identity in identities)
        ]
        return replace(self, entries=entries)

    def load(self, entry: Entry) -> LabeledFace:
        img = load_image(self.root / entry.path)
        return LabeledFace(img, entry.liveness, entry.identity, entry.medium)

    def load_batch(self) -> torch.Tensor:
        """All entry images as one symmetric-range (N, 3, H, W) tensor."""
        if not self.entries:
            return torch.empty(0, 3, self.image_size, self.image_size)
        return to_batch([load_image(self.root / e.path) for e in self.entries])

    def pairs(self) -> list:
        """(live entry, spoof entry) pairs sharing an identity and sample index."""
        lives = {_pair_key(e.path): e for e in self.entries if e.liveness == LIVE}
        out = []
        for e in self.entries:
            if e.liveness == SPOOF and _pair_key(e.path) in lives:
                out.append((lives[_pair_key(e.path)], e))
        return out

    # serialization -------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"version={MANIFEST_VERSION},seed={self.seed},image_size={self.image_size},split={self.split}"]
        lines += [f"{e.path},{e.liveness},{e.identity},{e.medium}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / f"manifest_{self.split}.csv"
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str, root) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines:
            raise DataError("empty manifest")
        header = dict(kv.split("=", 1) for kv in lines[0].split(","))
        if int(header.get("version", -1)) != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest header {lines[0]!r}")
        entries = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"line {lineno}: expected path,liveness,identity,medium")
            entries.append(Entry(parts[0], parts[1], int(parts[2]), parts[3]))
        return cls(root, entries, header["split"], int(header["seed"]), int(header["image_size"]))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        return cls.loads(path.read_text(), path.parent)

    def validate(self) -> None:
        """Check every entry exists and decodes; raises DataError otherwise."""
        for e in self.entries:
            LabeledFace(self.load(e).image, e.liveness, e.identity, e.medium)


def _pair_key(path: str) -> str:
    stem = Path(path).stem
    return stem.split("_")[0] + "_" + stem.split("_")[1]


# procedural faces ------------------------------------------------------------


def _identity_params(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform([0.45, 0.30, 0.20], [0.92, 0.72, 0.60]),
        "axes": rng.uniform([0.42, 0.58], [0.62, 0.80]),
        "eye_y": rng.uniform(-0.28, -0.05),
        "eye_dx": rng.uniform(0.18, 0.34),
        "eye_r": rng.uniform(0.06, 0.11),
        "eye_color": rng.uniform(0.0, 0.45, size=3),
        "mouth_y": rng.uniform(0.28, 0.50),
        "mouth_w": rng.uniform(0.14, 0.34),
        "mouth_h": rng.uniform(0.03, 0.07),
        "mouth_color": rng.uniform([0.45, 0.05, 0.05], [0.85, 0.35, 0.35]),
        "hair_color": rng.uniform(0.0, 0.6, size=3),
        "hairline": rng.uniform(-0.62, -0.35),
        "nose_len": rng.uniform(0.08, 0.22),
    }


def _soft(d, px):
    """Antialiased inside-mask for signed distance ``d`` (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(d / (0.4 * px), -30, 30)))


def render_face(params: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one face sample with pose/illumination jitter. Returns HxWx3 in [0,1]."""
    px = 2.0 / size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    x = (xs + 0.5) / size * 2 - 1
    y = (ys + 0.5) / size * 2 - 1
    cx, cy = rng.uniform(-0.05, 0.05, size=2)
    s = rng.uniform(0.96, 1.04)
    x, y = (x - cx) / s, (y - cy) / s

    bg_a, bg_b = rng.uniform(0.2, 0.8, size=(2, 3))
    grad = (y + 1) / 2
    img = bg_a * (1 - grad[..., None]) + bg_b * grad[..., None]

    ax, ay = params["axes"]
    face = _soft(np.sqrt((x / ax) ** 2 + (y / ay) ** 2) - 1, px / ax)
    img = img * (1 - face[..., None]) + params["skin"] * face[..., None]

    hair = face * _soft(y - params["hairline"], px)
    img = img * (1 - hair[..., None]) + params["hair_color"] * hair[..., None]

    for side in (-1, 1):
        d = np.sqrt((x - side * params["eye_dx"]) ** 2 + (y - params["eye_y"]) ** 2) - params["eye_r"]
        eye = _soft(d, px)
        img = img * (1 - eye[..., None]) + params["eye_color"] * eye[..., None]

    mw, mh = params["mouth_w"], params["mouth_h"]
    mouth = _soft(np.sqrt((x / mw) ** 2 + ((y - params["mouth_y"]) / mh) ** 2) - 1, px / mh)
    img = img * (1 - mouth[..., None]) + params["mouth_color"] * mouth[..., None]

    nose = _soft(np.abs(x) - 0.025, px) * _soft(np.abs(y - 0.12) - params["nose_len"] / 2, px)
    img = img * (1 - 0.25 * nose[..., None])

    # illumination: directional gradient plus global gain
    theta = rng.uniform(0, 2 * np.pi)
    light = 1 + rng.uniform(0.0, 0.18) * (np.cos(theta) * x + np.sin(theta) * y)
    img = img * light[..., None] * rng.uniform(0.94, 1.06)
    img = img + rng.normal(0, 0.004, img.shape)  # live camera noise
    return np.clip(img, 0, 1).astype(np.float32)


def spoof_seed(manifest_seed: int, identity: int, sample: int) -> int:
    """Channel seed of the spoof paired with live sample (identity, sample)."""
    return int(np.random.SeedSequence([manifest_seed, identity, sample, 1]).generate_state(1)[0])


def spoof_medium(sample: int) -> str:
    return "print" if sample % 2 == 0 else "replay"


def generate_toy_dataset(
    n_identities: int,
    per_identity: int,
    image_size: int,
    seed: int,
    root,
    channels: dict | None = None,
) -> DatasetManifest:
    """Render live faces and their channel-degraded spoofs under ``root``.

    Each live sample ``(identity, k)`` gets a spoof through ``channels[m]``
    (default: ``ChannelConfig.default(m)``) for medium ``m = spoof_medium(k)``,
    with rng seed ``spoof_seed(seed, identity, k)``.
    """
    if n_identities < 2 or per_identity < 2 or image_size < 32:
        raise DataError("need n_identities >= 2, per_identity >= 2, image_size >= 32")
    root = Path(root)
    channels = channels or {m: ChannelConfig.default(m) for m in ("print", "replay")}
    entries = []
    for ident in range(n_identities):
        id_rng = np.random.default_rng([seed, ident, 0])
        params = _identity_params(id_rng)
        for k in range(per_identity):
            face = render_face(params, image_size, np.random.default_rng([seed, ident, k, 2]))
            # quantize first so the stored spoof is exactly the channel output of the stored live
            live = ImageTensor(np.round(np.clip(face, 0, 1) * 255) / 255, UNIT)
            medium = spoof_medium(k)
            spoof = apply_channel(live, channels[medium], np.random.default_rng(spoof_seed(seed, ident, k)))
            live_path = f"live/id{ident:03d}_s{k:03d}.png"
            spoof_path = f"spoof/id{ident:03d}_s{k:03d}_{medium}.png"
            save_image(live, root / live_path)
            save_image(spoof, root / spoof_path)
            entries.append(Entry(live_path, LIVE, ident, "none"))
            entries.append(Entry(spoof_path, SPOOF, ident, medium))
    manifest = DatasetManifest(root, entries, "all", seed, image_size)
    manifest.write()
    return manifest


def split_by_identity(manifest: DatasetManifest, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Partition identities into disjoint train/val/test manifests."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or not math.isclose(fractions.sum(), 1.0):
        raise DataError("fractions must be three non-negative numbers summing to 1")
    ids = sorted(manifest.identities)
    needed = int(np.count_nonzero(fractions))
    if len(ids) < needed:
        raise DataError(f"{len(ids)} identities cannot fill {needed} non-empty splits")
    # largest-remainder apportionment, every nonzero split gets >= 1 identity
    raw = fractions * len(ids)
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: len(ids) - counts.sum()]:
        counts[i] += 1
    for i in np.flatnonzero((fractions > 0) & (counts == 0)):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(ids)
    bounds = np.cumsum(counts)[:-1]
    out = []
    for name, chunk in zip(("train", "val", "test"), np.split(order, bounds)):
        keep = {int(i) for i in chunk}
        out.append(replace(manifest.select(identities=keep), split=name))
    return tuple(out)
