"""Attack success rate, SSIM, digital/physical evaluation and report rendering."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .channel import ChannelConfig, apply_channel
from .image import ImageTensor
from .labels import LIVE_INDEX
from .models import cosine
from .transforms import Transform, apply_transform

MODES = ("digital", "physical")
CSV_FIELDS = ("path", "method", "mode", "success", "ssim", "identity_cos", "ssim_vs_live")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
_LUMA = (0.299, 0.587, 0.114)

# Published (digital, physical) ASR in percent, measured with real printers and
# displays. Listed beside toy results for orientation, never as a target.
PUBLISHED_ASR = {"bim": (98.04, 41.22), "fgsm": (75.32, 23.13), "pgd": (98.63, 36.42), "advgen": (100.0, 81.02)}


def asr(successes: int, total: int) -> float:
    """Percentage of attacks classified as live."""
    if total < 1:
        raise ValueError("asr needs at least one attack")
    if not 0 <= successes <= total:
        raise ValueError(f"successes {successes} outside [0, {total}]")
    return float(Fraction(100 * successes, total))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _as_unit_array(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.to_unit().data.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def ssim(x, y, mode: str = "rgb", data_range: float = 1.0) -> float:
    """Windowed SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    ``mode="rgb"`` averages the per-channel maps; ``mode="gray"`` scores the
    luminance (ITU-R 601 weights). Inputs are unit-range H x W x 3 arrays or
    ImageTensors.
    """
    a, b = _as_unit_array(x), _as_unit_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"need H x W x C images at least {SSIM_WINDOW} px on a side, got {a.shape}")
    if mode == "gray":
        a, b = a @ np.array(_LUMA), b @ np.array(_LUMA)
        a, b = a[..., None], b[..., None]
    elif mode != "rgb":
        raise ValueError(f"unknown ssim mode {mode!r}")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    # (C, 1, H, W) so one conv handles every channel
    ta = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[:, None]
    tb = torch.from_numpy(np.ascontiguousarray(b.transpose(2, 0, 1)))[:, None]
    win = torch.from_numpy(gaussian_window())[None, None]
    mu_a, mu_b = F.conv2d(ta, win), F.conv2d(tb, win)
    var_a = F.conv2d(ta * ta, win) - mu_a**2
    var_b = F.conv2d(tb * tb, win) - mu_b**2
    cov = F.conv2d(ta * tb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    if np.array_equal(a, b):
        return 1.0  # the ratio is 1 analytically; skip rounding noise in the variances
    return float((num / den).mean())


@dataclass(frozen=True)
class AttackRecord:
    path: str
    method: str
    mode: str
    success: bool
    ssim: float
    identity_cos: float
    ssim_vs_live: float = math.nan


@dataclass
class AttackReport:
    """Per-image records plus the environment that produced them."""

    records: list = field(default_factory=list)
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.records:
            if r.mode not in MODES:
                raise ValueError(f"unknown mode {r.mode!r}")
            if not (-1 - 1e-9 <= r.ssim <= 1 + 1e-9):
                raise ValueError(f"ssim {r.ssim} outside [-1, 1]")

    def select(self, method=None, mode=None) -> list:
        return [r for r in self.records if (method is None or r.method == method) and (mode is None or r.mode == mode)]

    @property
    def methods(self) -> list:
        return list(dict.fromkeys(r.method for r in self.records))

    def asr(self, method=None, mode=None) -> float:
        rs = self.select(method, mode)
        return asr(sum(r.success for r in rs), len(rs))

    def mean(self, attr: str, method=None, mode=None) -> float:
        vals = [getattr(r, attr) for r in self.select(method, mode)]
        return float(np.mean(vals)) if vals else math.nan

    def aggregates(self) -> dict:
        """{method: {mode: {asr, mean_ssim, mean_identity_cos, n}}}."""
        out = {}
        for m in self.methods:
            out[m] = {}
            for mode in MODES:
                if self.select(m, mode):
                    out[m][mode] = {
                        "asr": self.asr(m, mode),
                        "mean_ssim": self.mean("ssim", m, mode),
                        "mean_identity_cos": self.mean("identity_cos", m, mode),
                        "n": len(self.select(m, mode)),
                    }
        return out

    def merge(self, other: "AttackReport") -> "AttackReport":
        return AttackReport(self.records + other.records, {**self.env, **other.env})


def _channel_one(img: torch.Tensor, cfg: ChannelConfig, rng) -> torch.Tensor:
    return apply_channel(ImageTensor.from_torch(img), cfg, rng).to_torch()


def physical_batch(adv: torch.Tensor, media, channel: dict, rng: np.random.Generator, workers: int = 1) -> torch.Tensor:
    """Run every image through the channel of its source medium.

    ``channel`` maps medium -> ChannelConfig. Each image gets its own rng
    stream spawned up front, so the result does not depend on ``workers``.
    """
    streams = rng.spawn(len(adv))
    jobs = [(adv[i], channel[media[i]], streams[i]) for i in range(len(adv))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda j: _channel_one(*j), jobs))
    else:
        out = [_channel_one(*j) for j in jobs]
    return torch.cat(out) if out else adv.clone()


def live_predictions(pad, x: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([pad(x[i:i + chunk]).argmax(1) == LIVE_INDEX for i in range(0, len(x), chunk)])


def _to_unit_hwc(t: torch.Tensor) -> np.ndarray:
    return ((t.detach().double().numpy() + 1) / 2).transpose(1, 2, 0)


def evaluate_pipeline(
    adv: torch.Tensor,
    pad,
    mode: str,
    channel: dict | None,
    rng: np.random.Generator,
    *,
    sources: torch.Tensor,
    paths,
    media,
    method: str,
    embedder=None,
    lives: torch.Tensor | None = None,
    ssim_mode: str = "rgb",
    workers: int = 1,
) -> AttackReport:
    """Score adversarial images digitally or after print/replay recapture.

    ``sources`` are the pre-attack spoofs (SSIM and identity reference);
    ``lives`` optionally the matching live faces for ``ssim_vs_live``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if sources is None or sources.shape != adv.shape:
        raise ValueError("evaluation needs one source image per adversarial image")
    if len(paths) != len(adv) or len(media) != len(adv):
        raise ValueError("paths and media must match the batch")
    if mode == "physical":
        if channel is None:
            raise ValueError("physical mode needs channel configs")
        fed = physical_batch(adv, list(media), channel, rng, workers)
    else:
        fed = adv
    success = live_predictions(pad, fed)
    if embedder is not None:
        with torch.no_grad():
            ids = cosine(embedder, sources, adv).tolist()
    else:
        ids = [math.nan] * len(adv)
    records = []
    for i in range(len(adv)):
        a = _to_unit_hwc(adv[i])
        s = ssim(_to_unit_hwc(sources[i]), a, ssim_mode)
        sl = ssim(_to_unit_hwc(lives[i]), a, ssim_mode) if lives is not None else math.nan
        records.append(AttackRecord(str(paths[i]), method, mode, bool(success[i]), s, float(ids[i]), sl))
    return AttackReport(records)


def default_cases() -> dict:
    """Single-distortion cases scored on top of the channel."""
    return {
        "rotation": Transform.of(rotation=5.0),
        "perspective": Transform.of(perspective=(0.03, 0.0, -0.03, 0.0, 0.0, 0.0, 0.0, 0.0)),
        "fold": Transform.of(horizontal_fold_shade=(0.0, 0.1)),
        "brightness": Transform.of(brightness=0.15),
    }


def geometric_robustness_report(adv: torch.Tensor, pad, cases: dict, channel: dict, media,
                                rng: np.random.Generator, workers: int = 1) -> list:
    """Rows ``{"case", "asr"}``: ASR after distortion ``t`` then the channel."""
    if not cases:
        raise ValueError("no transform cases given")
    rows = []
    for name, t in cases.items():
        with torch.no_grad():
            distorted = apply_transform(t, adv)
        fed = physical_batch(distorted, list(media), channel, np.random.default_rng(rng.integers(2**63)), workers)
        hits = live_predictions(pad, fed)
        rows.append({"case": name, "asr": asr(int(hits.sum()), len(hits))})
    return rows


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def records_csv(report: AttackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in report.records:
        w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def parse_records_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [AttackRecord(r["path"], r["method"], r["mode"], r["success"] == "1", float(r["ssim"]),
                         float(r["identity_cos"]), float(r["ssim_vs_live"])) for r in rows]


def markdown_table(report: AttackReport, robustness: dict | None = None) -> str:
    """One row per method: digital and physical ASR, mean SSIM and identity cosine."""
    agg = report.aggregates()
    lines = ["| method | digital ASR | physical ASR | SSIM | identity cos |", "|---|---|---|---|---|"]
    for m, modes in agg.items():
        d = modes.get("digital", {})
        p = modes.get("physical", {})
        cell = lambda s, k: f"{s[k]:.2f}" if k in s else "-"  # noqa: E731
        lines.append(f"| {m} | {cell(d, 'asr')} | {cell(p, 'asr')} | {cell(d or p, 'mean_ssim')} | "
                     f"{cell(d or p, 'mean_identity_cos')} |")
    if robustness:
        cases = list(next(iter(robustness.values())))
        lines += ["", "| method | " + " | ".join(cases) + " |", "|---|" + "---|" * len(cases)]
        for m, row in robustness.items():
            lines.append(f"| {m} | " + " | ".join(f"{row[c]:.2f}" for c in cases) + " |")
    env = report.env
    if env:
        lines += ["", "```", json.dumps(env, sort_keys=True, indent=1), "```"]
    return "\n".join(lines) + "\n"


def render_report(report: AttackReport, directory, robustness: dict | None = None, stem: str = "report") -> dict:
    """Write ``<stem>.csv`` (records), ``<stem>_summary.json`` and ``<stem>.md``.

    Output is a pure function of the report, so repeated renders are
    byte-identical.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = {"aggregates": report.aggregates(), "robustness": robustness or {}, "env": report.env}
    paths = {
        "csv": directory / f"{stem}.csv",
        "summary": directory / f"{stem}_summary.json",
        "markdown": directory / f"{stem}.md",
    }
    paths["csv"].write_text(records_csv(report))
    paths["summary"].write_text(json.dumps(summary, sort_keys=True, indent=1, default=_fmt) + "\n")
    paths["markdown"].write_text(markdown_table(report, robustness) + published_table(report.methods))
    return paths


def published_table(methods) -> str:
    rows = [m for m in methods if m in PUBLISHED_ASR]
    if not rows:
        return ""
    lines = ["", "Published hardware results, for orientation:", "",
             "| method | digital ASR | physical ASR |", "|---|---|---|"]
    lines += [f"| {m} | {PUBLISHED_ASR[m][0]:.2f} | {PUBLISHED_ASR[m][1]:.2f} |" for m in rows]
    return "\n".join(lines) + "\n"
