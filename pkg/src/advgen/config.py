"""Experiment configuration: strict YAML loading, defaults, overrides and hashing.

The file is a mapping of sections; every key is optional and unknown keys are
errors. ``ADVGEN__<SECTION>__<KEY>=<yaml value>`` environment variables
override file values (nested keys join with ``__``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adversarial import GEOM_SOURCES, HINGE_FORMS, PHY_SOURCES
from .channel import ChannelConfig
from .transforms import KIND_ORDER, TransformDistribution

ENV_PREFIX = "ADVGEN__"
METHODS = ("fgsm", "bim", "pgd", "cw", "advgen")


class ConfigError(ValueError):
    """Unknown key, wrong type or out-of-range value; message names the key path."""


def _dist_section(dist: TransformDistribution) -> dict:
    return {k: {"enabled": bool(dist.enabled.get(k, False)), "min": float(lo), "max": float(hi)}
            for k, (lo, hi) in dist.ranges.items()}


def _channel_section(medium: str) -> dict:
    d = dataclasses.asdict(ChannelConfig.default(medium))
    d.pop("medium")
    d.pop("seed")
    return d


@dataclass
class DataSection:
    n_identities: int = 32
    per_identity: int = 8
    image_size: int = 64
    split: list = field(default_factory=lambda: [0.5, 0.17, 0.33])


@dataclass
class ModelsSection:
    pad_arch: str = "cnn_small"
    embed_dim: int = 64
    generator_cap: float = 0.3


@dataclass
class StageSection:
    """Supervised training of the PAD, the embedder or the decomposer."""

    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    augment: bool = True


@dataclass
class IdganSection:
    lambda_cycle: float = 10.0
    lambda_id: float = 1.0
    epochs: int = 100
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.5, 0.9])
    batch_size: int = 1
    adv_mode: str = "least_squares"
    one_way_id: bool = False
    augment: bool = False
    input_noise: float = 0.0


@dataclass
class AdvgenSection:
    eps1: float = 0.1
    eps2: float = 0.5
    lambda_phy: float = 1.0
    lambda_geom: float = 1.0
    lambda_identity: float = 1.0
    lambda_gan: float = 0.0
    lambda_attack: float = 1.0
    strict_eq12: bool = False
    hinge_form: str = "paper_floor"
    hinge_per_pixel: bool = True
    phy_source: str = "simulated"
    geom_source: str = "adversarial"
    eot_samples: int = 4
    noise_gain: float = 1.5
    simulated_inputs: bool = True
    residual_cap: float = 0.3
    fgsm_eps: float = 0.1
    iters: int = 3
    epochs: int = 100
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.5, 0.9])
    batch_size: int = 1


@dataclass
class EvalSection:
    methods: list = field(default_factory=lambda: list(METHODS))
    modes: list = field(default_factory=lambda: ["digital", "physical"])
    ssim_mode: str = "rgb"
    baseline_eps: float = 0.1
    baseline_steps: int = 10
    cw_iterations: int = 100
    cw_search_steps: int = 5
    cw_confidence: float = 2.0
    rotation_deg: float = 5.0
    perspective: float = 0.03
    fold_strength: float = 0.1
    brightness: float = 0.15
    identity_floor: float = 0.8


@dataclass
class FastSection:
    """Reduced training budgets applied by ``--fast``."""

    pad_epochs: int = 20
    embedder_epochs: int = 30
    decomposer_epochs: int = 60
    idgan_epochs: int = 8
    idgan_lr: float = 1e-3
    advgen_epochs: int = 8
    advgen_lr: float = 1e-3
    advgen_batch_size: int = 4
    eot_samples: int = 2
    cw_iterations: int = 50
    cw_search_steps: int = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    channel: dict = field(default_factory=lambda: {m: _channel_section(m) for m in ("print", "replay")})
    transforms: dict = field(default_factory=lambda: _dist_section(TransformDistribution.default()))
    recapture: dict = field(default_factory=lambda: _dist_section(TransformDistribution.recapture()))
    models: ModelsSection = field(default_factory=ModelsSection)
    pad: StageSection = field(default_factory=lambda: StageSection(epochs=20, augment=False))
    embedder: StageSection = field(default_factory=lambda: StageSection(epochs=30))
    decomposer: StageSection = field(default_factory=lambda: StageSection(epochs=60, augment=False))
    idgan: IdganSection = field(default_factory=IdganSection)
    advgen: AdvgenSection = field(default_factory=AdvgenSection)
    eval: EvalSection = field(default_factory=EvalSection)
    fast: FastSection = field(default_factory=FastSection)

    def channel_config(self, medium: str, seed: int = 0) -> ChannelConfig:
        return ChannelConfig(medium=medium, seed=seed, **self.channel[medium])

    def channels(self) -> dict:
        return {m: self.channel_config(m) for m in ("print", "replay")}

    def distribution(self, section: str = "transforms") -> TransformDistribution:
        return TransformDistribution.from_config(getattr(self, section))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        """Digest of the canonical (sorted-key JSON) serialization."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_fast(self) -> "ExperimentConfig":
        f = self.fast
        d = self.to_dict()
        d["pad"]["epochs"] = f.pad_epochs
        d["embedder"]["epochs"] = f.embedder_epochs
        d["decomposer"]["epochs"] = f.decomposer_epochs
        d["idgan"].update(epochs=f.idgan_epochs, lr=f.idgan_lr)
        d["advgen"].update(epochs=f.advgen_epochs, lr=f.advgen_lr, batch_size=f.advgen_batch_size,
                           eot_samples=f.eot_samples)
        d["eval"].update(cw_iterations=f.cw_iterations, cw_search_steps=f.cw_search_steps)
        return from_dict(d)

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """``cfg.with_overrides(**{"advgen.lambda_phy": 0.0})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            _set_path(d, key.split("."), value, key)
        return from_dict(d)


def _set_path(d: dict, parts: list, value, full: str):
    for p in parts[:-1]:
        if not isinstance(d.get(p), dict):
            raise ConfigError(f"{full}: unknown section {p!r}")
        d = d[p]
    if parts[-1] not in d:
        raise ConfigError(f"{full}: unknown key")
    d[parts[-1]] = value


# ---- strict parsing ---------------------------------------------------------

def _check_scalar(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {type(value).__name__}")
        if default:
            return [_check_scalar(v, default[0], f"{path}[{i}]") for i, v in enumerate(value)]
        return list(value)
    raise ConfigError(f"{path}: unsupported value")


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _merge(default, raw, path):
    """Merge ``raw`` onto the default value strictly."""
    if dataclasses.is_dataclass(default):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path or 'config'}: expected a mapping")
        names = {f.name for f in dataclasses.fields(default)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"{_join(path, unknown[0])}: unknown key")
        kw = {}
        for f in dataclasses.fields(default):
            cur = getattr(default, f.name)
            kw[f.name] = _merge(cur, raw[f.name], _join(path, f.name)) if f.name in raw else cur
        return type(default)(**kw)
    if isinstance(default, dict):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path or 'config'}: expected a mapping")
        unknown = sorted(set(raw) - set(default))
        if unknown:
            raise ConfigError(f"{_join(path, unknown[0])}: unknown key")
        return {k: _merge(v, raw[k], _join(path, k)) if k in raw else v for k, v in default.items()}
    return _check_scalar(raw, default, path)


def _range(ok: bool, path: str, msg: str):
    if not ok:
        raise ConfigError(f"{path}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Range checks; raises ConfigError naming the offending key."""
    _range(cfg.seed >= 0, "seed", "must be >= 0")
    d = cfg.data
    _range(d.n_identities >= 3, "data.n_identities", "must be >= 3 (three disjoint splits)")
    _range(d.per_identity >= 2, "data.per_identity", "must be >= 2")
    _range(d.image_size >= 32 and d.image_size % 16 == 0, "data.image_size", "must be a multiple of 16, >= 32")
    _range(len(d.split) == 3 and all(x > 0 for x in d.split) and abs(sum(d.split) - 1) < 1e-9,
           "data.split", "three positive fractions summing to 1")
    for medium, sec in cfg.channel.items():
        try:
            cfg.channel_config(medium)
        except ValueError as e:
            raise ConfigError(f"channel.{medium}: {e}") from None
    for name in ("transforms", "recapture"):
        sec = getattr(cfg, name)
        for kind in sec:
            _range(kind in KIND_ORDER, f"{name}.{kind}", "unknown transform kind")
        try:
            cfg.distribution(name)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"{name}: {e}") from None
    _range(cfg.models.pad_arch in ("cnn_small", "cnn_wide"), "models.pad_arch", "cnn_small or cnn_wide")
    _range(cfg.models.embed_dim >= 2, "models.embed_dim", "must be >= 2")
    _range(0 < cfg.models.generator_cap <= 2, "models.generator_cap", "must lie in (0, 2]")
    for name in ("pad", "embedder", "decomposer"):
        s = getattr(cfg, name)
        _range(s.epochs >= 1, f"{name}.epochs", "must be >= 1")
        _range(s.lr > 0, f"{name}.lr", "must be > 0")
        _range(s.batch_size >= 1, f"{name}.batch_size", "must be >= 1")
    for name in ("idgan", "advgen"):
        s = getattr(cfg, name)
        _range(s.epochs >= 1, f"{name}.epochs", "must be >= 1")
        _range(s.lr > 0, f"{name}.lr", "must be > 0")
        _range(s.batch_size >= 1, f"{name}.batch_size", "must be >= 1")
        _range(len(s.betas) == 2 and all(0 <= b < 1 for b in s.betas), f"{name}.betas", "two values in [0, 1)")
    g = cfg.idgan
    _range(g.lambda_cycle >= 0, "idgan.lambda_cycle", "must be >= 0")
    _range(g.lambda_id >= 0, "idgan.lambda_id", "must be >= 0")
    _range(g.adv_mode in ("log", "least_squares"), "idgan.adv_mode", "log or least_squares")
    _range(g.input_noise >= 0, "idgan.input_noise", "must be >= 0")
    a = cfg.advgen
    for k in ("lambda_phy", "lambda_geom", "lambda_identity", "lambda_gan", "lambda_attack", "noise_gain"):
        _range(getattr(a, k) >= 0, f"advgen.{k}", "must be >= 0")
    _range(a.eps1 > 0, "advgen.eps1", "must be > 0")
    _range(a.eps2 > 0, "advgen.eps2", "must be > 0")
    _range(0 < a.residual_cap <= 1, "advgen.residual_cap", "must lie in (0, 1]")
    _range(a.fgsm_eps > 0, "advgen.fgsm_eps", "must be > 0")
    _range(a.iters >= 0, "advgen.iters", "must be >= 0")
    _range(a.eot_samples >= 1, "advgen.eot_samples", "must be >= 1")
    _range(a.hinge_form in HINGE_FORMS, "advgen.hinge_form", f"one of {HINGE_FORMS}")
    _range(a.phy_source in PHY_SOURCES, "advgen.phy_source", f"one of {PHY_SOURCES}")
    _range(a.geom_source in GEOM_SOURCES, "advgen.geom_source", f"one of {GEOM_SOURCES}")
    e = cfg.eval
    for m in e.methods:
        _range(m in METHODS, "eval.methods", f"unknown method {m!r}")
    for m in e.modes:
        _range(m in ("digital", "physical"), "eval.modes", f"unknown mode {m!r}")
    _range(e.ssim_mode in ("rgb", "gray"), "eval.ssim_mode", "rgb or gray")
    _range(e.baseline_eps > 0, "eval.baseline_eps", "must be > 0")
    _range(e.baseline_steps >= 1, "eval.baseline_steps", "must be >= 1")
    _range(e.cw_iterations >= 1 and e.cw_search_steps >= 1, "eval.cw_iterations", "C&W counts must be >= 1")
    _range(e.cw_confidence >= 0, "eval.cw_confidence", "must be >= 0")
    _range(-1 <= e.identity_floor <= 1, "eval.identity_floor", "must lie in [-1, 1]")
    for k, v in dataclasses.asdict(cfg.fast).items():
        _range(v > 0, f"fast.{k}", "must be > 0")
    return cfg


def from_dict(raw: dict | None) -> ExperimentConfig:
    return validate(_merge(ExperimentConfig(), raw or {}, ""))


def env_overrides(environ=None) -> dict:
    """Nested dict from ``ADVGEN__SECTION__KEY`` variables (values parsed as YAML)."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
        d = out
        for p in parts[:-1]:
            d = d.setdefault(p, {})
        d[parts[-1]] = yaml.safe_load(text)
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def loads(text: str, environ=None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config: invalid YAML ({e})") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    return from_dict(_deep_update(raw, env_overrides(environ)))


def load_config(path=None, environ=None) -> ExperimentConfig:
    """Parse a YAML file (``None``: defaults only) plus environment overrides."""
    if path is None:
        return loads("", environ)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {p}")
    return loads(p.read_text(), environ)

