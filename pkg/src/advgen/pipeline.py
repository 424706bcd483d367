"""Stage functions shared by the CLI and the end-to-end toy reproduction."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adversarial import AdvgenBundle, AdvgenConfig, attack, train_advgen
from .baselines import CwParams, bim, cw, fgsm, pgd
from .config import ExperimentConfig
from .data import DataError, DatasetManifest, generate_toy_dataset, split_by_identity
from .idgan import IdganBundle, IdganConfig, train_idgan
from .image import ImageTensor, load_image, save_image
from .labels import LIVE, SPOOF
from .metrics import (AttackReport, asr, evaluate_pipeline, geometric_robustness_report, live_predictions,
                      physical_batch, render_report)
from .models import IntegrityError, ModelHandle, UntrainedModelError, build_pad, cosine
from .training import TrainConfig, pad_accuracy, labeled_tensors, train_decomposer, train_embedder, train_pad
from .transforms import Transform

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ABLATIONS = {"no_identity": "lambda_identity", "no_phy": "lambda_phy", "no_geom": "lambda_geom"}


class DependencyError(RuntimeError):
    """A required upstream artifact is missing or untrained."""


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def set_determinism(seed: int):
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)


@dataclass(frozen=True)
class RunDir:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @classmethod
    def create(cls, base, cfg: ExperimentConfig) -> "RunDir":
        """A fresh ``<base>/<stamp>-<hash>`` directory; never reuses an existing one."""
        base = Path(base)
        stem = f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.hash()[:12]}"
        root, k = base / stem, 1
        while root.exists():
            root, k = base / f"{stem}.{k}", k + 1
        for sub in ("checkpoints", "images", "reports", "logs"):
            (root / sub).mkdir(parents=True)
        (root / "config.yaml").write_text(cfg.dumps())
        return cls(root)


def find_artifact(sources, name: str, stage: str) -> Path:
    """Latest ``checkpoints/<name>`` among run dirs ``sources``; DependencyError names the stage."""
    for src in reversed([Path(s) for s in sources]):
        for cand in (src / "checkpoints" / name, src / name):
            if cand.exists():
                return cand
    raise DependencyError(f"missing {stage} artifact {name!r}; run `advgen {stage}` first")


def find_data(sources) -> Path:
    for src in reversed([Path(s) for s in sources]):
        for cand in (src / "data", src):
            if (cand / "manifest_all.csv").is_file():
                return cand
    raise DependencyError("missing dataset; run `advgen gen-data` first")


def _tag(handle: ModelHandle, cfg: ExperimentConfig):
    handle.meta["config_hash"] = cfg.hash()
    return handle


# ---- data -------------------------------------------------------------------

def generate_data(cfg: ExperimentConfig, root) -> dict:
    d = cfg.data
    manifest = generate_toy_dataset(d.n_identities, d.per_identity, d.image_size, cfg.seed, root,
                                    channels=cfg.channels())
    return write_splits(cfg, manifest)


def write_splits(cfg: ExperimentConfig, manifest: DatasetManifest) -> dict:
    parts = split_by_identity(manifest, tuple(cfg.data.split), stage_seed(cfg.seed, "split"))
    for name, m in zip(SPLITS, parts):
        m.write(Path(manifest.root) / f"manifest_{name}.csv")
    return dict(zip(SPLITS, parts))


def load_splits(data_dir) -> dict:
    data_dir = Path(data_dir)
    out = {}
    for name in SPLITS:
        path = data_dir / f"manifest_{name}.csv"
        if not path.is_file():
            raise DataError(f"missing split manifest {path}")
        out[name] = DatasetManifest.read(path)
    return out


# ---- training stages ----------------------------------------------------------

def _train_cfg(section, seed: int, stage: str) -> TrainConfig:
    return TrainConfig(epochs=section.epochs, lr=section.lr, batch_size=section.batch_size,
                       seed=stage_seed(seed, stage), augment=section.augment)


def train_pad_stage(cfg: ExperimentConfig, splits: dict):
    pad, info = train_pad(build_pad(cfg.models.pad_arch, cfg.data.image_size), splits["train"], splits["val"],
                          _train_cfg(cfg.pad, cfg.seed, "pad"))
    x, y = labeled_tensors(splits["test"])
    info["test_accuracy"] = pad_accuracy(pad, x, y)
    return _tag(pad, cfg), info


def train_embedder_stage(cfg: ExperimentConfig, splits: dict):
    return _tag(train_embedder(splits["train"], _train_cfg(cfg.embedder, cfg.seed, "embedder")), cfg)


def train_decomposer_stage(cfg: ExperimentConfig, splits: dict):
    dec, info = train_decomposer(splits["train"], _train_cfg(cfg.decomposer, cfg.seed, "decomposer"))
    return _tag(dec, cfg), info


def train_idgan_stage(cfg: ExperimentConfig, splits: dict, embedder: ModelHandle, csv_path=None) -> IdganBundle:
    g = cfg.idgan
    icfg = IdganConfig(epochs=g.epochs, lr=g.lr, betas=tuple(g.betas), batch_size=g.batch_size,
                       lambda_cycle=g.lambda_cycle, lambda_id=g.lambda_id, adv_mode=g.adv_mode,
                       one_way_id=g.one_way_id, augment=g.augment, input_noise=g.input_noise,
                       seed=stage_seed(cfg.seed, "idgan"))
    bundle, _ = train_idgan(splits["train"].select(liveness=LIVE), splits["train"].select(liveness=SPOOF),
                            embedder, icfg, csv_path)
    for h in bundle.handles().values():
        _tag(h, cfg)
    bundle.meta["config_hash"] = cfg.hash()
    return bundle


def advgen_bundle_kwargs(cfg: ExperimentConfig) -> dict:
    a = cfg.advgen
    return dict(eps1=a.eps1, eps2=a.eps2, lambda_phy=a.lambda_phy, lambda_geom=a.lambda_geom,
                lambda_identity=a.lambda_identity, lambda_gan=a.lambda_gan,
                lambda_attack=0.0 if a.strict_eq12 else a.lambda_attack, hinge_form=a.hinge_form,
                hinge_per_pixel=a.hinge_per_pixel, phy_source=a.phy_source, geom_source=a.geom_source,
                eot_samples=a.eot_samples, dist=cfg.distribution("transforms"),
                recapture=cfg.distribution("recapture"))


def train_advgen_stage(cfg: ExperimentConfig, splits: dict, deps: dict, csv_path=None) -> AdvgenBundle:
    a = cfg.advgen
    acfg = AdvgenConfig(epochs=a.epochs, lr=a.lr, betas=tuple(a.betas), batch_size=a.batch_size,
                        noise_gain=a.noise_gain, simulated_inputs=a.simulated_inputs, residual_cap=a.residual_cap,
                        seed=stage_seed(cfg.seed, "advgen"))
    bundle, _ = train_advgen(splits["train"].select(liveness=SPOOF), deps["decomposer"], deps["embedder"],
                             deps["pad"], deps["idgan"], acfg, csv_path, lives=splits["train"].select(liveness=LIVE),
                             **advgen_bundle_kwargs(cfg))
    _tag(bundle.generator, cfg)
    bundle.meta["config_hash"] = cfg.hash()
    return bundle


def save_models(run: RunDir, models: dict):
    for name, obj in models.items():
        if isinstance(obj, IdganBundle):
            obj.save(run.checkpoints / "idgan")
        elif isinstance(obj, AdvgenBundle):
            obj.save(run.checkpoints / "advgen")
        else:
            obj.save(run.checkpoints / f"{name}.pt")


def load_model(sources, name: str, stage: str, arch: str | None = None) -> ModelHandle:
    handle = ModelHandle.load(find_artifact(sources, f"{name}.pt", stage), arch)
    if not handle.trained:
        raise DependencyError(f"{name} checkpoint is untrained")
    return handle


def load_idgan(sources) -> IdganBundle:
    bundle = IdganBundle.load(find_artifact(sources, "idgan", "train-idgan"))
    if not bundle.trained:
        raise DependencyError("IdGAN checkpoint is untrained")
    return bundle


def load_dependencies(sources, need=("pad", "embedder", "decomposer", "idgan")) -> dict:
    stages = {"pad": "train-pad", "embedder": "train-embedder", "decomposer": "train-decomposer"}
    out = {}
    for name in need:
        out[name] = load_idgan(sources) if name == "idgan" else load_model(sources, name, stages[name])
    return out


def load_advgen(sources, deps: dict) -> AdvgenBundle:
    path = find_artifact(sources, "advgen", "train-advgen")
    try:
        return AdvgenBundle.load(path, deps["decomposer"], deps["embedder"], deps["pad"], deps["idgan"])
    except UntrainedModelError as e:
        raise DependencyError(str(e)) from None


# ---- attacks and evaluation -----------------------------------------------------

def generate_attack(cfg: ExperimentConfig, method: str, x: torch.Tensor, pad, bundle=None) -> torch.Tensor:
    e = cfg.eval
    if method == "fgsm":
        return fgsm(pad, x, LIVE, e.baseline_eps)
    if method == "bim":
        return bim(pad, x, LIVE, e.baseline_eps, e.baseline_steps)
    if method == "pgd":
        return pgd(pad, x, LIVE, e.baseline_eps, e.baseline_steps, rng=np.random.default_rng(stage_seed(cfg.seed, "pgd")))
    if method == "cw":
        params = CwParams(confidence=e.cw_confidence, iterations=e.cw_iterations, search_steps=e.cw_search_steps)
        return cw(pad, x, LIVE, params)[0]
    if method == "advgen":
        if bundle is None:
            raise DependencyError("advgen attacks need a trained AdvGen bundle")
        return attack(bundle, x, cfg.advgen.fgsm_eps, cfg.advgen.iters, pad)
    raise ValueError(f"unknown method {method!r}")


def write_attack_images(cfg: ExperimentConfig, method: str, adv: torch.Tensor, manifest: DatasetManifest, out_dir) -> list:
    """PNG per adversarial image plus a JSON sidecar; returns the written paths."""
    out_dir = Path(out_dir) / method
    paths = []
    budget = ({"norm": "inf", "epsilon": cfg.advgen.fgsm_eps, "iters": cfg.advgen.iters} if method == "advgen"
              else {"norm": "inf" if method != "cw" else "2", "epsilon": cfg.eval.baseline_eps})
    for img, entry in zip(adv, manifest.entries):
        path = out_dir / Path(entry.path).name.replace(".png", f"_{method}.png")
        save_image(ImageTensor.from_torch(img[None]), path)
        sidecar = {"source": entry.path, "identity": entry.identity, "medium": entry.medium, "method": method,
                   "seed": cfg.seed, "config_hash": cfg.hash(), "budget": budget}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
        paths.append(path)
    return paths


def read_attack_images(directory, method: str):
    """(images, sidecars) for one method directory, in sorted file order."""
    directory = Path(directory) / method
    pngs = sorted(directory.glob("*.png"))
    if not pngs:
        raise DataError(f"no {method} images under {directory}")
    sidecars = []
    for p in pngs:
        side = p.with_suffix(".json")
        if not side.is_file():
            raise DataError(f"missing sidecar for {p}")
        sidecars.append(json.loads(side.read_text()))
    return torch.cat([load_image(p).to_torch() for p in pngs]), sidecars


def source_tensors(data_dir, sidecars):
    """Source spoofs and their paired live faces for a list of sidecars."""
    data_dir = Path(data_dir)
    srcs = torch.cat([load_image(data_dir / s["source"]).to_torch() for s in sidecars])
    lives = []
    for s in sidecars:
        live = data_dir / "live" / Path(s["source"]).name.replace(f"_{s['medium']}.png", ".png")
        lives.append(load_image(live).to_torch() if live.is_file() else None)
    return srcs, (torch.cat(lives) if all(v is not None for v in lives) else None)


def robustness_cases(cfg: ExperimentConfig) -> dict:
    e = cfg.eval
    p = e.perspective
    return {
        "rotation": Transform.of(rotation=e.rotation_deg),
        "perspective": Transform.of(perspective=(p, 0.0, -p, 0.0, 0.0, 0.0, 0.0, 0.0)),
        "fold": Transform.of(horizontal_fold_shade=(0.0, e.fold_strength)),
        "brightness": Transform.of(brightness=e.brightness),
    }


def evaluate_method(cfg: ExperimentConfig, method: str, adv, sidecars, data_dir, pad, embedder, workers: int = 1):
    """(AttackReport over the configured modes, robustness row)."""
    srcs, lives = source_tensors(data_dir, sidecars)
    paths = [s["source"] for s in sidecars]
    media = [s["medium"] for s in sidecars]
    report = AttackReport()
    for mode in cfg.eval.modes:
        rng = np.random.default_rng(stage_seed(cfg.seed, f"eval-{mode}"))
        report = report.merge(evaluate_pipeline(adv, pad, mode, cfg.channels(), rng, sources=srcs, paths=paths,
                                                media=media, method=method, embedder=embedder, lives=lives,
                                                ssim_mode=cfg.eval.ssim_mode, workers=workers))
    rows = geometric_robustness_report(adv, pad, robustness_cases(cfg), cfg.channels(), media,
                                       np.random.default_rng(stage_seed(cfg.seed, "robustness")), workers)
    return report, {r["case"]: r["asr"] for r in rows}


def calibration(cfg: ExperimentConfig, splits: dict, pad, report: AttackReport | None = None) -> dict:
    """Channel calibration targets: clean lives stay live, FGSM mostly dies in recapture."""
    test = splits["test"]
    lives = test.select(liveness=LIVE)
    x = lives.load_batch()
    clean_live = float(live_predictions(pad, x).double().mean()) * 100
    media = ["print" if i % 2 == 0 else "replay" for i in range(len(x))]
    rec = physical_batch(x, media, cfg.channels(), np.random.default_rng(stage_seed(cfg.seed, "calibration")))
    out = {"clean_live_accuracy": clean_live,
           "recaptured_live_flagged": 100 - float(live_predictions(pad, rec).double().mean()) * 100}
    if report is not None and report.select("fgsm", "physical"):
        out["fgsm_physical_asr"] = report.asr("fgsm", "physical")
        out["ok"] = clean_live >= 90 and out["fgsm_physical_asr"] < 50
    return out


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def ablation_row(cfg, arm, bundle, pad, embedder, test_spoofs: DatasetManifest):
    x = test_spoofs.load_batch()
    adv = attack(bundle, x, cfg.advgen.fgsm_eps, cfg.advgen.iters, pad)
    media = [e.medium for e in test_spoofs.entries]
    with torch.no_grad():
        idc = float(cosine(embedder, x, adv).double().mean())
    dig = live_predictions(pad, adv)
    phys = live_predictions(pad, physical_batch(adv, media, cfg.channels(),
                                                np.random.default_rng(stage_seed(cfg.seed, "eval-physical"))))
    rot = geometric_robustness_report(adv, pad, {"rotation": robustness_cases(cfg)["rotation"]}, cfg.channels(),
                                      media, np.random.default_rng(stage_seed(cfg.seed, "robustness")))[0]["asr"]
    return [arm, repr(idc), repr(asr(int(dig.sum()), len(dig))), repr(asr(int(phys.sum()), len(phys))), repr(rot)]


ABLATION_FIELDS = ("arm", "identity_cos", "asr_digital", "asr_physical", "asr_rotation")


def reproduce_all(cfg: ExperimentConfig, base_dir="runs", workers: int = 1, ablations: bool = True) -> RunDir:
    """Data, every training stage, all attacks, evaluation, ablations and reports in one run dir."""
    set_determinism(cfg.seed)
    run = RunDir.create(base_dir, cfg)
    fh = logging.FileHandler(run.logs / "pipeline.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger("advgen").addHandler(fh)
    timings = {}

    def timed(name, fn, *a, **kw):
        t = time.perf_counter()
        out = fn(*a, **kw)
        timings[name] = round(time.perf_counter() - t, 2)
        log.info("stage %s done in %.1fs", name, timings[name])
        return out

    try:
        splits = timed("gen-data", generate_data, cfg, run.data)
        pad, pad_info = timed("train-pad", train_pad_stage, cfg, splits)
        embedder = timed("train-embedder", train_embedder_stage, cfg, splits)
        decomposer, dec_info = timed("train-decomposer", train_decomposer_stage, cfg, splits)
        idgan = timed("train-idgan", train_idgan_stage, cfg, splits, embedder, run.logs / "idgan.csv")
        deps = {"pad": pad, "embedder": embedder, "decomposer": decomposer, "idgan": idgan}
        bundle = timed("train-advgen", train_advgen_stage, cfg, splits, deps, run.logs / "advgen.csv")
        save_models(run, {**deps, "advgen": bundle})

        test_spoofs = splits["test"].select(liveness=SPOOF)
        x = test_spoofs.load_batch()
        report, robust = AttackReport(), {}
        for method in cfg.eval.methods:
            adv = timed(f"attack-{method}", generate_attack, cfg, method, x, pad, bundle)
            write_attack_images(cfg, method, adv, test_spoofs, run.images)
            adv, sidecars = read_attack_images(run.images, method)
            r, robust[method] = timed(f"evaluate-{method}", evaluate_method, cfg, method, adv, sidecars,
                                      run.data, pad, embedder, workers)
            report = report.merge(r)
        report.env = {"seed": cfg.seed, "config_hash": cfg.hash(),
                      "model_hashes": {k: v for k, v in sorted(bundle.frozen_hashes().items())}
                      | {"advgen_generator": bundle.generator.param_hash()}}
        render_report(report, run.reports, robust)
        cases = list(robustness_cases(cfg))
        (run.reports / "robustness.csv").write_text(
            _csv_text(("method",) + tuple(cases), [[m] + [repr(robust[m][c]) for c in cases] for m in robust]))
        calib = calibration(cfg, splits, pad, report)
        calib.update(pad_test_accuracy=pad_info["test_accuracy"], decomposer=dec_info)
        (run.reports / "calibration.json").write_text(json.dumps(calib, sort_keys=True, indent=1) + "\n")

        if ablations:
            rows = [ablation_row(cfg, "full", bundle, pad, embedder, test_spoofs)]
            for arm, key in ABLATIONS.items():
                acfg = cfg.with_overrides(**{f"advgen.{key}": 0.0})
                b = timed(f"ablation-{arm}", train_advgen_stage, acfg, splits, deps, run.logs / f"advgen_{arm}.csv")
                rows.append(ablation_row(cfg, arm, b, pad, embedder, test_spoofs))
            (run.reports / "ablation.csv").write_text(_csv_text(ABLATION_FIELDS, rows))
    finally:
        (run.logs / "timings.json").write_text(json.dumps(timings, indent=1) + "\n")
        logging.getLogger("advgen").removeHandler(fh)
        fh.close()
    return run


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_report_hashes(dirs, force: bool = False) -> str:
    """Config hash shared by every sidecar and summary under ``dirs``."""
    seen = {}
    for d in dirs:
        for p in sorted(Path(d).rglob("*.json")):
            try:
                blob = json.loads(p.read_text())
            except json.JSONDecodeError:
                continue
            h = blob.get("config_hash") or blob.get("env", {}).get("config_hash")
            if h:
                seen.setdefault(h, p)
    if len(seen) > 1 and not force:
        raise IntegrityError(f"artifacts from different configs: {sorted(seen)}; pass --force to aggregate anyway")
    return next(iter(seen), "")
