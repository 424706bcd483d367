"""Command-line interface: ``advgen <subcommand>``.

Every subcommand writes into a fresh ``runs/<stamp>-<hash>`` directory and
reads upstream artifacts from the run directories passed with ``--from``.
Exit codes: 0 ok, 3 config, 4 data, 5 dependency, 6 integrity.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline as P
from .channel import apply_channel
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, DatasetManifest
from .image import ImageDecodeError, load_image, save_image
from .labels import SPOOF
from .metrics import AttackReport, markdown_table, parse_records_csv, render_report
from .models import IntegrityError, UntrainedModelError

EXIT_CODES = {ConfigError: 3, DataError: 4, ImageDecodeError: 4, P.DependencyError: 5,
              UntrainedModelError: 5, IntegrityError: 6}
CATEGORY = {3: "config", 4: "data", 5: "dependency", 6: "integrity"}


def _categorized(fn):
    @functools.wraps(fn)
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except tuple(EXIT_CODES) as e:
            code = next(c for t, c in EXIT_CODES.items() if isinstance(e, t))
            click.echo(f"{CATEGORY[code]} error: {e}", err=True)
            sys.exit(code)
    return wrapper


def _load(ctx) -> ExperimentConfig:
    o = ctx.obj
    cfg = load_config(o["config"])
    if o["seed"] is not None:
        cfg = cfg.with_overrides(seed=o["seed"])
    if o["fast"]:
        cfg = cfg.with_fast()
    return cfg


def _start(ctx):
    cfg = _load(ctx)
    P.set_determinism(cfg.seed)
    run = P.RunDir.create(ctx.obj["runs"], cfg)
    click.echo(f"run directory: {run.root}")
    return cfg, run


from_option = click.option("--from", "sources", multiple=True, type=click.Path(exists=True, file_okay=False),
                           help="Run directory holding upstream artifacts (repeatable; later wins).")


@click.group()
@click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML experiment config.")
@click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
@click.option("--fast", is_flag=True, help="Reduced toy training budgets.")
@click.option("--runs", type=click.Path(file_okay=False), default="runs", show_default=True)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, seed, fast, runs, verbose):
    """Physical adversarial attacks on face presentation attack detection (toy scale)."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = {"config": config, "seed": seed, "fast": fast, "runs": runs}


@main.command("gen-data")
@click.pass_context
@_categorized
def gen_data(ctx):
    """Render the synthetic live/spoof dataset and its identity-disjoint splits."""
    cfg, run = _start(ctx)
    splits = P.generate_data(cfg, run.data)
    click.echo(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


def _splits(sources):
    return P.load_splits(P.find_data(sources))


@main.command("train-pad")
@from_option
@click.pass_context
@_categorized
def train_pad_cmd(ctx, sources):
    cfg, run = _start(ctx)
    pad, info = P.train_pad_stage(cfg, _splits(sources))
    P.save_models(run, {"pad": pad})
    click.echo(f"test accuracy {info['test_accuracy']:.4f}")


@main.command("train-embedder")
@from_option
@click.pass_context
@_categorized
def train_embedder_cmd(ctx, sources):
    cfg, run = _start(ctx)
    P.save_models(run, {"embedder": P.train_embedder_stage(cfg, _splits(sources))})


@main.command("train-decomposer")
@from_option
@click.pass_context
@_categorized
def train_decomposer_cmd(ctx, sources):
    cfg, run = _start(ctx)
    dec, info = P.train_decomposer_stage(cfg, _splits(sources))
    P.save_models(run, {"decomposer": dec})
    click.echo(f"noise error {info['init_noise_error']:.3f} -> {info['final_noise_error']:.3f}")


@main.command("train-idgan")
@from_option
@click.pass_context
@_categorized
def train_idgan_cmd(ctx, sources):
    cfg, run = _start(ctx)
    deps = P.load_dependencies(sources, need=("embedder",))
    P.save_models(run, {"idgan": P.train_idgan_stage(cfg, _splits(sources), deps["embedder"], run.logs / "idgan.csv")})


@main.command("train-advgen")
@from_option
@click.pass_context
@_categorized
def train_advgen_cmd(ctx, sources):
    cfg, run = _start(ctx)
    deps = P.load_dependencies(sources)
    bundle = P.train_advgen_stage(cfg, _splits(sources), deps, run.logs / "advgen.csv")
    P.save_models(run, {"advgen": bundle})


@main.command("attack")
@from_option
@click.option("--method", type=click.Choice(["fgsm", "bim", "pgd", "cw", "advgen"]), required=True)
@click.pass_context
@_categorized
def attack_cmd(ctx, sources, method):
    """Attack every test spoof; PNGs and JSON sidecars go to images/<method>/."""
    cfg, run = _start(ctx)
    need = ("pad", "embedder", "decomposer", "idgan") if method == "advgen" else ("pad",)
    deps = P.load_dependencies(sources, need=need)
    bundle = P.load_advgen(sources, deps) if method == "advgen" else None
    spoofs = _splits(sources)["test"].select(liveness=SPOOF)
    adv = P.generate_attack(cfg, method, spoofs.load_batch(), deps["pad"], bundle)
    paths = P.write_attack_images(cfg, method, adv, spoofs, run.images)
    click.echo(f"wrote {len(paths)} images")


@main.command("evaluate")
@from_option
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.pass_context
@_categorized
def evaluate_cmd(ctx, sources, workers):
    """Digital and physical evaluation of every attack found under --from."""
    cfg, run = _start(ctx)
    deps = P.load_dependencies(sources, need=("pad", "embedder"))
    data_dir = P.find_data(sources)
    report, robust = AttackReport(), {}
    for method in cfg.eval.methods:
        img_root = next((Path(s) / "images" for s in reversed(sources) if (Path(s) / "images" / method).is_dir()), None)
        if img_root is None:
            continue
        adv, sidecars = P.read_attack_images(img_root, method)
        r, robust[method] = P.evaluate_method(cfg, method, adv, sidecars, data_dir, deps["pad"], deps["embedder"], workers)
        report = report.merge(r)
    if not report.records:
        raise P.DependencyError("no attack images found; run `advgen attack` first")
    report.env = {"seed": cfg.seed, "config_hash": cfg.hash(), "model_hashes": {"pad": deps["pad"].param_hash()}}
    render_report(report, run.reports, robust)
    click.echo(markdown_table(report, robust))


@main.command("report")
@click.argument("dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--force", is_flag=True, help="Aggregate artifacts even if their config hashes differ.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@_categorized
def report_cmd(dirs, force, out):
    """Merge the record CSVs of several runs into one report."""
    P.check_report_hashes(dirs, force)
    records, env = [], {"sources": [str(d) for d in dirs]}
    for d in dirs:
        for csv_path in sorted(Path(d).rglob("report.csv")):
            records += parse_records_csv(csv_path.read_text())
    if not records:
        raise DataError("no report.csv found")
    report = AttackReport(records, env)
    if out:
        render_report(report, out)
    click.echo(markdown_table(report))


@main.command("reproduce-all")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--no-ablations", is_flag=True, help="Skip the three loss-term ablation runs.")
@click.pass_context
@_categorized
def reproduce_all_cmd(ctx, workers, no_ablations):
    """Data, all training stages, attacks, evaluation, ablations and reports."""
    cfg = _load(ctx)
    run = P.reproduce_all(cfg, ctx.obj["runs"], workers, ablations=not no_ablations)
    click.echo(f"run directory: {run.root}")
    click.echo((run.reports / "report.md").read_text())


@main.command("channel")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--medium", type=click.Choice(["print", "replay"]), default="print", show_default=True)
@click.pass_context
@_categorized
def channel_cmd(ctx, image, output, medium):
    """Preview the print/replay recapture channel on one image."""
    cfg = _load(ctx)
    out = apply_channel(load_image(image), cfg.channel_config(medium), np.random.default_rng(cfg.seed))
    save_image(out, output)


if __name__ == "__main__":
    main()
