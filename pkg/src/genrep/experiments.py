"""Experiment pipelines: projection curve, distillation, label-fraction sweep, cluster purity.

Each pipeline takes a :class:`~genrep.fileio.RunConfig` and an output
directory, writes its CSV tables plus ``config.cfg`` (the resolved config)
and ``files.csv`` (the manifest of produced files), and returns the rows.
All randomness derives from the seeds in the config.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import SeededRNG
from .data import make_datasets
from .fileio import (METRICS_COLUMNS, load_tensor, save_tensor, write_csv, write_file_manifest,
                     write_metrics_csv)
from .generators import (N_CLASSES, NeuralGenerator, ProceduralGenerator,
                         distill_neural_generator, sample_latent)
from .layermatch import Backbone, LayerMatch, feature_cluster_purity
from .metrics import segmentation_metrics
from .projection import SemanticProjection, annotate, evaluate_projection_curve
from .segmentation import (PseudoLabelSegmentation, SegmentationModel, distill_from_projection,
                           label_fraction_split)

logger = logging.getLogger(__name__)

PIPELINES = ("fig3a-curve", "table1-distill", "fig5-sweep", "fig4-purity")


@dataclass(frozen=True)
class Defaults:
    """Step counts sized for one CPU core."""

    generator_steps: int = 5000
    proj_steps: int = 400
    proj_batch: int = 4
    seg_steps: int = 300
    seg_batch: int = 4
    seg_lr: float = 1e-3
    distill_steps: int = 3000
    distill_batch: int = 8
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3


DEFAULTS = Defaults()


class MissingPrerequisite(FileNotFoundError):
    """An input artifact another command should have produced is absent."""


# --- generators and saved models ---------------------------------------------

def load_generator(kind, path=None):
    if kind == "procedural":
        return ProceduralGenerator()
    if path is None or not Path(path).exists():
        raise MissingPrerequisite(f"neural generator weights not found at {path}; "
                                  "run train-generator first")
    gen = NeuralGenerator(SeededRNG(0))
    gen.load_state_vector(load_tensor(path).data)
    return gen.requires_grad_(False)


def train_generator(seed, steps=None, out_path=None):
    rng = SeededRNG(seed).spawn(601)
    gen = distill_neural_generator(ProceduralGenerator(), steps or DEFAULTS.generator_steps, rng)
    if out_path is not None:
        save_tensor(out_path, gen.state_vector())
    return gen


def save_backbone(path, backbone):
    save_tensor(path, backbone.state_vector())


def load_backbone(path):
    if not Path(path).exists():
        raise MissingPrerequisite(f"backbone file not found: {path}")
    bb = Backbone(SeededRNG(0))
    bb.load_state_vector(load_tensor(path).data)
    return bb


def save_segmenter(path, model):
    save_tensor(path, model.net_.state_vector())


def load_segmenter(path):
    if not Path(path).exists():
        raise MissingPrerequisite(f"model file not found: {path}")
    model = SegmentationModel()
    model.net_ = model._init_net()
    model.net_.load_state_vector(load_tensor(path).data)
    return model


def save_projection(path, model):
    save_tensor(path, model.decoder_.state_vector())


def load_projection(path):
    if not Path(path).exists():
        raise MissingPrerequisite(f"projection file not found: {path}")
    from .generators import ACTIVATION_SHAPES
    model = SemanticProjection()
    model.decoder_ = model._init_decoder(ACTIVATION_SHAPES)
    model.decoder_.load_state_vector(load_tensor(path).data)
    model.decoder_.eval()
    return model


def metrics_row(method, seed, fraction, m):
    iou = [m.iou[c] if c < len(m.iou) else float("nan") for c in range(N_CLASSES)]
    return [method, seed, fraction, m.pixel_accuracy, m.mean_iou] + iou


def _finish(out, files, cfg):
    out = Path(out)
    (out / "config.cfg").write_text(cfg.dump(), encoding="utf-8")
    write_file_manifest(out, [Path(f).name for f in files] + ["config.cfg"])


# --- individual steps --------------------------------------------------------

def pretrain(generator, seed, steps=None, lr=None, curve_path=None):
    est = LayerMatch(generator=generator, steps=steps or DEFAULTS.pretrain_steps,
                     lr=lr or DEFAULTS.pretrain_lr,
                     random_state=SeededRNG(seed).spawn(701).child_seed()).fit()
    if curve_path is not None:
        write_csv(curve_path, ["step", "match_loss", "rec_loss", "lr"], est.curve_, append=False)
    return est.backbone_


def train_projection_model(generator, n_annotated, seed, steps=None, batch=None):
    rng = SeededRNG(seed).spawn(801)
    phis, labels = annotate(generator, sample_latent(rng.spawn(1), n=n_annotated))
    return SemanticProjection(steps=steps or DEFAULTS.proj_steps,
                              batch_size=batch or DEFAULTS.proj_batch,
                              random_state=rng.spawn(2).child_seed()).fit(phis, labels)


def _cell_state(seed, fraction):
    # shared by every method in a (seed, fraction) cell: head init and batch order
    return SeededRNG(seed).spawn(901, int(round(fraction * 2 ** 20))).child_seed()


def run_cell(method, seed, fraction, train, steps, backbone=None, threshold=0.9, rounds=2,
             lr=None, batch=None):
    """Train one sweep cell and return the fitted model."""
    lab, unl = label_fraction_split(len(train), fraction, seed)
    kw = dict(steps=steps, lr=lr or DEFAULTS.seg_lr, batch_size=batch or DEFAULTS.seg_batch,
              random_state=_cell_state(seed, fraction))
    if method == "scratch":
        return SegmentationModel(**kw).fit(train.images[lab], train.labels[lab])
    if method == "layermatch":
        if backbone is None:
            raise MissingPrerequisite("layermatch cell needs a pretrained backbone")
        return SegmentationModel(backbone=backbone, **kw).fit(train.images[lab], train.labels[lab])
    if method == "pseudo":
        X = np.concatenate([train.images[lab], train.images[unl]])
        y = np.concatenate([train.labels[lab], np.full((len(unl),) + train.labels.shape[1:], -1)])
        return PseudoLabelSegmentation(threshold=threshold, rounds=rounds, **kw).fit(X, y)
    raise ValueError(f"unknown method {method!r}")


# --- pipelines ---------------------------------------------------------------

def run_proj_curve(cfg, out, generator):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate_projection_curve(generator, cfg.sizes, seeds=cfg.seeds,
                                     steps=cfg.get("proj_steps", DEFAULTS.proj_steps),
                                     batch_size=cfg.get("batch", DEFAULTS.proj_batch))
    cols = ["n", "seed", "accuracy", "mean_iou"]
    write_csv(out / "projection_curve.csv", cols, rows, append=False)
    summary = []
    for n in sorted({r["n"] for r in rows}):
        v = np.array([[r["accuracy"], r["mean_iou"]] for r in rows if r["n"] == n])
        summary.append([n, len(v), *v.mean(0), *v.std(0)])
    write_csv(out / "projection_summary.csv",
              ["n", "seeds", "accuracy_mean", "mean_iou_mean", "accuracy_std", "mean_iou_std"],
              summary, append=False)
    _finish(out, ["projection_curve.csv", "projection_summary.csv"], cfg)
    return rows


def run_table1(cfg, out, generator):
    """Direct training on n labelled real images vs. distillation from a projection."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.n_annotated
    rows = []
    for seed in cfg.seeds:
        data = make_datasets(seed, generator)
        test = data["real-test"]
        proj = train_projection_model(generator, n, seed, cfg.get("proj_steps"))
        distilled = distill_from_projection(
            generator, proj, cfg.n_synthetic, SeededRNG(seed).spawn(1001),
            steps=cfg.get("distill_steps", DEFAULTS.distill_steps),
            batch_size=cfg.get("batch", DEFAULTS.distill_batch), lr=cfg.get("lr", DEFAULTS.seg_lr))
        train = data["train"]
        # same schedule as distillation so the two differ only in their training data
        direct = SegmentationModel(steps=cfg.get("distill_steps", DEFAULTS.distill_steps),
                                   batch_size=cfg.get("batch", DEFAULTS.distill_batch),
                                   lr=cfg.get("lr", DEFAULTS.seg_lr),
                                   random_state=SeededRNG(seed).spawn(1002).child_seed())
        direct.fit(train.images[:n], train.labels[:n])
        fraction = n / len(train)
        for method, model in (("direct", direct), ("distill", distilled)):
            m = segmentation_metrics(model.predict(test.images), test.labels, N_CLASSES)
            rows.append(metrics_row(method, seed, fraction, m))
    rows.sort(key=lambda r: (r[0], r[2], r[1]))
    write_metrics_csv(out / "metrics.csv", rows, append=False)
    _finish(out, ["metrics.csv"], cfg)
    return rows


def _sweep_cell(args):
    method, seed, fraction, steps, backbone_vec, threshold, rounds, lr, batch, gen_kind = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    data = make_datasets(seed, ProceduralGenerator(), synthetic_test=1)
    train, test = data["train"], data["real-test"]
    backbone = None
    if backbone_vec is not None:
        backbone = Backbone(SeededRNG(0))
        backbone.load_state_vector(backbone_vec)
    model = run_cell(method, seed, fraction, train, steps, backbone, threshold, rounds, lr, batch)
    m = segmentation_metrics(model.predict(test.images), test.labels, N_CLASSES)
    extra = getattr(model, "retained_fraction_", None)
    return metrics_row(method, seed, fraction, m), extra


def run_sweep(cfg, out, generator, threads=None, backbones=None):
    """Methods x fractions x seeds on the real split; one metrics row per cell."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    steps = cfg.get("steps", DEFAULTS.seg_steps)
    backbones = dict(backbones or {})
    files = []
    if "layermatch" in cfg.methods:
        for seed in cfg.seeds:
            if seed not in backbones:
                curve = out / f"layermatch_curve_seed{seed}.csv"
                backbones[seed] = pretrain(generator, seed, cfg.get("pretrain_steps"),
                                           curve_path=curve)
                files.append(curve.name)
    jobs = [(method, seed, fraction, steps,
             backbones[seed].state_vector() if method == "layermatch" else None,
             cfg.threshold, cfg.rounds, cfg.get("lr"), cfg.get("batch"), cfg.generator)
            for method in cfg.methods for fraction in cfg.fractions for seed in cfg.seeds]
    threads = max(1, int(threads or os.environ.get("GENREP_THREADS", "1")))
    if threads == 1:
        results = [_sweep_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    rows = sorted((r for r, _ in results), key=lambda r: (r[0], r[2], r[1]))
    write_metrics_csv(out / "metrics.csv", rows, append=False)
    retained = [[j[0], j[1], j[2], i + 1, f] for j, (_, ex) in zip(jobs, results) if ex
                for i, f in enumerate(ex)]
    write_csv(out / "pseudo_retained.csv", ["method", "seed", "fraction", "round", "retained"],
              sorted(retained, key=lambda r: (r[2], r[1], r[3])), append=False)
    files += ["metrics.csv", "pseudo_retained.csv"]
    _finish(out, files, cfg)
    return rows


def run_purity(cfg, out, generator, backbones=None):
    """Cluster purity of pretrained vs. random-init backbone features per seed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    backbones = dict(backbones or {})
    rows = []
    for seed in cfg.seeds:
        rng = SeededRNG(seed).spawn(1101)
        latents = sample_latent(rng.spawn(1), n=cfg.n_images)
        images, _ = generator.generate(latents)
        from .generators import labels_for_latents
        labels = labels_for_latents(latents)
        pretrained = backbones.get(seed)
        if pretrained is None:
            pretrained = pretrain(generator, seed, cfg.get("pretrain_steps"))
        random_bb = Backbone(SeededRNG(seed).spawn(1102))
        scores = [feature_cluster_purity(bb, images.data, labels, N_CLASSES,
                                         cfg.pixels_per_image, rng.spawn(2))
                  for bb in (pretrained, random_bb)]
        prior = np.bincount(labels.ravel(), minlength=N_CLASSES).max() / labels.size
        rows.append([seed, scores[0], scores[1], prior])
    write_csv(out / "purity.csv", ["seed", "pretrained", "random", "majority_prior"], rows,
              append=False)
    _finish(out, ["purity.csv"], cfg)
    return rows


def run_pipeline(name, cfg, out, generator=None):
    generator = generator if generator is not None else ProceduralGenerator()
    if name == "fig3a-curve":
        return run_proj_curve(cfg, out, generator)
    if name == "table1-distill":
        return run_table1(cfg, out, generator)
    if name == "fig5-sweep":
        return run_sweep(cfg, out, generator)
    if name == "fig4-purity":
        return run_purity(cfg, out, generator)
    raise ValueError(f"unknown pipeline {name!r}; expected one of {PIPELINES}")


__all__ = ["DEFAULTS", "Defaults", "METRICS_COLUMNS", "MissingPrerequisite", "PIPELINES",
           "load_backbone", "load_generator", "load_projection", "load_segmenter", "metrics_row",
           "pretrain", "run_cell", "run_pipeline", "run_proj_curve", "run_purity", "run_sweep",
           "run_table1", "save_backbone", "save_projection", "save_segmenter",
           "train_generator", "train_projection_model"]
