"""Command-line entry point: ``genrep <subcommand> --config run.cfg [--seed S --out DIR]``.

Exit codes: 0 success, 2 missing prerequisite, 3 config error, 4 numeric
divergence.  Failures print one line ``error: <category>: <detail>`` to stderr.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

# single-threaded BLAS keeps runs bit-reproducible; set before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

EXIT_MISSING, EXIT_CONFIG, EXIT_DIVERGED = 2, 3, 4


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def _common(p):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (or file where noted)")
    p.add_argument("--generator", choices=("procedural", "neural"))
    p.add_argument("--generator-file", help="neural generator weights (GRT1)")
    p.add_argument("--steps", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="genrep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="export train / real-test / synthetic-test splits")
    _common(p)
    p = sub.add_parser("train-generator", help="distill the neural generator")
    _common(p)
    p = sub.add_parser("train-proj", help="train a semantic projection on N annotated samples")
    _common(p)
    p.add_argument("--n-annotated", type=int)
    p = sub.add_parser("proj-curve", help="projection IoU vs. number of annotated samples")
    _common(p)
    p = sub.add_parser("distill", help="segmenter trained on projected synthetic labels")
    _common(p)
    p.add_argument("--projection", help="projection weights from train-proj")
    p.add_argument("--n-synthetic", type=int)
    p.add_argument("--literal", action="store_true",
                   help="train on generator activations instead of images")
    p = sub.add_parser("pretrain", help="LayerMatch backbone pretraining (--out backbone.grt)")
    _common(p)
    p = sub.add_parser("finetune", help="fine-tune a backbone on a labelled fraction")
    _common(p)
    p.add_argument("--backbone", help="backbone weights; omit with --random-init")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--fraction", type=float, default=1 / 64)
    p = sub.add_parser("pseudo-label", help="pseudo-labelling baseline on a labelled fraction")
    _common(p)
    p.add_argument("--fraction", type=float, default=1 / 64)
    p = sub.add_parser("eval", help="evaluate a saved segmenter (--out metrics.csv)")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("test", "real-test", "synthetic-test"))
    p.add_argument("--method", default="model")
    p.add_argument("--fraction", type=float, default=float("nan"))
    p = sub.add_parser("sweep", help="methods x label fractions x seeds")
    _common(p)
    p = sub.add_parser("purity", help="k-means purity of pretrained vs. random backbones")
    _common(p)
    p = sub.add_parser("plot", help="render a CSV as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", required=True, choices=("curve", "bars"))
    p.add_argument("--out", required=True)
    return parser


def _resolve(args):
    from .fileio import load_config
    cfg = load_config(args.config)
    over = {"seed": args.seed, "generator": args.generator, "steps": args.steps}
    if getattr(args, "n_annotated", None) is not None:
        over["n_annotated"] = args.n_annotated
    if getattr(args, "n_synthetic", None) is not None:
        over["n_synthetic"] = args.n_synthetic
    return cfg.override(**over)


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _generator(cfg, args):
    from .experiments import load_generator
    path = args.generator_file
    if cfg.generator == "neural" and path is None:
        path = Path(args.out or ".") / "generator.grt"
    return load_generator(cfg.generator, path)


def _finish(out, files, cfg):
    from .experiments import _finish as finish
    finish(out, files, cfg)


def _seg_kwargs(cfg):
    from .experiments import DEFAULTS
    return dict(steps=cfg.get("steps", DEFAULTS.seg_steps), lr=cfg.get("lr"),
                batch=cfg.get("batch"))


def cmd_gen_data(args, cfg):
    from .data import make_datasets
    from .fileio import export_dataset
    gen = _generator(cfg, args)
    out = _out(args, "data")
    splits = make_datasets(cfg.seed, gen)
    payload = {}
    for name, s in splits.items():
        entry = {"images": s.images, "labels": s.labels, "latents": s.latents}
        if name == "synthetic-test":
            _, phis = gen.generate(s.latents)
            entry["activations"] = [p.data for p in phis]
        payload[name] = entry
    export_dataset(out, payload, cfg.seed, cfg.generator)
    (out / "config.cfg").write_text(cfg.dump(), encoding="utf-8")


def cmd_train_generator(args, cfg):
    from .experiments import train_generator
    from .fileio import write_csv
    from .generators import ProceduralGenerator, image_mse, sample_latent
    from .autodiff import SeededRNG
    out = _out(args, ".")
    gen = train_generator(cfg.seed, cfg.get("generator_steps", cfg.get("steps")),
                          out / "generator.grt")
    held_out = sample_latent(SeededRNG(cfg.seed).spawn(602), n=64)
    write_csv(out / "generator_eval.csv", ["seed", "heldout_image_mse"],
              [[cfg.seed, image_mse(gen, ProceduralGenerator(), held_out)]], append=False)
    _finish(out, ["generator.grt", "generator_eval.csv"], cfg)


def cmd_train_proj(args, cfg):
    from .data import make_datasets
    from .experiments import save_projection, train_projection_model
    from .fileio import write_csv
    from .metrics import segmentation_metrics
    from .projection import annotate
    gen = _generator(cfg, args)
    out = _out(args, ".")
    model = train_projection_model(gen, cfg.n_annotated, cfg.seed, cfg.get("proj_steps", cfg.get("steps")),
                                   cfg.get("batch"))
    save_projection(out / "projection.grt", model)
    test = make_datasets(cfg.seed, gen, train=1, real_test=1)["synthetic-test"]
    phis, labels = annotate(gen, test.latents)
    m = segmentation_metrics(model.predict(phis), labels, model.n_classes)
    write_csv(out / "projection_eval.csv", ["n", "seed", "accuracy", "mean_iou"],
              [[cfg.n_annotated, cfg.seed, m.pixel_accuracy, m.mean_iou]], append=False)
    _finish(out, ["projection.grt", "projection_eval.csv"], cfg)


def cmd_proj_curve(args, cfg):
    from .experiments import run_proj_curve
    run_proj_curve(cfg.override(proj_steps=cfg.get("proj_steps", args.steps)),
                   _out(args, "."), _generator(cfg, args))


def cmd_distill(args, cfg):
    from .autodiff import SeededRNG
    from .experiments import DEFAULTS, load_projection, save_segmenter
    from .segmentation import distill_from_projection
    out = _out(args, ".")
    proj_path = Path(args.projection) if args.projection else out / "projection.grt"
    proj = load_projection(proj_path)
    gen = _generator(cfg, args)
    model = distill_from_projection(gen, proj, cfg.n_synthetic, SeededRNG(cfg.seed).spawn(1001),
                                    steps=cfg.get("distill_steps", cfg.get("steps", DEFAULTS.distill_steps)),
                                    batch_size=cfg.get("batch", DEFAULTS.distill_batch),
                                    lr=cfg.get("lr", DEFAULTS.seg_lr), literal=args.literal)
    if args.literal:
        from .experiments import save_projection
        save_projection(out / "distilled_literal.grt", model)
        _finish(out, ["distilled_literal.grt"], cfg)
        return
    save_segmenter(out / "model.grt", model)
    _finish(out, ["model.grt"], cfg)


def cmd_pretrain(args, cfg):
    from .experiments import pretrain, save_backbone
    target = Path(args.out or "backbone.grt")
    if target.suffix != ".grt":
        target.mkdir(parents=True, exist_ok=True)
        target = target / "backbone.grt"
    target.parent.mkdir(parents=True, exist_ok=True)
    gen = _generator(cfg, args)
    bb = pretrain(gen, cfg.seed, cfg.get("pretrain_steps", cfg.get("steps")), cfg.get("lr"),
                  curve_path=target.parent / "layermatch_curve.csv")
    save_backbone(target, bb)


def _train_split(cfg):
    from .data import make_datasets
    from .generators import ProceduralGenerator
    return make_datasets(cfg.seed, ProceduralGenerator(), synthetic_test=1)["train"]


def cmd_finetune(args, cfg):
    from .experiments import MissingPrerequisite, load_backbone, run_cell, save_segmenter
    out = _out(args, ".")
    if args.random_init:
        backbone, method = None, "scratch"
    else:
        if not args.backbone:
            raise MissingPrerequisite("finetune needs --backbone (or --random-init)")
        backbone, method = load_backbone(args.backbone), "layermatch"
    kw = _seg_kwargs(cfg)
    model = run_cell(method, cfg.seed, args.fraction, _train_split(cfg), kw["steps"], backbone,
                     lr=kw["lr"], batch=kw["batch"])
    save_segmenter(out / "model.grt", model)
    _finish(out, ["model.grt"], cfg)


def cmd_pseudo_label(args, cfg):
    from .experiments import run_cell, save_segmenter
    from .fileio import write_csv
    out = _out(args, ".")
    kw = _seg_kwargs(cfg)
    model = run_cell("pseudo", cfg.seed, args.fraction, _train_split(cfg), kw["steps"],
                     threshold=cfg.threshold, rounds=cfg.rounds, lr=kw["lr"], batch=kw["batch"])
    save_segmenter(out / "model.grt", model)
    write_csv(out / "pseudo_retained.csv", ["round", "retained"],
              [[i + 1, f] for i, f in enumerate(model.retained_fraction_)], append=False)
    _finish(out, ["model.grt", "pseudo_retained.csv"], cfg)


def cmd_eval(args, cfg):
    from .data import make_datasets
    from .experiments import load_segmenter, metrics_row
    from .fileio import write_metrics_csv
    from .metrics import segmentation_metrics
    model = load_segmenter(args.model)
    split = "real-test" if args.split == "test" else args.split
    data = make_datasets(cfg.seed, _generator(cfg, args))[split]
    m = segmentation_metrics(model.predict(data.images), data.labels, model.n_classes)
    target = Path(args.out or "metrics.csv")
    target.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(target, [metrics_row(args.method, cfg.seed, args.fraction, m)])


def cmd_sweep(args, cfg):
    from .experiments import run_sweep
    run_sweep(cfg, _out(args, "."), _generator(cfg, args))


def cmd_purity(args, cfg):
    from .experiments import run_purity
    run_purity(cfg, _out(args, "."), _generator(cfg, args))


def cmd_plot(args):
    from .plotting import plot_csv
    if not Path(args.csv).exists():
        from .experiments import MissingPrerequisite
        raise MissingPrerequisite(f"csv not found: {args.csv}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plot_csv(args.csv, args.kind, args.out)


COMMANDS = {
    "gen-data": cmd_gen_data, "train-generator": cmd_train_generator,
    "train-proj": cmd_train_proj, "proj-curve": cmd_proj_curve, "distill": cmd_distill,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "pseudo-label": cmd_pseudo_label,
    "eval": cmd_eval, "sweep": cmd_sweep, "purity": cmd_purity,
}


def _fail(code, category, detail):
    print(f"error: {category}: {detail}", file=sys.stderr)
    return code


def main(argv=None):
    from .autodiff import NonFiniteError
    from .experiments import MissingPrerequisite
    from .fileio import ConfigError, FormatError
    from .plotting import SchemaError
    try:
        args = build_parser().parse_args(argv)
    except _ArgumentError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "plot":
            cmd_plot(args)
        else:
            COMMANDS[args.command](args, _resolve(args))
    except (MissingPrerequisite, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, "missing-prerequisite", exc)
    except (ConfigError, SchemaError, FormatError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NonFiniteError as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
