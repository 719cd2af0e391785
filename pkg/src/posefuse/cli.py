"""Command-line entry points.

Every command is a pure function of its flags, the optional JSON config
file, and the files it references: no clocks, no ambient randomness.
Precedence is flags > config file > built-in defaults. Exit codes:
0 success, 1 usage or configuration error, 2 missing or corrupt
artifact, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import torch

from .aggregation import AggregatorModel, ModelConfig, load_model, model_fingerprint
from .blobio import write_json
from .dataset import (DEFAULT_LAYER_SPEC, generate_synthetic_dataset, load_dataset,
                      make_train_samples, template_meta)
from .errors import (BackboneUnavailableError, CheckpointVersionError,
                     InsufficientNegativesError, LossDivergedError, ManifestError,
                     MissingBlobError, PosefuseError, ShapeMismatchError,
                     StaleGalleryError)
from .evaluation import evaluate_acc, pca_visualize, write_report_csv, write_report_text
from .features import (DiffusionBackboneProvider, ImagePatch, SyntheticDescriptor,
                       SyntheticFeatureProvider, fixture_load, fixture_save)
from .geometry import Rotation3
from .matching import build_gallery, load_gallery, retrieve, save_gallery
from .training import TrainConfig, checkpoint_load, checkpoint_save, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ARTIFACT = 2
EXIT_NUMERIC = 3

_DEFAULT_CONFIG = {
    "provider": {
        "kind": "synthetic",
        "layer_spec": [list(s) for s in DEFAULT_LAYER_SPEC],
        "noise_level": 0.0,
    },
    "model": {"arch": "cwa", "C": 128, "S": 32, "C_mid": 0, "hidden": 0},
    "training": {"epochs": 20, "learning_rate": 1e-3, "tau": 0.1, "M": 8,
                 "delta": 0.2, "batch_size": 8},
    "eval": {"delta": 0.2, "lambda_deg": 15.0},
    "paths": {},
    "seed": None,
}

_ARTIFACT_ERRORS = (ManifestError, MissingBlobError, StaleGalleryError,
                    CheckpointVersionError, BackboneUnavailableError,
                    FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; the artifact reserves 2
    # for missing/corrupt artifacts, so usage errors become exit 1
    def error(self, message):
        raise UsageError(message)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(_DEFAULT_CONFIG)
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return _merge(_DEFAULT_CONFIG, payload)


def _resolve_seed(args, config: dict) -> int:
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None:
        raise UsageError("--seed is required (flag or 'seed' in the config file)")
    return int(seed)


def _resolve_path(flag_value, config: dict, key: str, required: bool = True):
    value = flag_value if flag_value is not None else config["paths"].get(key)
    if value is None and required:
        raise UsageError(f"--{key} is required (flag or paths.{key} in the config)")
    return value


def _prepare_out(path: str, force: bool, is_dir: bool = True) -> str:
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise UsageError(f"output {path} exists and is not empty; pass --force "
                             f"to overwrite")
    elif os.path.isfile(path) and not force:
        raise UsageError(f"output {path} exists; pass --force to overwrite")
    if is_dir:
        os.makedirs(path, exist_ok=True)
    else:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
    return path


def _model_config(config: dict, layer_spec, seed: int) -> ModelConfig:
    section = config["model"]
    return ModelConfig(
        arch=section["arch"],
        layer_spec=tuple(tuple(int(v) for v in s) for s in layer_spec),
        channels=int(section["C"]),
        resolution=int(section["S"]),
        c_mid=int(section["C_mid"]),
        hidden=int(section["hidden"]),
        seed=seed,
    )


def _model_for(args, config: dict, layer_spec, seed: int) -> AggregatorModel:
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint is None:
        checkpoint = config["paths"].get("checkpoint")
    if checkpoint is not None:
        model = load_model(checkpoint)
        if model.config.layer_spec != tuple(tuple(int(v) for v in s)
                                            for s in layer_spec):
            raise ManifestError(
                f"checkpoint {checkpoint} was trained for layer spec "
                f"{model.config.layer_spec}, data provides {tuple(layer_spec)}")
        return model
    return AggregatorModel(_model_config(config, layer_spec, seed))


def _write_run_echo(out_dir: str, command: str, config: dict, seed: int,
                    fingerprint: str | None = None,
                    extra: dict | None = None) -> None:
    payload = {"command": command, "config": config, "seed": seed}
    if fingerprint is not None:
        payload["model_fingerprint"] = fingerprint
    if extra:
        payload.update(extra)
    write_json(os.path.join(out_dir, "run.json"), payload)


def _parse_rotation(text: str | None) -> Rotation3:
    if text is None:
        return Rotation3.identity()
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 9:
        raise UsageError(f"--rotation needs 9 comma-separated floats, got {len(parts)}")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"--rotation values must be numeric: {exc}") from exc
    return Rotation3(np.asarray(values, dtype=np.float64).reshape(3, 3))


def _train_config(config: dict, model_config: ModelConfig, seed: int,
                  epochs_flag=None) -> TrainConfig:
    section = config["training"]
    epochs = epochs_flag if epochs_flag is not None else section["epochs"]
    return TrainConfig(
        model=model_config,
        epochs=int(epochs),
        learning_rate=float(section["learning_rate"]),
        tau=float(section["tau"]),
        m=int(section["M"]),
        delta=float(section["delta"]),
        seed=seed,
        batch_size=int(section["batch_size"]),
    )


def _save_png(image01: np.ndarray, path: str) -> None:
    from PIL import Image
    data = np.clip(image01, 0.0, 1.0)
    Image.fromarray((data * 255.0).round().astype(np.uint8), mode="RGB").save(
        path, format="PNG")


# --- commands ---------------------------------------------------------------

def cmd_synth_data(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    out = _prepare_out(_resolve_path(args.out, config, "out"), args.force)
    noise = args.noise if args.noise is not None else config["provider"]["noise_level"]
    layout = generate_synthetic_dataset(
        out, classes=args.classes, templates_per_class=args.templates_per_class,
        queries_per_class=args.queries_per_class, noise=float(noise), seed=seed,
        perturb_deg=args.perturb_deg, unseen_classes=args.unseen,
        layer_spec=config["provider"]["layer_spec"], occlude=args.occlude)
    _write_run_echo(out, "synth-data", config, seed, extra={
        "classes": len(layout.classes),
        "templates": len(layout.templates),
        "samples": len(layout.samples),
    })
    print(f"dataset written to {out}: {len(layout.classes)} classes, "
          f"{len(layout.templates)} templates, {len(layout.samples)} queries")
    return EXIT_OK


def cmd_extract(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    out = _prepare_out(_resolve_path(args.out, config, "out"), args.force)
    kind = config["provider"]["kind"]
    layer_spec = tuple(tuple(int(v) for v in s)
                       for s in config["provider"]["layer_spec"])
    if args.input is not None:
        stack = fixture_load(args.input)
    elif kind == "synthetic":
        if args.class_id is None:
            raise UsageError("synthetic extraction needs --class-id")
        noise = args.noise if args.noise is not None \
            else config["provider"]["noise_level"]
        provider = SyntheticFeatureProvider(layer_spec, noise_level=float(noise))
        stack = provider.extract(
            SyntheticDescriptor(args.class_id, _parse_rotation(args.rotation)),
            timestep=args.timestep, seed=seed)
    elif kind == "backbone":
        if args.image is None:
            raise UsageError("backbone extraction needs --image")
        from PIL import Image
        pixels = np.asarray(Image.open(args.image).convert("RGB"),
                            dtype=np.float64) / 255.0
        provider = DiffusionBackboneProvider(
            [f"layer_{i}" for i in range(len(layer_spec))], layer_spec)
        stack = provider.extract(ImagePatch(pixels), timestep=args.timestep,
                                 seed=seed)
    else:
        raise UsageError(f"provider kind {kind!r} not supported by extract")
    fixture_save(stack, out)
    _write_run_echo(out, "extract", config, seed)
    print(f"feature fixture written to {out} ({len(stack.layers)} layers, "
          f"timestep {stack.timestep})")
    return EXIT_OK


def cmd_build_gallery(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    dataset_dir = _resolve_path(args.dataset, config, "dataset")
    out = _prepare_out(_resolve_path(args.out, config, "out"), args.force)
    layout = load_dataset(dataset_dir)
    model = _model_for(args, config, layout.layer_spec, seed)
    meta = template_meta(layout, model.config.resolution)
    gallery = build_gallery(meta, model)
    save_gallery(gallery, out)
    _write_run_echo(out, "build-gallery", config, seed,
                    fingerprint=gallery.model_fingerprint,
                    extra={"templates": len(gallery.templates)})
    print(f"gallery written to {out}: {len(gallery.templates)} templates, "
          f"fingerprint {gallery.model_fingerprint}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    dataset_dir = _resolve_path(args.dataset, config, "dataset")
    out = _prepare_out(_resolve_path(args.out, config, "out"), args.force)
    layout = load_dataset(dataset_dir)
    model_config = _model_config(config, layout.layer_spec, seed)
    train_config = _train_config(config, model_config, seed, args.epochs)
    dataset = make_train_samples(layout, "train")
    seen = layout.seen_class_ids
    meta = [entry for entry in template_meta(layout, model_config.resolution)
            if entry[0].id in seen]
    if not meta:
        raise UsageError("dataset has no templates for its seen classes")
    init_model = AggregatorModel(model_config)
    gallery = build_gallery(meta, init_model)
    resume = checkpoint_load(args.resume) if args.resume is not None else None
    try:
        checkpoint = train(dataset, gallery, train_config, resume_from=resume)
    except LossDivergedError as exc:
        if exc.checkpoint is not None:
            checkpoint_save(exc.checkpoint, out)
            print(f"error: {exc}; last good state saved to {out}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    checkpoint_save(checkpoint, out)
    fingerprint = model_fingerprint(checkpoint.model)
    _write_run_echo(out, "train", config, seed, fingerprint=fingerprint, extra={
        "epochs": checkpoint.epoch,
        "batches": len(checkpoint.loss_history),
        "final_loss": checkpoint.loss_history[-1][2] if checkpoint.loss_history else None,
    })
    print(f"checkpoint written to {out}: {checkpoint.epoch} epochs, "
          f"fingerprint {fingerprint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    dataset_dir = _resolve_path(args.dataset, config, "dataset")
    out = _prepare_out(_resolve_path(args.out, config, "out"), args.force)
    layout = load_dataset(dataset_dir)
    model = _model_for(args, config, layout.layer_spec, seed)
    gallery_dir = args.gallery if args.gallery is not None \
        else config["paths"].get("gallery")
    if gallery_dir is not None:
        gallery = load_gallery(gallery_dir)
    else:
        gallery = build_gallery(template_meta(layout, model.config.resolution), model)
    delta = args.delta if args.delta is not None else config["eval"]["delta"]
    lambda_deg = args.lambda_deg if args.lambda_deg is not None \
        else config["eval"]["lambda_deg"]
    dataset = make_train_samples(layout, args.split)
    report = evaluate_acc(dataset, gallery, model, delta=float(delta),
                          lambda_deg=float(lambda_deg),
                          seen_classes=layout.seen_class_ids, split=args.split)
    write_report_text(report, os.path.join(out, "report.txt"))
    write_report_csv(report, os.path.join(out, "report.csv"))
    _write_run_echo(out, "eval", config, seed,
                    fingerprint=report.model_fingerprint,
                    extra={"rows": [[r.split, r.subset, r.n_samples, r.accuracy]
                                    for r in report.rows]})
    for row in report.rows:
        print(f"{row.split} {row.subset}: {row.n_samples} samples, "
              f"accuracy {row.accuracy!r}")
    return EXIT_OK


def cmd_match(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    gallery_dir = _resolve_path(args.gallery, config, "gallery")
    gallery = load_gallery(gallery_dir)
    layer_spec = tuple(tuple(int(v) for v in s)
                       for s in config["provider"]["layer_spec"])
    if args.input is not None:
        stack = fixture_load(args.input)
        layer_spec = stack.layer_spec
    elif args.class_id is not None:
        noise = args.noise if args.noise is not None \
            else config["provider"]["noise_level"]
        provider = SyntheticFeatureProvider(layer_spec, noise_level=float(noise))
        stack = provider.extract(
            SyntheticDescriptor(args.class_id, _parse_rotation(args.rotation)),
            seed=seed)
    else:
        raise UsageError("match needs --input FIXTURE_DIR or --class-id")
    model = _model_for(args, config, layer_spec, seed)
    delta = args.delta if args.delta is not None else config["eval"]["delta"]
    result = retrieve(model.aggregate(stack), gallery, float(delta),
                      expect_fingerprint=model_fingerprint(model))
    payload = {
        "template_id": result.template_id,
        "score": result.score,
        "class_id": result.class_label.id,
        "class_name": result.class_label.name,
        "rotation": [float(v) for v in result.pose.rotation.as_flat()],
        "model_fingerprint": gallery.model_fingerprint,
    }
    print(json.dumps(payload, sort_keys=True))
    if args.out is not None:
        _prepare_out(args.out, args.force)
        write_json(os.path.join(args.out, "match.json"),
                   {"config": config, "seed": seed, "result": payload})
    return EXIT_OK


def cmd_viz(args) -> int:
    config = _load_run_config(args.config)
    seed = _resolve_seed(args, config)
    out = _resolve_path(args.out, config, "out")
    if os.path.exists(out) and not args.force:
        raise UsageError(f"output {out} exists; pass --force to overwrite")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    if args.gallery is not None and args.template_id is not None:
        gallery = load_gallery(args.gallery)
        matches = [t for t in gallery.templates if t.id == args.template_id]
        if not matches:
            raise ManifestError(
                f"gallery {args.gallery} has no template id {args.template_id}")
        feature = matches[0].features
        fingerprint = gallery.model_fingerprint
    else:
        layer_spec = tuple(tuple(int(v) for v in s)
                           for s in config["provider"]["layer_spec"])
        if args.input is not None:
            stack = fixture_load(args.input)
            layer_spec = stack.layer_spec
        elif args.class_id is not None:
            noise = args.noise if args.noise is not None \
                else config["provider"]["noise_level"]
            provider = SyntheticFeatureProvider(layer_spec, noise_level=float(noise))
            stack = provider.extract(
                SyntheticDescriptor(args.class_id, _parse_rotation(args.rotation)),
                seed=seed)
        else:
            raise UsageError("viz needs --gallery with --template-id, --input "
                             "FIXTURE_DIR, or --class-id")
        model = _model_for(args, config, layer_spec, seed)
        feature = model.aggregate(stack)
        fingerprint = model_fingerprint(model)
    _save_png(pca_visualize(feature), out)
    write_json(out + ".json", {"command": "viz", "config": config, "seed": seed,
                               "model_fingerprint": fingerprint})
    print(f"visualization written to {out}")
    return EXIT_OK


# --- wiring -----------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, help="master seed (required here or in config)")
    sub.add_argument("--out", help="output path")
    sub.add_argument("--force", action="store_true",
                     help="overwrite existing non-empty outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posefuse",
                     description="Template-based pose estimation with fused "
                                 "multi-layer features")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth-data", parents=[], help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--templates-per-class", type=int, default=60)
    p.add_argument("--queries-per-class", type=int, default=40)
    p.add_argument("--noise", type=float, help="query feature noise level")
    p.add_argument("--perturb-deg", type=float, default=5.0,
                   help="query pose offset from its source template, degrees")
    p.add_argument("--unseen", type=int, default=1,
                   help="number of classes held out of the training split")
    p.add_argument("--occlude", action="store_true",
                   help="zero a seeded rectangle in each query's features")
    p.set_defaults(func=cmd_synth_data)

    p = commands.add_parser("extract", help="compute or copy one feature fixture")
    _add_common(p)
    p.add_argument("--input", help="existing fixture directory to validate and re-save")
    p.add_argument("--image", help="input image (backbone provider)")
    p.add_argument("--class-id", type=int, help="synthetic class id")
    p.add_argument("--rotation", help="9 comma-separated floats, row-major")
    p.add_argument("--noise", type=float, help="synthetic noise level override")
    p.add_argument("--timestep", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = commands.add_parser("build-gallery", help="aggregate dataset templates into a gallery")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--checkpoint", help="model checkpoint (default: fresh seeded model)")
    p.set_defaults(func=cmd_build_gallery)

    p = commands.add_parser("train", help="train the fusion network")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--epochs", type=int, help="override training.epochs")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate retrieval accuracy")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--checkpoint", help="model checkpoint (default: fresh seeded model)")
    p.add_argument("--gallery", help="prebuilt gallery (default: build in-process)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--delta", type=float, help="similarity threshold override")
    p.add_argument("--lambda-deg", type=float, help="accuracy angle threshold override")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("match", help="retrieve the best template for one query")
    _add_common(p)
    p.add_argument("--gallery", help="gallery directory")
    p.add_argument("--checkpoint", help="model checkpoint (default: fresh seeded model)")
    p.add_argument("--input", help="query feature fixture directory")
    p.add_argument("--class-id", type=int, help="synthetic query class id")
    p.add_argument("--rotation", help="9 comma-separated floats, row-major")
    p.add_argument("--noise", type=float, help="synthetic noise level override")
    p.add_argument("--delta", type=float, help="similarity threshold override")
    p.set_defaults(func=cmd_match)

    p = commands.add_parser("viz", help="render features as a PCA RGB image")
    _add_common(p)
    p.add_argument("--gallery", help="gallery directory (with --template-id)")
    p.add_argument("--template-id", type=int, help="gallery template to render")
    p.add_argument("--checkpoint", help="model checkpoint (default: fresh seeded model)")
    p.add_argument("--input", help="query feature fixture directory")
    p.add_argument("--class-id", type=int, help="synthetic query class id")
    p.add_argument("--rotation", help="9 comma-separated floats, row-major")
    p.add_argument("--noise", type=float, help="synthetic noise level override")
    p.set_defaults(func=cmd_viz)
    return parser


def _apply_thread_cap() -> None:
    value = os.environ.get("POSEFUSE_THREADS")
    if value is None:
        return
    try:
        threads = int(value)
    except ValueError as exc:
        raise UsageError(f"POSEFUSE_THREADS must be an integer, got {value!r}") from exc
    if threads < 1:
        raise UsageError("POSEFUSE_THREADS must be >= 1")
    torch.set_num_threads(threads)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _apply_thread_cap()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, InsufficientNegativesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShapeMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except _ARTIFACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except LossDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
