"""Command-line entry point: dataset generation, fold splitting, training,
evaluation, calibration, CRF rescoring, rotation analytics, embeddings."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import analytics, calibration, crf as crf_mod, training
from .data import (
    FoldAssignment,
    SyntheticConfig,
    config_to_manifest,
    generate_synthetic,
    load_dataset,
    make_folds,
    save_dataset,
)
from .errors import ConfigError, ContractError, DataFormatError
from .model import CropModel, ModelDims, load_checkpoint, save_checkpoint

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONTRACT = 4

_SYNTH_PROPS = {
    "num_classes": {"type": "integer", "minimum": 2},
    "num_years": {"type": "integer", "minimum": 1},
    "channels": {"type": "integer", "minimum": 1},
    "timesteps": {"type": "integer", "minimum": 4},
    "parcels": {"type": "integer", "minimum": 1},
    "pixels_min": {"type": "integer", "minimum": 1},
    "pixels_max": {"type": "integer", "minimum": 1},
    "noise_std": {"type": "number", "minimum": 0},
    "year_shift": {"type": "number", "minimum": 0},
    "area_size": {"type": "number", "exclusiveMinimum": 0},
    "permanent_classes": {"type": "array", "items": {"type": "integer"}},
    "permanent_stay": {"type": "number", "minimum": 0, "maximum": 1},
    "cycles": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
    "cycle_follow": {"type": "number", "minimum": 0, "maximum": 1},
    "other_within": {"type": "number", "minimum": 0, "maximum": 1},
    "curve_groups": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
    "seed": {"type": "integer", "minimum": 0},
}

_DIMS_PROPS = {
    name: {"type": "integer", "minimum": 1}
    for name in (
        "channels", "sample_pixels", "d1", "d2", "heads", "d_k",
        "out_hidden", "descriptor", "num_classes", "head_hidden",
    )
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": _SYNTH_PROPS,
                },
            },
        },
        "folds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 2},
                "block_size": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": _DIMS_PROPS,
                },
                "variant": {
                    "enum": ["single", "dec", "dec-concat", "dec-one-year", "obs", "crf"]
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "protocol": {"enum": ["mixed", "specialized"]},
                "protocol_year": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "years": {
                    "anyOf": [
                        {"enum": ["all"]},
                        {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    ]
                },
                "calibration": {"type": "boolean"},
            },
        },
    },
}


def load_run_config(path):
    import jsonschema

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}")
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid run config {path}: {exc.message}")
    return doc


def _synthetic_config(section):
    cfg = dict(section)
    for key in ("permanent_classes", "cycles", "curve_groups"):
        if key in cfg:
            value = cfg[key]
            cfg[key] = tuple(
                tuple(v) if isinstance(v, list) else v for v in value
            )
    return SyntheticConfig(**cfg)


def _load_folds(path):
    with open(path) as fh:
        doc = json.load(fh)
    return FoldAssignment(
        k=doc["k"],
        folds={int(pid): f for pid, f in doc["folds"].items()},
        block_size=doc["block_size"],
    )


def _model_dims(config, dataset):
    dims_cfg = config.get("model", {}).get("dims", {})
    dims = ModelDims(**dims_cfg)
    if "channels" not in dims_cfg:
        dims.channels = dataset.num_channels
    if "num_classes" not in dims_cfg:
        dims.num_classes = dataset.num_classes
    return dims


def _records_payload(meta, val_records, test_records):
    return {
        "meta": meta,
        "val": [r.to_dict() for r in val_records],
        "test": [r.to_dict() for r in test_records],
    }


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _year_filter(records, year):
    if year in (None, "all"):
        return records
    return [r for r in records if r.year_index == int(year)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    config = load_run_config(args.config)
    section = config.get("dataset", {}).get("synthetic")
    if section is None:
        raise ConfigError("run config has no dataset.synthetic section")
    synth = _synthetic_config(section)
    if args.seed is not None:
        synth.seed = args.seed
    parcels = generate_synthetic(synth)
    save_dataset(args.out, parcels, synth.num_classes, config_to_manifest(synth))
    print(f"wrote {len(parcels)} parcels to {args.out}")
    return 0


def cmd_split(args):
    dataset = load_dataset(args.dataset)
    assignment = make_folds(
        dataset.parcels, args.k, args.block_size, salt=args.seed or 0
    )
    _write_json(
        args.out,
        {
            "k": assignment.k,
            "block_size": assignment.block_size,
            "folds": {str(pid): f for pid, f in assignment.folds.items()},
        },
    )
    print(f"assigned {len(assignment.folds)} parcels to {assignment.k} folds")
    return 0


def _train_config(config, args):
    section = dict(config.get("train", {}))
    variant = args.variant or config.get("model", {}).get("variant", "single")
    if variant == "crf":
        raise ConfigError("the CRF baseline is not trained; use the crf subcommand")
    cfg = training.TrainConfig(variant=variant, **section)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args):
    import os

    config = load_run_config(args.config)
    dataset = load_dataset(args.dataset)
    folds = _load_folds(args.folds)
    cfg = _train_config(config, args)
    dims = _model_dims(config, dataset)
    folds_to_run = [args.fold] if args.fold is not None else None
    result = training.train(dataset, folds, cfg, dims, folds_to_run=folds_to_run)
    os.makedirs(args.out, exist_ok=True)
    report = {"config": config, "seed": cfg.seed, "variant": cfg.variant, "folds": {}}
    for fr in result.folds:
        ckpt = os.path.join(args.out, f"checkpoint_fold{fr.fold}.bin")
        save_checkpoint(ckpt, fr.model)
        per_year = {}
        for year in sorted({r.year_index for r in fr.test_records}):
            cm = analytics.confusion(
                [r for r in fr.test_records if r.year_index == year],
                dims.num_classes,
            )
            oa, _, miou = analytics.metrics(cm)
            per_year[str(year)] = {"oa": oa, "miou": miou}
        report["folds"][str(fr.fold)] = {
            "best_epoch": fr.best_epoch,
            "test_by_year": per_year,
        }
    _write_json(os.path.join(args.out, "run_report.json"), report)
    print(f"trained {len(result.folds)} fold(s); report in {args.out}")
    return 0


def cmd_eval(args):
    import os

    dataset = load_dataset(args.dataset)
    folds = _load_folds(args.folds)
    model = load_checkpoint(args.checkpoint)
    test_parcels = [
        p for p in dataset.parcels if folds.folds[p.parcel_id] == args.fold
    ]
    val_fold = (args.fold + 1) % folds.k
    val_parcels = [
        p for p in dataset.parcels if folds.folds[p.parcel_id] == val_fold
    ]
    val_records = training.predict(model, val_parcels, seed=args.seed or 0)
    test_records = training.predict(model, test_parcels, seed=args.seed or 0)
    test_scored = _year_filter(test_records, args.year)
    cm = analytics.confusion(test_scored, model.dims.num_classes)
    oa, iou, miou = analytics.metrics(cm)
    os.makedirs(args.out, exist_ok=True)
    meta = {
        "variant": model.variant,
        "fold": args.fold,
        "val_fold": val_fold,
        "seed": args.seed or 0,
        "num_classes": model.dims.num_classes,
        "year": args.year or "all",
    }
    _write_json(
        os.path.join(args.out, "predictions.json"),
        _records_payload(meta, val_records, test_records),
    )
    _write_json(
        os.path.join(args.out, "metrics.json"),
        {
            "oa": oa,
            "miou": miou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        },
    )
    class_names = (dataset.manifest or {}).get("class_names")
    analytics.write_confusion_csv(os.path.join(args.out, "confusion.csv"), cm, class_names)
    print(f"OA {oa:.4f}  mIoU {miou:.4f}  ({len(test_scored)} records)")
    return 0


def _load_predictions(path):
    with open(path) as fh:
        doc = json.load(fh)
    val = [training.PredictionRecord.from_dict(d) for d in doc["val"]]
    test = [training.PredictionRecord.from_dict(d) for d in doc["test"]]
    return doc["meta"], val, test


def cmd_calibrate(args):
    import os

    meta, val_records, test_records = _load_predictions(args.predictions)
    scaler = calibration.fit_temperature(val_records)
    calibration.calibrate_records(test_records, 1.0)
    ece_before = calibration.ece(test_records, args.bins)
    calibration.calibrate_records(test_records, scaler.tau)
    ece_after = calibration.ece(test_records, args.bins)
    os.makedirs(args.out, exist_ok=True)
    calibration.write_reliability_csv(
        os.path.join(args.out, "reliability.csv"),
        calibration.reliability(test_records, args.bins),
    )
    calibration.calibrate_records(val_records, scaler.tau)
    _write_json(
        os.path.join(args.out, "calibration.json"),
        {
            "tau": scaler.tau,
            "bins": args.bins,
            "ece_before": ece_before,
            "ece_after": ece_after,
        },
    )
    _write_json(
        os.path.join(args.out, "predictions_calibrated.json"),
        _records_payload(meta, val_records, test_records),
    )
    print(f"tau {scaler.tau:.4f}  ECE {ece_before:.4f} -> {ece_after:.4f}")
    return 0


def cmd_crf(args):
    import os

    meta, val_records, test_records = _load_predictions(args.predictions)
    dataset = load_dataset(args.dataset)
    folds = _load_folds(args.folds)
    held_out = {meta["fold"], meta["val_fold"]}
    triplets = [
        tuple(p.labels[i : i + 3])
        for p in dataset.parcels
        if folds.folds[p.parcel_id] not in held_out
        for i in range(len(p.labels) - 2)
    ]
    transitions = crf_mod.estimate_transitions(
        triplets, dataset.num_classes, alpha=args.alpha
    )
    scaler = calibration.fit_temperature(val_records)
    calibration.calibrate_records(test_records, scaler.tau)
    labels_by_parcel = {p.parcel_id: p.labels for p in dataset.parcels}
    rescored = []
    for r in test_records:
        if r.year_index <= 2:  # CRF applies to years with two known past labels
            continue
        labels = labels_by_parcel[r.parcel_id]
        a = labels[r.year_index - 3]
        b = labels[r.year_index - 2]
        scores, posterior = crf_mod.crf_score(r.posterior, a, b, transitions)
        rescored.append(
            training.PredictionRecord(
                parcel_id=r.parcel_id,
                year_index=r.year_index,
                logits=scores.astype(np.float32),
                true_label=r.true_label,
                posterior=posterior.astype(np.float32),
            )
        )
    cm = analytics.confusion(rescored, dataset.num_classes)
    oa, iou, miou = analytics.metrics(cm)
    os.makedirs(args.out, exist_ok=True)
    crf_mod.save_transitions(os.path.join(args.out, "transitions.bin"), transitions)
    _write_json(
        os.path.join(args.out, "crf_metrics.json"),
        {
            "alpha": args.alpha,
            "tau": scaler.tau,
            "oa": oa,
            "miou": miou,
            "records": len(rescored),
        },
    )
    print(f"CRF rescoring: OA {oa:.4f}  mIoU {miou:.4f}  ({len(rescored)} records)")
    return 0


def cmd_rotations(args):
    import os

    dataset = load_dataset(args.dataset)
    seqs = [p.labels for p in dataset.parcels]
    rows, mean = analytics.rotation_table(seqs, dataset.num_classes)
    assignment = analytics.categorize(seqs, dataset.num_classes)
    os.makedirs(args.out, exist_ok=True)
    class_names = (dataset.manifest or {}).get("class_names")
    analytics.write_rotation_table_csv(
        os.path.join(args.out, "rotation_table.csv"), rows, mean, class_names
    )
    _write_json(
        os.path.join(args.out, "rotations.json"),
        {
            "observed_rotations": analytics.count_observed_rotations(seqs),
            "possible_rotations": analytics.possible_rotations(
                dataset.num_classes, dataset.num_years
            ),
            "categories": {str(k): v for k, v in sorted(assignment.items())},
        },
    )
    print(f"{analytics.count_observed_rotations(seqs)} observed rotations")
    return 0


def cmd_embed(args):
    dataset = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    analytics.export_embeddings(model, dataset.parcels, args.out, seed=args.seed or 0)
    print(f"wrote embeddings for {len(dataset.parcels)} parcels to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="croprot",
        description="Multi-year crop-type classification experiments.",
    )
    parser.add_argument("--threads", type=int, default=1, help="worker cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and save a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="emit a spatial fold assignment")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--block-size", type=float, default=1000.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train per-fold models")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predictions and metrics for one fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--year", default="all")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="fit temperature, report ECE")
    p.add_argument("--predictions", required=True)
    p.add_argument("--bins", type=int, default=calibration.DEFAULT_BINS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("crf", help="transition-tensor rescoring of year 3")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=calibration.DEFAULT_BINS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crf)

    p = sub.add_parser("rotations", help="rotation table and culture categories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotations)

    p = sub.add_parser("embed", help="export year descriptors to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
