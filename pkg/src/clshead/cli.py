"""Command-line interface.

Subcommands: synth, split, train, eval, similarity, experiment, report.
Global flags --seed, --threads, --format. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import featfile
from .errors import ConfigurationError, DataError, DivergedError, ValidationError
from .experiments import (
    ExperimentConfig,
    merge_reports,
    resolve_train_config,
    run_experiment,
)
from .features import synth_bundle
from .featfile import TensorRecord, read_bundle, read_container, write_container
from .heads import (
    BASELINE,
    PROPOSED,
    Head,
    HeadSpec,
    build_baseline_head,
    build_proposed_head,
    evaluate,
    train_head,
)
from .layers import AffineParams
from .report import ExperimentReport, emit_tables
from .seeding import derive_rng, derive_seed
from .similarity import build_similarity_report
from .splits import AType, BType, SplitSpec, compose_experiment, make_splits

log = logging.getLogger("clshead")


def _add_task_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--species", help="single-species task: species name")
    p.add_argument("--classes", type=int, default=3, help="classes for the single-species task")
    p.add_argument("--mixed", action="store_true", help="mixed task: 3 classes per species")
    p.add_argument("--f", type=float, required=True, help="training fraction (e.g. 0.1)")
    p.add_argument("--j", type=int, default=None, help="images per class (default: smallest class size)")


def _task_kind(args) -> AType | BType:
    if args.mixed:
        return BType()
    if not args.species:
        raise ValidationError("pass --species NAME or --mixed")
    return AType(species=args.species, n_classes=args.classes)


def _split_spec(args, bundle, seed: int) -> SplitSpec:
    j = args.j
    if j is None:
        labels = bundle.eval["cls_in"].labels
        j = int(np.bincount(labels, minlength=len(bundle.manifest.class_names)).max())
    return SplitSpec(f=args.f, j=j, seed=seed)


def cmd_synth(args, seed: int, threads: int, fmt: str) -> int:
    tiers = None
    if args.tiers:
        pairs = [t.split("=") for t in args.tiers.split(",")]
        tiers = {sp: float(sep) for sp, sep in pairs}
    bundle = synth_bundle(
        per_class=args.per_class,
        dim=args.dim,
        seed=seed,
        separation=args.separation,
        species_separation=tiers,
        with_penultimate=not args.no_penultimate,
        variants=args.variants,
        backbone=args.backbone,
    )
    featfile.write_bundle(args.out, bundle)
    print(f"wrote synthetic bundle to {args.out}")
    return 0


def cmd_split(args, seed: int, threads: int, fmt: str) -> int:
    bundle = read_bundle(args.features)
    kind = _task_kind(args)
    classes = compose_experiment(kind, bundle.manifest, seed)
    spec = _split_spec(args, bundle, seed)
    labels = bundle.eval["cls_in"].labels
    sizes = {
        name: int((labels == bundle.manifest.class_index(name)).sum())
        for name in classes.class_names
    }
    split = make_splits(spec, sizes)
    doc = {
        "f": spec.f,
        "j": spec.j,
        "seed": seed,
        "classes": {
            name: {
                "train": cs.train_ids.tolist(),
                "val": cs.val_ids.tolist(),
                "test": cs.test_ids.tolist(),
            }
            for name, cs in split.classes.items()
        },
    }
    print(json.dumps(doc, indent=2))
    return 0


HEAD_FILE_SPEC = ".json"


def save_head(path, head: Head) -> None:
    tensors = []
    for i, p in enumerate(head.layers):
        tensors.append(TensorRecord(f"layer{i}.weight", p.weight[:, None, :]))
        tensors.append(TensorRecord(f"layer{i}.bias", p.bias[None, None, :]))
    write_container(path, tensors)
    doc = {
        "kind": head.spec.kind,
        "layer_dims": [list(d) for d in head.spec.layer_dims],
        "layer_init": list(head.spec.layer_init),
        "activation_after": list(head.spec.activation_after),
    }
    Path(str(path) + HEAD_FILE_SPEC).write_text(json.dumps(doc, indent=2))


def load_head(path) -> Head:
    try:
        doc = json.loads(Path(str(path) + HEAD_FILE_SPEC).read_text())
    except OSError as e:
        raise DataError(f"cannot read head description: {e}") from e
    tensors = {t.name: t for t in read_container(path)}
    layers = []
    for i in range(len(doc["layer_dims"])):
        try:
            w = tensors[f"layer{i}.weight"].data[:, 0, :]
            b = tensors[f"layer{i}.bias"].data.reshape(-1)
        except KeyError as e:
            raise DataError(f"head container lacks tensor {e}") from e
        layers.append(AffineParams(w, b))
    spec = HeadSpec(
        kind=doc["kind"],
        layer_dims=tuple(tuple(d) for d in doc["layer_dims"]),
        layer_init=tuple(doc["layer_init"]),
        activation_after=tuple(doc["activation_after"]),
    )
    return Head(spec, layers)


def _task_features(bundle, kind, spec, seed, approach):
    """Train/val/test feature sets for one approach on one task."""
    from .experiments import _ROLE, _check_classes, _select

    classes = compose_experiment(kind, bundle.manifest, seed)
    sizes = _check_classes(bundle, classes.class_names)
    split = make_splits(spec, sizes)
    role = _ROLE[approach]
    out = []
    for part, source in (("train", bundle.train), ("val", bundle.eval), ("test", bundle.eval)):
        ids = {name: getattr(split.classes[name], f"{part}_ids") for name in classes.class_names}
        out.append(_select(source[role], classes.class_names, ids))
    return classes, tuple(out)


def cmd_train(args, seed: int, threads: int, fmt: str) -> int:
    bundle = read_bundle(args.features)
    kind = _task_kind(args)
    spec = _split_spec(args, bundle, seed)
    approach = args.approach
    classes, (train_fs, val_fs, test_fs) = _task_features(bundle, kind, spec, seed, approach)

    overrides = {}
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.no_early_stop:
        overrides["early_stop"] = None
    run_seed = derive_seed(seed, "run", approach, 0)
    tcfg = resolve_train_config(approach, overrides, seed=run_seed, threads=threads)

    rng = derive_rng(run_seed, "init")
    if approach == PROPOSED:
        head = build_proposed_head(bundle.pretrained_classifier(), classes.n_classes, rng)
    else:
        head = build_baseline_head(
            bundle.pretrained_penultimate(), train_fs.dim, classes.n_classes, rng
        )
    result = train_head(head, train_fs, val_fs, tcfg)
    result.test_accuracy_pct = evaluate(head, test_fs)
    if args.save_head:
        save_head(args.save_head, head)
    doc = {
        "approach": approach,
        "task": classes.label,
        "n_classes": classes.n_classes,
        "f": spec.f,
        "test_accuracy_pct": result.test_accuracy_pct,
        "train_time_s": result.train_time_s,
        "epochs_run": result.epochs_run,
        "param_count": result.param_count,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "loss_curve": result.loss_curve,
        "val_loss_curve": result.val_loss_curve,
        "lr_curve": result.lr_curve,
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_eval(args, seed: int, threads: int, fmt: str) -> int:
    bundle = read_bundle(args.features)
    head = load_head(args.head)
    kind = _task_kind(args)
    spec = _split_spec(args, bundle, seed)
    approach = PROPOSED if head.spec.kind == PROPOSED else BASELINE
    classes, (_, _, test_fs) = _task_features(bundle, kind, spec, seed, approach)
    ta = evaluate(head, test_fs)
    print(json.dumps({"task": classes.label, "n_classes": classes.n_classes, "test_accuracy_pct": ta}))
    return 0


def cmd_similarity(args, seed: int, threads: int, fmt: str) -> int:
    bundle = read_bundle(args.features)
    logits = bundle.eval.get("logits")
    if logits is None:
        raise DataError("feature bundle has no logits tensor")
    rep = build_similarity_report(logits, bundle.manifest)
    if fmt == "json":
        print(json.dumps(rep.to_dict(), indent=2))
    else:
        for name, cs in rep.classes.items():
            print(
                f"{name:<20} similarity {cs.similarity_pct:6.1f}%  "
                f"nearest pretrained class {cs.nearest_pretrained_class}"
            )
        for sp, mean in rep.species_mean.items():
            print(f"{sp:<20} species mean {mean:6.1f}%")
    return 0


def _parse_kind(doc) -> AType | BType:
    if doc.get("type", "A").upper() == "B":
        return BType(per_species=doc.get("per_species", 3))
    return AType(species=doc["species"], n_classes=doc.get("n_classes", 3))


def cmd_experiment(args, seed: int, threads: int, fmt: str) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}") from e

    features = args.features or doc.get("features")
    if not features:
        raise ConfigurationError("config lacks a features path (or pass --features)")
    bundle = read_bundle(features)
    seed = seed if args.seed is not None else doc.get("seed", 0)
    threads = threads if args.threads is not None else doc.get("threads", 1)

    base = {
        "backbone": doc.get("backbone", bundle.manifest.backbone or "unknown"),
        "approach": doc.get("approach", "both"),
        "train_overrides": doc.get("train", {}),
        "repeats": doc.get("repeats", 1),
        "folds": doc.get("folds", 5),
        "seed": seed,
        "threads": threads,
    }
    split_doc = doc.get("split", {})
    j = split_doc.get("j")
    if j is None:
        labels = bundle.eval["cls_in"].labels
        j = int(np.bincount(labels, minlength=len(bundle.manifest.class_names)).max())

    cells: list[ExperimentConfig] = []
    if "grid" in doc:
        grid = doc["grid"]
        fs = grid.get("f", [split_doc.get("f", 0.1)])
        for f in fs:
            spec = SplitSpec(f=f, j=j, seed=seed)
            for sp in grid.get("species", []):
                for n in grid.get("n_classes", [3]):
                    cells.append(
                        ExperimentConfig(kind=AType(sp, n), split=spec, **base)
                    )
            if grid.get("include_mixed"):
                cells.append(ExperimentConfig(kind=BType(), split=spec, **base))
    else:
        spec = SplitSpec(f=split_doc.get("f", 0.1), j=j, seed=seed)
        cells.append(ExperimentConfig(kind=_parse_kind(doc.get("kind", {})), split=spec, **base))

    reports = []
    for cell in cells:
        log.info("running %s f=%g", cell.kind, cell.split.f)
        reports.append(run_experiment(cell, bundle))
    report = merge_reports(reports)
    rendered = emit_tables(report, fmt)
    if args.out:
        Path(args.out).write_text(report.to_json())
        log.info("wrote report json to %s", args.out)
    print(rendered)
    return 0


def cmd_report(args, seed: int, threads: int, fmt: str) -> int:
    try:
        report = ExperimentReport.from_json(Path(args.input).read_text())
    except OSError as e:
        raise DataError(f"cannot read report: {e}") from e
    print(emit_tables(report, fmt))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="clshead",
        description="Train and benchmark transfer-learning classifier heads "
        "over precomputed CNN features.",
    )
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="matmul thread cap (default 1)")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic feature bundle")
    ps.add_argument("--out", required=True)
    ps.add_argument("--per-class", type=int, default=100)
    ps.add_argument("--dim", type=int, default=64)
    ps.add_argument("--separation", type=float, default=3.0)
    ps.add_argument("--tiers", help="per-species separation, e.g. Bird=3.0,Fruit=2.4,...")
    ps.add_argument("--variants", type=int, default=1)
    ps.add_argument("--no-penultimate", action="store_true", help="pooled-feature backbone shape")
    ps.add_argument("--backbone", default="synthetic")
    ps.set_defaults(func=cmd_synth)

    pp = sub.add_parser("split", help="print the train/val/test id partition")
    pp.add_argument("--features", required=True)
    _add_task_args(pp)
    pp.set_defaults(func=cmd_split)

    pt = sub.add_parser("train", help="train one head and report TA/TT")
    pt.add_argument("--features", required=True)
    pt.add_argument("--approach", choices=(PROPOSED, BASELINE), required=True)
    _add_task_args(pt)
    pt.add_argument("--max-epochs", type=int, default=None)
    pt.add_argument("--batch-size", type=int, default=None)
    pt.add_argument("--no-early-stop", action="store_true")
    pt.add_argument("--save-head", help="write trained head to this container path")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a saved head on the test split")
    pe.add_argument("--features", required=True)
    pe.add_argument("--head", required=True)
    _add_task_args(pe)
    pe.set_defaults(func=cmd_eval)

    pm = sub.add_parser("similarity", help="similarity of each class to the pretrained classes")
    pm.add_argument("--features", required=True)
    pm.set_defaults(func=cmd_similarity)

    px = sub.add_parser("experiment", help="run a config-driven experiment grid")
    px.add_argument("--config", required=True)
    px.add_argument("--features", help="override the config's features path")
    px.add_argument("--out", help="also write the lossless report json here")
    px.set_defaults(func=cmd_experiment)

    pr = sub.add_parser("report", help="re-render a report json")
    pr.add_argument("--in", dest="input", required=True)
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    seed = args.seed if args.seed is not None else 0
    threads = args.threads if args.threads is not None else 1
    try:
        return args.func(args, seed, threads, args.format)
    except (ValidationError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
