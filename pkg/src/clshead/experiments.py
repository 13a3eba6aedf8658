"""Experiment runner: grid cells, gains, and cross-validation.

One ExperimentConfig describes one grid cell: a task (single-species or
mixed), a split, a backbone's feature bundle, and how many repeated
seeded runs to aggregate. Both head kinds train with their own default
recipes unless overridden; the row records test accuracy and training
time for each, plus the gain in percentage points and relative percent
(the two definitions are always reported side by side).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, ValidationError
from .features import FeatureBundle, FeatureSet
from .heads import (
    BASELINE,
    BASELINE_SGD,
    PROPOSED,
    PROPOSED_SGD,
    TrainConfig,
    build_baseline_head,
    build_proposed_head,
    evaluate,
    train_head,
)
from .optim import EarlyStopConfig
from .report import ExperimentReport, ReportRow
from .seeding import derive_rng, derive_seed
from .similarity import class_similarity
from .splits import AType, BType, SplitSpec, compose_experiment, make_splits

APPROACHES = (PROPOSED, BASELINE, "both")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: AType | BType
    split: SplitSpec
    backbone: str = "synthetic"
    approach: str = "both"
    train_overrides: Mapping = field(default_factory=dict)
    repeats: int = 1
    folds: int = 5
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ValidationError(
                f"approach must be one of {APPROACHES}, got {self.approach!r}"
            )
        if self.repeats < 1:
            raise ValidationError(f"repeats must be >= 1, got {self.repeats}")
        if not 1 <= self.folds <= 30:
            raise ValidationError(f"folds must be in 1..30, got {self.folds}")


@dataclass(frozen=True)
class Gain:
    gain_pp: float
    gain_rel_pct: float | None  # undefined when the baseline is 0


def compute_gain(ta_baseline: float, ta_proposed: float) -> Gain:
    """Percentage-point difference and relative percent gain of P over B."""
    for name, v in (("ta_baseline", ta_baseline), ("ta_proposed", ta_proposed)):
        if not 0.0 <= v <= 100.0:
            raise ValidationError(f"{name} must be in [0, 100], got {v}")
    pp = ta_proposed - ta_baseline
    rel = None if ta_baseline == 0 else 100.0 * pp / ta_baseline
    return Gain(gain_pp=pp, gain_rel_pct=rel)


def resolve_train_config(
    kind: str, overrides: Mapping | None, *, seed: int, threads: int
) -> TrainConfig:
    """Apply override dict on top of a head kind's default recipe.

    Flat keys (base_lr, momentum, step_size, gamma, max_epochs,
    batch_size, early_stop) apply to both kinds; nested "proposed" /
    "baseline" dicts apply to one. early_stop may be null to disable or
    {"patience": ..., "min_delta": ...}.
    """
    opts = dict(overrides or {})
    for k in (PROPOSED, BASELINE):
        sub = opts.pop(k, {})
        if k == kind:
            opts.update(sub)
    sgd = PROPOSED_SGD if kind == PROPOSED else BASELINE_SGD
    sgd_kwargs = {k: opts.pop(k) for k in ("base_lr", "momentum", "step_size", "gamma") if k in opts}
    if sgd_kwargs:
        sgd = replace(sgd, **sgd_kwargs)
    kwargs = {}
    if "early_stop" in opts:
        es = opts.pop("early_stop")
        kwargs["early_stop"] = None if es is None else EarlyStopConfig(**es)
    for k in ("max_epochs", "batch_size"):
        if k in opts:
            kwargs[k] = opts.pop(k)
    if opts:
        raise ValidationError(f"unknown train override(s): {sorted(opts)}")
    return TrainConfig(sgd=sgd, seed=seed, threads=threads, **kwargs)


_ROLE = {PROPOSED: "cls_in", BASELINE: "baseline_in"}


def _select(fs: FeatureSet, class_names, ids_per_class) -> FeatureSet:
    label_map = {}
    rows = []
    for new_idx, name in enumerate(class_names):
        orig = fs.class_names.index(name)
        label_map[orig] = new_idx
        class_rows = fs.rows_of_class(orig)
        rows.append(class_rows[ids_per_class[name]])
    return fs.take(np.concatenate(rows), list(class_names), label_map)


def _check_classes(bundle: FeatureBundle, class_names) -> dict[str, int]:
    fs = bundle.eval[_ROLE[PROPOSED]]
    sizes = {}
    missing = []
    for name in class_names:
        if name not in bundle.manifest.class_names:
            missing.append(name)
            continue
        n = int(fs.rows_of_class(bundle.manifest.class_index(name)).size)
        if n == 0:
            missing.append(name)
        else:
            sizes[name] = n
    if missing:
        raise ConfigurationError(
            f"feature bundle is missing classes: {', '.join(missing)}"
        )
    return sizes


def _build_head(approach: str, bundle: FeatureBundle, n_classes: int, rng):
    if approach == PROPOSED:
        return build_proposed_head(bundle.pretrained_classifier(), n_classes, rng)
    pen = bundle.pretrained_penultimate()
    dim = bundle.train[_ROLE[BASELINE]].dim
    return build_baseline_head(pen, dim, n_classes, rng)


def run_experiment(cfg: ExperimentConfig, bundle: FeatureBundle) -> ExperimentReport:
    """Train the configured approaches on one grid cell and aggregate.

    Repeats are averaged (sample standard deviation retained); training
    time is the median of the per-run wall clocks, with every run's value
    kept in the row.
    """
    classes = compose_experiment(cfg.kind, bundle.manifest, cfg.seed)
    sizes = _check_classes(bundle, classes.class_names)
    split = make_splits(cfg.split, sizes)

    parts = {
        part: {name: getattr(split.classes[name], f"{part}_ids") for name in classes.class_names}
        for part in ("train", "val", "test")
    }
    data = {}
    for approach in (PROPOSED, BASELINE):
        role = _ROLE[approach]
        data[approach] = (
            _select(bundle.train[role], classes.class_names, parts["train"]),
            _select(bundle.eval[role], classes.class_names, parts["val"]),
            _select(bundle.eval[role], classes.class_names, parts["test"]),
        )

    approaches = [cfg.approach] if cfg.approach != "both" else [BASELINE, PROPOSED]
    runs: dict[str, dict[str, list]] = {
        a: {"ta": [], "tt": [], "epochs": [], "params": []} for a in approaches
    }
    for r in range(cfg.repeats):
        for approach in approaches:
            run_seed = derive_seed(cfg.seed, "run", approach, r)
            rng = derive_rng(run_seed, "init")
            head = _build_head(approach, bundle, classes.n_classes, rng)
            tcfg = resolve_train_config(
                approach, cfg.train_overrides, seed=run_seed, threads=cfg.threads
            )
            train_fs, val_fs, test_fs = data[approach]
            result = train_head(head, train_fs, val_fs, tcfg)
            ta = evaluate(head, test_fs)
            rec = runs[approach]
            rec["ta"].append(ta)
            rec["tt"].append(result.train_time_s)
            rec["epochs"].append(result.epochs_run)
            rec["params"].append(result.param_count)

    row = ReportRow(
        kind_label=classes.label,
        backbone=cfg.backbone,
        n_classes=classes.n_classes,
        f=cfg.split.f,
        repeats=cfg.repeats,
        similarity_pct=_bundle_similarity(bundle, classes.class_names),
    )
    for approach in approaches:
        rec = runs[approach]
        ta_mean = float(np.mean(rec["ta"]))
        ta_std = float(np.std(rec["ta"], ddof=1)) if cfg.repeats > 1 else 0.0
        tt_med = float(np.median(rec["tt"]))
        suffix = "proposed" if approach == PROPOSED else "baseline"
        setattr(row, f"ta_{suffix}", ta_mean)
        setattr(row, f"ta_{suffix}_std", ta_std)
        setattr(row, f"tt_{suffix}_s", tt_med)
        setattr(row, f"tt_{suffix}_runs", [float(t) for t in rec["tt"]])
        setattr(row, f"epochs_{suffix}", float(np.mean(rec["epochs"])))
        setattr(row, f"params_{suffix}", int(rec["params"][0]))
    if row.ta_baseline is not None and row.ta_proposed is not None:
        gain = compute_gain(row.ta_baseline, row.ta_proposed)
        row.gain_pp = gain.gain_pp
        row.gain_rel_pct = gain.gain_rel_pct
    if row.tt_baseline_s and row.tt_proposed_s:
        row.tt_reduction_pct = 100.0 * (1.0 - row.tt_proposed_s / row.tt_baseline_s)
        row.tt_speedup = row.tt_baseline_s / row.tt_proposed_s
    return ExperimentReport(rows=[row], seed=cfg.seed, threads=cfg.threads)


def _bundle_similarity(bundle: FeatureBundle, class_names) -> float | None:
    logits = bundle.eval.get("logits")
    if logits is None or logits.dim != 1000:
        return None
    vals = []
    for name in class_names:
        rows = logits.rows_of_class(bundle.manifest.class_index(name))
        if rows.size:
            pct, _ = class_similarity(logits.data[rows, 0, :])
            vals.append(pct)
    return float(np.mean(vals)) if vals else None


def merge_reports(reports: list[ExperimentReport]) -> ExperimentReport:
    if not reports:
        raise ValidationError("no reports to merge")
    rows = [row for rep in reports for row in rep.rows]
    return ExperimentReport(rows=rows, seed=reports[0].seed, threads=reports[0].threads)


def cross_validate(
    cfg: ExperimentConfig,
    bundle: FeatureBundle,
    candidates: list[TrainConfig],
    approach: str | None = None,
) -> TrainConfig:
    """Stratified k-fold selection over the train+val pool.

    Each candidate is scored by mean held-fold accuracy; the winner is
    returned, ties broken toward the lower base learning rate.
    """
    if not candidates:
        raise ValidationError("cross_validate needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0]
    approach = approach or cfg.approach
    if approach not in (PROPOSED, BASELINE):
        raise ValidationError(
            "cross-validation tunes one head kind at a time; pass "
            "approach='proposed' or 'baseline'"
        )

    classes = compose_experiment(cfg.kind, bundle.manifest, cfg.seed)
    sizes = _check_classes(bundle, classes.class_names)
    split = make_splits(cfg.split, sizes)
    role = _ROLE[approach]

    fold_ids: list[dict[str, np.ndarray]] = [dict() for _ in range(cfg.folds)]
    for name in classes.class_names:
        cs = split.classes[name]
        pool = np.concatenate([cs.train_ids, cs.val_ids])
        if cfg.folds > pool.size:
            raise ValidationError(
                f"{cfg.folds} folds exceed the {pool.size} train+val items "
                f"of class {name!r}"
            )
        shuffled = pool[derive_rng(cfg.seed, "cv", name).permutation(pool.size)]
        for k, chunk in enumerate(np.array_split(shuffled, cfg.folds)):
            fold_ids[k][name] = np.sort(chunk)

    scores = []
    for ci, cand in enumerate(candidates):
        accs = []
        for k in range(cfg.folds):
            train_ids = {
                name: np.sort(
                    np.concatenate([fold_ids[j][name] for j in range(cfg.folds) if j != k])
                )
                for name in classes.class_names
            }
            train_fs = _select(bundle.train[role], classes.class_names, train_ids)
            val_fs = _select(bundle.eval[role], classes.class_names, fold_ids[k])
            rng = derive_rng(cfg.seed, "cv-init", ci, k)
            head = _build_head(approach, bundle, classes.n_classes, rng)
            fold_cfg = replace(cand, seed=derive_seed(cfg.seed, "cv-train", ci, k))
            train_head(head, train_fs, val_fs, fold_cfg)
            accs.append(evaluate(head, val_fs))
        scores.append(float(np.mean(accs)))

    ranked = sorted(
        range(len(candidates)), key=lambda i: (-scores[i], candidates[i].sgd.base_lr, i)
    )
    return candidates[ranked[0]]
