"""Similarity of new classes to the 1000 pretrained classes.

The measurement is a confidence proxy: for each image of a new class,
take the maximum softmax probability the pretrained network assigns over
its 1000 classes; the class's similarity percentage is 100x the mean of
those maxima, and the nearest pretrained class is the most frequent
per-image argmax. Bounded in [0.1, 100] for 1000-way logits (uniform
softmax gives 0.1%).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import FeatureSet, Manifest

N_PRETRAINED = 1000
HISTOGRAM_BINS = 10


def _max_probs(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.max(axis=1), probs.argmax(axis=1)


def class_similarity(logits: FeatureSet | np.ndarray) -> tuple[float, int]:
    """(similarity percent, nearest pretrained class) for one class's logits."""
    if isinstance(logits, FeatureSet):
        if logits.n_variants != 1:
            raise ValidationError("similarity expects single-variant logits")
        arr = logits.data[:, 0, :]
    else:
        arr = np.asarray(logits, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != N_PRETRAINED:
        raise ValidationError(
            f"similarity needs (images, {N_PRETRAINED}) logits, got {arr.shape}"
        )
    if arr.shape[0] < 1:
        raise ValidationError("similarity needs at least one image")
    pmax, argmax = _max_probs(arr)
    nearest = int(np.bincount(argmax, minlength=N_PRETRAINED).argmax())
    return float(100.0 * pmax.mean()), nearest


@dataclass
class ClassSimilarity:
    similarity_pct: float
    nearest_pretrained_class: int
    histogram: list[int]  # per-image max-confidence counts over 10 bins of [0, 1]


@dataclass
class SimilarityReport:
    classes: dict[str, ClassSimilarity]
    species_mean: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "classes": {
                name: {
                    "similarity_pct": cs.similarity_pct,
                    "nearest_pretrained_class": cs.nearest_pretrained_class,
                    "histogram": cs.histogram,
                }
                for name, cs in self.classes.items()
            },
            "species_mean": dict(self.species_mean),
        }


def build_similarity_report(logits: FeatureSet, manifest: Manifest) -> SimilarityReport:
    """Per-class similarity plus arithmetic per-species means."""
    classes: dict[str, ClassSimilarity] = {}
    for ci, name in enumerate(logits.class_names):
        rows = logits.rows_of_class(ci)
        if rows.size == 0:
            continue
        arr = logits.data[rows, 0, :]
        pct, nearest = class_similarity(arr)
        pmax, _ = _max_probs(arr)
        hist, _ = np.histogram(pmax, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
        classes[name] = ClassSimilarity(pct, nearest, hist.tolist())
    species_mean: dict[str, float] = {}
    for sp, names in manifest.species.items():
        vals = [classes[n].similarity_pct for n in names if n in classes]
        if vals:
            species_mean[sp] = float(np.mean(vals))
    return SimilarityReport(classes=classes, species_mean=species_mean)
