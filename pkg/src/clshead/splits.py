"""Split protocol and experiment class composition.

Each class contributes fJ training images, fJ/2 validation images, and
whatever remains goes to testing (for a full class of J images that is
(1 - 3f/2)J). Shuffling is a per-class seeded permutation with the class
name hashed into the stream, so adding a class never perturbs another
class's split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import Manifest
from .seeding import derive_rng


@dataclass(frozen=True)
class SplitSpec:
    f: float  # training fraction, e.g. 0.10 / 0.20 / 0.40
    j: int = 500  # nominal images per class
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.f < 2.0 / 3.0:
            raise ValidationError(f"f must lie in (0, 2/3), got {self.f}")
        if self.j < 1:
            raise ValidationError(f"J must be >= 1, got {self.j}")
        for label, value in (("f*J", self.f * self.j), ("f*J/2", self.f * self.j / 2)):
            if abs(value - round(value)) > 1e-9 or round(value) < 1:
                raise ValidationError(
                    f"{label} must be a positive integer, got {value} "
                    f"(f={self.f}, J={self.j})"
                )

    @property
    def n_train(self) -> int:
        return round(self.f * self.j)

    @property
    def n_val(self) -> int:
        return round(self.f * self.j / 2)


@dataclass
class ClassSplit:
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray


@dataclass
class Split:
    spec: SplitSpec
    classes: dict[str, ClassSplit]


def make_splits(spec: SplitSpec, class_sizes: dict[str, int]) -> Split:
    """Partition each class's image ids into train/val/test.

    Ids are within-class indices 0..size-1. The first fJ ids of a seeded
    shuffle go to training, the next fJ/2 to validation, and the rest to
    testing, so classes with other than J images keep the protocol's
    train/val counts and simply test on everything left over.
    """
    need = spec.n_train + spec.n_val
    classes: dict[str, ClassSplit] = {}
    for name, size in class_sizes.items():
        if size < need:
            raise ValidationError(
                f"class {name!r} has {size} images but the split needs "
                f">= {need} (fJ + fJ/2)"
            )
        perm = derive_rng(spec.seed, "split", name).permutation(size)
        classes[name] = ClassSplit(
            train_ids=np.sort(perm[: spec.n_train]),
            val_ids=np.sort(perm[spec.n_train : need]),
            test_ids=np.sort(perm[need:]),
        )
    return Split(spec=spec, classes=classes)


@dataclass(frozen=True)
class AType:
    """All classes from one species: 3-, 4-, or 5-way."""

    species: str
    n_classes: int


@dataclass(frozen=True)
class BType:
    """A mixed task: per_species classes from each of the four species."""

    per_species: int = 3


@dataclass(frozen=True)
class ExperimentClasses:
    label: str  # species name, or "Mixed" for the cross-species task
    class_names: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def compose_experiment(kind, manifest: Manifest, seed: int) -> ExperimentClasses:
    """Pick the concrete class list for a task description.

    Single-species tasks take the first n classes in manifest order;
    mixed tasks draw a seeded choice of per_species classes from each of
    exactly four species (12 classes for the default 3 per species).
    """
    if isinstance(kind, AType):
        if kind.n_classes not in (3, 4, 5):
            raise ValidationError(
                f"single-species tasks use 3, 4 or 5 classes, got {kind.n_classes}"
            )
        if kind.species not in manifest.species:
            raise ValidationError(
                f"unknown species {kind.species!r}; manifest has "
                f"{sorted(manifest.species)}"
            )
        names = manifest.species[kind.species]
        if len(names) < kind.n_classes:
            raise ValidationError(
                f"species {kind.species!r} has only {len(names)} classes, "
                f"need {kind.n_classes}"
            )
        return ExperimentClasses(kind.species, tuple(names[: kind.n_classes]))
    if isinstance(kind, BType):
        if kind.per_species < 1:
            raise ValidationError("per_species must be >= 1")
        if len(manifest.species) != 4:
            raise ValidationError(
                f"mixed tasks need exactly 4 species, manifest has "
                f"{len(manifest.species)}"
            )
        chosen: list[str] = []
        for sp, names in manifest.species.items():
            if len(names) < kind.per_species:
                raise ValidationError(
                    f"species {sp!r} has only {len(names)} classes, need "
                    f"{kind.per_species}"
                )
            idx = derive_rng(seed, "btype", sp).choice(
                len(names), size=kind.per_species, replace=False
            )
            chosen.extend(names[i] for i in sorted(idx))
        return ExperimentClasses("Mixed", tuple(chosen))
    raise ValidationError(f"unknown experiment kind {kind!r}")
