"""Feature sets, the dataset bundle, and the synthetic feature generator.

A FeatureSet is the unit of exchange between the exporter side and this
engine: a named dense float32 tensor of shape (images, variants, dim)
with integer class labels. The variant axis carries pre-exported
augmentation snapshots of each training image; validation and test
features always have a single variant (center crop only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .layers import AffineParams, affine_forward, init_uniform
from .seeding import derive_rng, make_rng

PAPER_SPECIES = ("Bird", "Fruit", "Flower", "Pepper")


@dataclass
class FeatureSet:
    name: str
    data: np.ndarray  # (n_images, n_variants, dim) float32
    labels: np.ndarray  # (n_images,) int
    class_names: list[str]

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if self.data.ndim != 3:
            raise ValidationError(
                f"feature data must be (images, variants, dim), got {self.data.shape}"
            )
        if self.data.shape[1] < 1:
            raise ValidationError("variant axis must have length >= 1")
        self.labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if self.labels.ndim != 1 or self.labels.shape[0] != self.data.shape[0]:
            raise ValidationError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.data.shape[0]} images"
            )
        self.class_names = list(self.class_names)
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= len(self.class_names)
        ):
            raise ValidationError(
                f"labels must lie in [0, {len(self.class_names)})"
            )
        if not np.isfinite(self.data).all():
            raise ValidationError(f"feature set {self.name!r} contains non-finite values")

    @property
    def n_images(self) -> int:
        return self.data.shape[0]

    @property
    def n_variants(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def rows_of_class(self, class_index: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_index)

    def take(self, rows, class_names: list[str], label_map: dict[int, int]) -> "FeatureSet":
        """Subset by absolute row indices, remapping labels onto a new class list."""
        rows = np.asarray(rows, dtype=np.int64)
        labels = np.array([label_map[int(l)] for l in self.labels[rows]], dtype=np.int64)
        return FeatureSet(self.name, self.data[rows].copy(), labels, list(class_names))


@dataclass
class Manifest:
    """Sidecar description of a feature container: class/species layout,
    source image ids in payload order, and the backbone that produced it."""

    class_names: list[str]
    species: dict[str, list[str]] = field(default_factory=dict)
    synsets: dict[str, str] = field(default_factory=dict)
    image_ids: list[str] | None = None
    backbone: str | None = None
    normalization: dict | None = None

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("manifest class names must be unique")
        for sp, names in self.species.items():
            unknown = [n for n in names if n not in self.class_names]
            if unknown:
                raise ValidationError(
                    f"species {sp!r} lists classes missing from class_names: {unknown}"
                )

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class {name!r}") from None

    def species_of(self, class_name: str) -> str | None:
        for sp, names in self.species.items():
            if class_name in names:
                return sp
        return None


@dataclass
class FeatureBundle:
    """Everything one experiment needs: augmented training features,
    center-crop evaluation features, and the pretrained head weights.

    ``train`` and ``eval`` map role names ("cls_in", "baseline_in", and for
    eval also "logits") to FeatureSets over the same images in the same
    order. ``weights`` holds the reserved pretrained tensors
    (fc_cls.weight/bias, and for 4096-wide backbones fc_pen.weight/bias).
    """

    manifest: Manifest
    train: dict[str, FeatureSet]
    eval: dict[str, FeatureSet]
    weights: dict[str, np.ndarray]

    def pretrained_classifier(self) -> AffineParams:
        if "fc_cls.weight" not in self.weights:
            raise ValidationError("bundle has no fc_cls.* pretrained tensors")
        return AffineParams(self.weights["fc_cls.weight"], self.weights["fc_cls.bias"])

    def pretrained_penultimate(self) -> AffineParams | None:
        if "fc_pen.weight" not in self.weights:
            return None
        return AffineParams(self.weights["fc_pen.weight"], self.weights["fc_pen.bias"])


def synth_features(
    n_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    *,
    class_names: list[str] | None = None,
    name: str = "synth",
) -> FeatureSet:
    """Gaussian clusters standing in for exported CNN features.

    Class c is drawn from an isotropic unit-variance Gaussian centered at
    separation * u_c, the u_c being orthonormal seeded directions. With
    separation 0 the classes are indistinguishable; around 10 they are
    linearly separable with a wide margin. Single variant.
    """
    if n_classes < 1 or per_class < 1 or dim < 1:
        raise ValidationError("n_classes, per_class and dim must all be >= 1")
    if dim < n_classes:
        raise ValidationError(
            f"orthonormal centers need dim >= n_classes, got {dim} < {n_classes}"
        )
    if class_names is None:
        class_names = [f"class_{c}" for c in range(n_classes)]
    if len(class_names) != n_classes:
        raise ValidationError("class_names length must equal n_classes")
    rng = make_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    n = n_classes * per_class
    data = rng.standard_normal((n, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    data += separation * basis.T[labels]
    return FeatureSet(name, data[:, None, :], labels, class_names)


def synth_pretrained(
    feature_dim: int, seed: int, *, with_penultimate: bool
) -> dict[str, np.ndarray]:
    """Stand-in pretrained head tensors under the reserved names."""
    rng = derive_rng(seed, "pretrained")
    out: dict[str, np.ndarray] = {}
    if with_penultimate:
        pen = init_uniform(feature_dim, feature_dim, rng)
        out["fc_pen.weight"] = pen.weight
        out["fc_pen.bias"] = pen.bias
    cls = init_uniform(feature_dim, 1000, rng)
    out["fc_cls.weight"] = cls.weight
    out["fc_cls.bias"] = cls.bias
    return out


def default_species_layout(
    species: tuple[str, ...] = PAPER_SPECIES, classes_per_species: int = 5
) -> dict[str, list[str]]:
    return {
        sp: [f"{sp.lower()}_{i}" for i in range(classes_per_species)] for sp in species
    }


def synth_bundle(
    per_class: int,
    dim: int,
    seed: int,
    *,
    species_separation: dict[str, float] | None = None,
    separation: float = 3.0,
    species: dict[str, list[str]] | None = None,
    with_penultimate: bool = True,
    variants: int = 1,
    variant_noise: float = 0.1,
    backbone: str = "synthetic",
) -> FeatureBundle:
    """Self-contained synthetic dataset in the exporter's bundle layout.

    Four species of five classes each by default; a per-species separation
    lets the species mimic decreasing similarity tiers. The same features
    serve as classifier input and baseline input, a seeded uniform
    classifier provides the 1000-way logits, and extra variants (if any)
    are noisy copies standing in for augmentation snapshots.
    """
    if species is None:
        species = default_species_layout()
    class_names = [c for names in species.values() for c in names]
    n_classes = len(class_names)
    if dim < n_classes:
        raise ValidationError(
            f"orthonormal centers need dim >= {n_classes} classes, got {dim}"
        )
    if variants < 1:
        raise ValidationError("variants must be >= 1")

    rng = derive_rng(seed, "features")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    sep = np.empty(n_classes)
    for sp, names in species.items():
        s = separation if species_separation is None else species_separation[sp]
        for cname in names:
            sep[class_names.index(cname)] = s
    n = n_classes * per_class
    labels = np.repeat(np.arange(n_classes), per_class)
    base = rng.standard_normal((n, dim)) + sep[labels, None] * basis.T[labels]

    data = np.empty((n, variants, dim), dtype=np.float32)
    data[:, 0, :] = base
    for v in range(1, variants):
        data[:, v, :] = base + variant_noise * rng.standard_normal((n, dim))

    weights = synth_pretrained(dim, seed, with_penultimate=with_penultimate)
    manifest = Manifest(
        class_names=class_names,
        species={sp: list(names) for sp, names in species.items()},
        image_ids=[f"synth/{class_names[l]}/{i:05d}" for i, l in enumerate(labels)],
        backbone=backbone,
    )
    train_cls = FeatureSet("cls_in", data, labels, class_names)
    eval_cls = FeatureSet("cls_in", data[:, :1, :].copy(), labels, class_names)
    fc_cls = AffineParams(weights["fc_cls.weight"], weights["fc_cls.bias"])
    logits = affine_forward(eval_cls.data[:, 0, :], fc_cls)
    return FeatureBundle(
        manifest=manifest,
        train={
            "cls_in": train_cls,
            "baseline_in": FeatureSet("baseline_in", data, labels, class_names),
        },
        eval={
            "cls_in": eval_cls,
            "baseline_in": FeatureSet(
                "baseline_in", data[:, :1, :].copy(), labels, class_names
            ),
            "logits": FeatureSet("logits", logits[:, None, :], labels, class_names),
        },
        weights=weights,
    )
