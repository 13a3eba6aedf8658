"""FTB1 feature container codec and the JSON manifest sidecar.

Container layout (all integers little-endian):

    magic "FTB1" | u32 version=1 | u32 tensor_count
    per tensor:
        u16 name_len | name (UTF-8)
        u32 N | u32 V | u32 D
        u8 has_labels | [N x u16 labels, if has_labels]
        N*V*D float32 payload

Pretrained head weights travel in the same container under the reserved
names fc_cls.weight/bias and fc_pen.weight/bias; a weight matrix of shape
(fan_in, fan_out) is stored as N=fan_in, V=1, D=fan_out and a bias as
N=1, V=1, D=len. A dataset directory ("bundle") holds:

    features_train.ftb   cls_in, baseline_in with the augmentation variants
    features_eval.ftb    cls_in, baseline_in, logits with V=1
    weights.ftb          the reserved pretrained tensors
    manifest.json        class/species layout, image ids, backbone
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DimOverflowError,
    FeatureFileError,
    TruncatedPayloadError,
    ValidationError,
)
from .features import FeatureBundle, FeatureSet, Manifest

MAGIC = b"FTB1"
VERSION = 1
MAX_ELEMENTS = 2**31  # tensors above this are rejected as corrupt headers

TRAIN_FILE = "features_train.ftb"
EVAL_FILE = "features_eval.ftb"
WEIGHTS_FILE = "weights.ftb"
MANIFEST_FILE = "manifest.json"


@dataclass
class TensorRecord:
    name: str
    data: np.ndarray  # (N, V, D) float32
    labels: np.ndarray | None = None  # (N,) integers < 65536

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if self.data.ndim != 3:
            raise ValidationError(f"tensor {self.name!r} must be 3-D, got {self.data.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.data.shape[0],):
                raise ValidationError(
                    f"tensor {self.name!r}: labels shape {self.labels.shape} "
                    f"does not match N={self.data.shape[0]}"
                )
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 65536):
                raise ValidationError(
                    f"tensor {self.name!r}: labels must fit in u16"
                )


def write_container(path, tensors: list[TensorRecord]) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for t in tensors:
        name = t.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValidationError(f"tensor name too long: {t.name!r}")
        n, v, d = t.data.shape
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<IIIB", n, v, d, 1 if t.labels is not None else 0))
        if t.labels is not None:
            parts.append(np.ascontiguousarray(t.labels, dtype="<u2").tobytes())
        parts.append(t.data.astype("<f4", copy=False).tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"file ends before {what}: need {n} bytes, have "
                f"{len(self.buf) - self.pos}",
                offset=self.pos,
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> list[TensorRecord]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature container {path}: {e}") from e
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = cur.unpack("<I", "version")
    if version != VERSION:
        raise FeatureFileError(f"unsupported container version {version}", offset=4)
    (count,) = cur.unpack("<I", "tensor count")
    tensors = []
    for _ in range(count):
        (name_len,) = cur.unpack("<H", "name length")
        name_off = cur.pos
        try:
            name = cur.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FeatureFileError(f"tensor name is not UTF-8: {e}", offset=name_off) from e
        dims_off = cur.pos
        n, v, d, has_labels = cur.unpack("<IIIB", "tensor header")
        if v < 1 or d < 1:
            raise FeatureFileError(
                f"tensor {name!r} has degenerate dims N={n} V={v} D={d}",
                offset=dims_off,
            )
        if n * v * d > MAX_ELEMENTS:
            raise DimOverflowError(
                f"tensor {name!r} claims {n}x{v}x{d} elements, over the "
                f"{MAX_ELEMENTS} limit",
                offset=dims_off,
            )
        labels = None
        if has_labels:
            raw = cur.take(2 * n, f"labels of {name!r}")
            labels = np.frombuffer(raw, dtype="<u2").astype(np.int64)
        payload = cur.take(4 * n * v * d, f"payload of {name!r}")
        data = np.frombuffer(payload, dtype="<f4").reshape(n, v, d).copy()
        tensors.append(TensorRecord(name, data, labels))
    return tensors


def write_featureset(path, fs: FeatureSet, manifest: Manifest | None = None) -> None:
    """One labeled tensor plus a JSON sidecar carrying the class names."""
    write_container(path, [TensorRecord(fs.name, fs.data, fs.labels)])
    if manifest is None:
        manifest = Manifest(class_names=list(fs.class_names))
    write_manifest(str(path) + ".json", manifest)


def read_featureset(path) -> FeatureSet:
    tensors = read_container(path)
    if not tensors:
        raise DataError(f"feature container {path} holds no tensors")
    t = tensors[0]
    if t.labels is None:
        raise DataError(f"tensor {t.name!r} in {path} has no labels")
    manifest = read_manifest(str(path) + ".json")
    return FeatureSet(t.name, t.data, t.labels, manifest.class_names)


def write_manifest(path, manifest: Manifest) -> None:
    doc = {
        "class_names": manifest.class_names,
        "species": manifest.species,
        "synsets": manifest.synsets,
        "image_ids": manifest.image_ids,
        "backbone": manifest.backbone,
        "normalization": manifest.normalization,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path) -> Manifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    if "class_names" not in doc:
        raise DataError(f"manifest {path} lacks class_names")
    return Manifest(
        class_names=list(doc["class_names"]),
        species={k: list(v) for k, v in (doc.get("species") or {}).items()},
        synsets=dict(doc.get("synsets") or {}),
        image_ids=doc.get("image_ids"),
        backbone=doc.get("backbone"),
        normalization=doc.get("normalization"),
    )


def _weight_record(name: str, arr: np.ndarray) -> TensorRecord:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        return TensorRecord(name, arr[:, None, :])
    return TensorRecord(name, arr[None, None, :])


def write_bundle(directory, bundle: FeatureBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_container(
        directory / TRAIN_FILE,
        [TensorRecord(fs.name, fs.data, fs.labels) for fs in bundle.train.values()],
    )
    write_container(
        directory / EVAL_FILE,
        [TensorRecord(fs.name, fs.data, fs.labels) for fs in bundle.eval.values()],
    )
    write_container(
        directory / WEIGHTS_FILE,
        [_weight_record(name, arr) for name, arr in bundle.weights.items()],
    )
    write_manifest(directory / MANIFEST_FILE, bundle.manifest)


def read_bundle(directory) -> FeatureBundle:
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST_FILE)

    def load_sets(fname) -> dict[str, FeatureSet]:
        out = {}
        for t in read_container(directory / fname):
            if t.labels is None:
                raise DataError(f"tensor {t.name!r} in {fname} has no labels")
            out[t.name] = FeatureSet(t.name, t.data, t.labels, manifest.class_names)
        return out

    weights: dict[str, np.ndarray] = {}
    for t in read_container(directory / WEIGHTS_FILE):
        if t.name.endswith(".bias"):
            weights[t.name] = t.data.reshape(-1)
        else:
            weights[t.name] = t.data[:, 0, :]
    return FeatureBundle(
        manifest=manifest,
        train=load_sets(TRAIN_FILE),
        eval=load_sets(EVAL_FILE),
        weights=weights,
    )
