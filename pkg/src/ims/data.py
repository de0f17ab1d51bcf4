"""Datasets, backdoor triggers, poisoning and attacker-side training.

The synthetic generator draws procedural texture classes (bars at several
orientations, blobs, rings, checkers, crosses) with per-sample jitter and
Gaussian noise.  Pattern intensities stay below 0.85, so a saturated patch
trigger is not something the clean data ever contains.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import IdxCountMismatchError, IdxMagicError, IdxTruncatedError, TrainingError
from .model import MaskableModel, ModelSpec, predict
from .optimize import AdamW

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_FORMAT = "ims-data-1"

_FAMILIES = ("hbars", "vbars", "diag", "antidiag", "blob", "ring", "checker", "cross")


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    poisoned: np.ndarray
    num_classes: int
    provenance: str = "clean"
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        poisoned = np.asarray(self.poisoned, dtype=bool)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if not (len(images) == len(labels) == len(poisoned)):
            raise ValueError("images, labels and poison flags differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        index = self.source_index
        if index is None:
            index = np.arange(len(labels))
        index = np.asarray(index, dtype=np.int64)
        for arr in (images, labels, poisoned, index):
            arr.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "poisoned", poisoned)
        object.__setattr__(self, "source_index", index)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            poisoned=self.poisoned[idx],
            source_index=self.source_index[idx],
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------- synthetic data

def _pattern(family: str, variant: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = 4 + 2 * variant
    phase = rng.uniform(0, period)
    if family == "hbars":
        img = ((yy + phase) % period) < period / 2
    elif family == "vbars":
        img = ((xx + phase) % period) < period / 2
    elif family == "diag":
        img = ((xx + yy + phase) % period) < period / 2
    elif family == "antidiag":
        img = ((xx - yy + phase) % period) < period / 2
    elif family == "checker":
        cell = 2 + variant
        oy, ox = rng.integers(0, cell, size=2)
        img = (((yy + oy) // cell + (xx + ox) // cell) % 2) == 0
    else:
        c = (size - 1) / 2 + rng.uniform(-size / 8, size / 8, size=2)
        r = np.hypot(yy - c[0], xx - c[1])
        if family == "blob":
            img = np.exp(-(r ** 2) / (2 * (size / (6 + 2 * variant)) ** 2))
            return img
        if family == "ring":
            radius = size / 4 + variant
            return np.exp(-((r - radius) ** 2) / 2.0)
        # cross
        width = 1.0 + 0.5 * variant
        img = (np.abs(yy - c[0]) < width) | (np.abs(xx - c[1]) < width)
    return img.astype(np.float64)


def generate_synthetic(
    classes: int,
    per_class: int,
    size: int = 16,
    seed: int = 0,
    channels: int = 1,
    noise: float = 0.08,
) -> LabeledDataset:
    """``classes * per_class`` procedurally drawn images, class-sorted.

    Classes beyond the eight base families reuse a family with a different
    period/scale.  Output is a deterministic function of the arguments.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if size < 8:
        raise ValueError(f"image size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    colour_rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    tints = 0.6 + 0.4 * colour_rng.random((classes, channels))
    images = np.empty((classes * per_class, channels, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        family = _FAMILIES[c % len(_FAMILIES)]
        variant = c // len(_FAMILIES)
        for j in range(per_class):
            base = _pattern(family, variant, size, rng)
            contrast = rng.uniform(0.5, 0.75)
            img = 0.1 + contrast * base
            img = img[None] * (tints[c][:, None, None] if channels > 1 else 1.0)
            img = img + rng.normal(0.0, noise, size=img.shape)
            images[c * per_class + j] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, np.zeros(len(labels), bool), classes)


def split_per_class(dataset: LabeledDataset, counts: dict, seed: int = 0) -> dict:
    """Partition each class into disjoint named parts of the given sizes."""
    rng = np.random.default_rng(seed)
    parts = {name: [] for name in counts}
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        need = sum(counts.values())
        if len(idx) < need:
            raise ValueError(f"class {c} has {len(idx)} samples, split needs {need}")
        start = 0
        for name, n in counts.items():
            parts[name].append(idx[start:start + n])
            start += n
    return {name: dataset.subset(np.sort(np.concatenate(chunks))) for name, chunks in parts.items()}


# ---------------------------------------------------------------- IDX ingestion

def _read_header(buf: bytes, path, magic: int, ndim: int) -> tuple:
    if len(buf) < 4 * (1 + ndim):
        raise IdxTruncatedError(f"{path}: header truncated ({len(buf)} bytes)")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise IdxMagicError(path, magic, found)
    return struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair; pixels scaled to [0, 1]."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _read_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{images_path} holds {n_img} images, {labels_path} holds {n_lab} labels")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16)
    if pixels.size < n_img * rows * cols:
        raise IdxTruncatedError(f"{images_path}: {pixels.size} pixel bytes, header promises {n_img * rows * cols}")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8)
    if labels.size < n_lab:
        raise IdxTruncatedError(f"{labels_path}: {labels.size} label bytes, header promises {n_lab}")
    images = pixels[: n_img * rows * cols].reshape(n_img, 1, rows, cols).astype(np.float32) / 255.0
    labels = labels[:n_lab].astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1) if n_lab else 2
    return LabeledDataset(images, labels, np.zeros(n_img, bool), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------- dataset cache

def _cache_paths(path) -> tuple:
    path = Path(path)
    name = path.name.replace(".manifest.json", "").replace(".bin", "")
    return path.with_name(name + ".manifest.json"), path.with_name(name + ".bin")


def save_dataset(dataset: LabeledDataset, path) -> Path:
    manifest_path, payload_path = _cache_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [
        ("images", dataset.images),
        ("labels", dataset.labels),
        ("poisoned", dataset.poisoned),
        ("source_index", dataset.source_index),
    ]
    manifest = {
        "format": DATA_FORMAT,
        "endianness": "little",
        "dtype": "float32",
        "num_classes": dataset.num_classes,
        "provenance": dataset.provenance,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    payload_path.write_bytes(b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays))
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def load_dataset(path) -> LabeledDataset:
    manifest_path, payload_path = _cache_paths(path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != DATA_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    flat = np.frombuffer(payload_path.read_bytes(), dtype="<f4")
    need = sum(int(np.prod(a["shape"])) for a in manifest["arrays"])
    if flat.size != need:
        raise ValueError(f"{payload_path}: {flat.size} values, manifest declares {need}")
    out, offset = {}, 0
    for a in manifest["arrays"]:
        n = int(np.prod(a["shape"]))
        out[a["name"]] = flat[offset:offset + n].reshape(a["shape"])
        offset += n
    return LabeledDataset(
        out["images"].astype(np.float32),
        out["labels"].astype(np.int64),
        out["poisoned"].astype(bool),
        manifest["num_classes"],
        manifest["provenance"],
        out["source_index"].astype(np.int64),
    )


# ---------------------------------------------------------------- triggers

_CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "patch"
    target: int = 0
    size: int = 3
    corner: str = "bottom-right"
    fill: float = 1.0
    alpha: float = 0.2
    pattern: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("patch", "blend"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "patch":
            if self.corner not in _CORNERS:
                raise ValueError(f"corner must be one of {_CORNERS}, got {self.corner!r}")
            if self.size < 1:
                raise ValueError(f"patch size must be >= 1, got {self.size}")
            if not 0.0 <= self.fill <= 1.0:
                raise ValueError(f"patch fill must be in [0, 1], got {self.fill}")
        else:
            # the endpoints are accepted so identity/replacement blends can be expressed
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError(f"blend alpha must be in [0, 1], got {self.alpha}")
            if self.pattern is None:
                raise ValueError("blend trigger needs a pattern")

    @classmethod
    def blend(cls, image_shape: tuple, alpha: float = 0.2, target: int = 0, seed: int = 0) -> "TriggerSpec":
        """Blend trigger with a seeded uniform-noise pattern."""
        pattern = np.random.default_rng(seed).random(image_shape).astype(np.float32)
        return cls(kind="blend", target=target, alpha=alpha, pattern=pattern)

    def check_fits(self, image_shape: tuple) -> None:
        _, h, w = image_shape
        if self.kind == "patch" and (self.size > h or self.size > w):
            raise ValueError(f"{self.size}x{self.size} patch does not fit {h}x{w} images")
        if self.kind == "blend" and tuple(self.pattern.shape) != tuple(image_shape):
            raise ValueError(f"blend pattern {self.pattern.shape} does not match images {image_shape}")


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Return a triggered copy of the batch ``x`` (N, C, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    trigger.check_fits(x.shape[1:])
    out = x.copy()
    if trigger.kind == "patch":
        n = trigger.size
        rows = slice(-n, None) if trigger.corner.startswith("bottom") else slice(0, n)
        cols = slice(-n, None) if trigger.corner.endswith("right") else slice(0, n)
        out[:, :, rows, cols] = trigger.fill
        return out
    if trigger.alpha == 0.0:
        return out
    if trigger.alpha == 1.0:
        return np.broadcast_to(trigger.pattern, x.shape).astype(np.float32)
    blended = (1.0 - trigger.alpha) * x + trigger.alpha * trigger.pattern
    return np.clip(blended, 0.0, 1.0).astype(np.float32)


def poison(dataset: LabeledDataset, trigger: TriggerSpec, ratio: float, seed: int = 0) -> LabeledDataset:
    """Trigger and relabel ``floor(ratio * N)`` non-target samples.

    Already-flagged samples count toward the quota and are never
    re-triggered, so poisoning twice at the same ratio changes nothing.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"poisoning ratio must be in [0, 1], got {ratio}")
    trigger.check_fits(dataset.image_shape)
    if not 0 <= trigger.target < dataset.num_classes:
        raise ValueError(f"target class {trigger.target} outside [0, {dataset.num_classes})")
    quota = int(math.floor(ratio * len(dataset) + 1e-9))
    need = quota - int(dataset.poisoned.sum())
    if need <= 0:
        return dataset
    eligible = np.flatnonzero((dataset.labels != trigger.target) & ~dataset.poisoned)
    if len(eligible) < need:
        raise ValueError(f"only {len(eligible)} non-target samples available, ratio needs {need}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=need, replace=False))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    flags = dataset.poisoned.copy()
    images[chosen] = apply_trigger(images[chosen], trigger)
    labels[chosen] = trigger.target
    flags[chosen] = True
    return replace(dataset, images=images, labels=labels, poisoned=flags, provenance="poisoned")


@dataclass(frozen=True)
class DefenderSplit:
    mitigation: LabeledDataset
    clean_test: LabeledDataset
    triggered_test: LabeledDataset


def make_defender_split(
    pool: LabeledDataset, test: LabeledDataset, trigger: TriggerSpec, spc: int, seed: int = 0
) -> DefenderSplit:
    """Draw ``spc`` clean samples per class from ``pool`` as the mitigation set."""
    if spc < 1:
        raise ValueError(f"SPC must be >= 1, got {spc}")
    shared = np.intersect1d(pool.source_index, test.source_index)
    if shared.size:
        raise ValueError(f"defender pool overlaps the test set on {shared.size} samples")
    counts = pool.class_counts()
    if counts.min() < spc:
        raise ValueError(f"SPC={spc} exceeds the per-class pool size ({counts.min()})")
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(np.flatnonzero(pool.labels == c), size=spc, replace=False) for c in range(pool.num_classes)]
    mitigation = pool.subset(np.sort(np.concatenate(chosen)))
    triggered = replace(test, images=apply_trigger(test.images, trigger), provenance="poisoned",
                        poisoned=np.ones(len(test), bool))
    return DefenderSplit(mitigation, test, triggered)


# ---------------------------------------------------------------- training

def cross_entropy(logit: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logit.shape[1], dtype=logit.dtype)[labels]
    picked = ad.sum(ad.mul(ad.log_softmax(logit, axis=1), Tensor(onehot)), axis=1)
    return ad.neg(ad.mean(picked))


def accuracy(fn, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty set")
    return float((predict(fn, x) == y).mean())


@dataclass
class TrainingLog:
    epoch_loss: list = field(default_factory=list)
    epoch_acc: list = field(default_factory=list)


def train_backdoored(
    spec: ModelSpec,
    dataset: LabeledDataset,
    epochs: int = 15,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
    weight_decay: float = 0.0,
) -> tuple:
    """Cross-entropy training with AdamW; returns ``(model, TrainingLog)``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.image_shape != spec.input_shape:
        raise ValueError(f"dataset images {dataset.image_shape} do not match model input {spec.input_shape}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    model = MaskableModel.init(spec, seed=seed)
    model.requires_grad_(True)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    log = TrainingLog()
    x_all, y_all = dataset.images, dataset.labels
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            out = model.logits(Tensor(x_all[idx]))
            loss = cross_entropy(out, y_all[idx])
            value = loss.item()
            if not np.isfinite(value):
                model.requires_grad_(False)
                raise TrainingError(epoch, value)
            ad.backward(loss)
            opt.step()
            total += value * len(idx)
            correct += int((out.data.argmax(axis=1) == y_all[idx]).sum())
        log.epoch_loss.append(total / len(dataset))
        log.epoch_acc.append(correct / len(dataset))
        logger.info("epoch %d loss %.4f acc %.4f", epoch, log.epoch_loss[-1], log.epoch_acc[-1])
    model.requires_grad_(False)
    return model, log
