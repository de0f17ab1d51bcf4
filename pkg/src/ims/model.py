"""Maskable convolutional classifiers and their checkpoint format.

A model is a stack of ``conv -> relu -> [mask] -> [max_pool]`` blocks
followed by ``linear -> relu`` hidden layers and a final linear layer.  The
channel mask of block ``l`` multiplies the post-ReLU activation map, so a
mask entry of 0 removes that channel from everything downstream.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeError,
)

CHECKPOINT_FORMAT = "ims-ckpt-1"
MASK_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    padding: str = "same"
    pool: Optional[int] = 2


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    convs: tuple
    hidden: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(
            self, "convs", tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs)
        )
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if not self.convs:
            raise ValueError("a maskable model needs at least one conv layer")
        for i, c in enumerate(self.convs):
            if c.out_channels < 2:
                raise ValueError(f"conv{i}: out_channels must be >= 2, got {c.out_channels}")
            if c.padding not in ("same", "valid"):
                raise ValueError(f"conv{i}: unknown padding {c.padding!r}")
        self.conv_output_shapes()  # raises on impossible geometry

    @classmethod
    def tiny_cnn(cls, input_shape=(1, 16, 16), num_classes=8) -> "ModelSpec":
        """Reference toy architecture with two maskable conv layers."""
        return cls(
            input_shape=input_shape,
            convs=(ConvSpec(16, 3, "same", 2), ConvSpec(32, 3, "same", 2)),
            hidden=(64,),
            num_classes=num_classes,
        )

    def conv_output_shapes(self) -> list:
        c, h, w = self.input_shape
        shapes = []
        for i, conv in enumerate(self.convs):
            if conv.padding == "valid":
                h, w = h - conv.kernel + 1, w - conv.kernel + 1
            elif conv.kernel % 2 == 0:
                raise ValueError(f"conv{i}: 'same' padding needs an odd kernel")
            if h < 1 or w < 1:
                raise ValueError(f"conv{i}: kernel {conv.kernel} too large for input")
            if conv.pool:
                if h % conv.pool or w % conv.pool:
                    raise ValueError(f"conv{i}: pool {conv.pool} does not divide {h}x{w}")
                h, w = h // conv.pool, w // conv.pool
            c = conv.out_channels
            shapes.append((c, h, w))
        return shapes

    @property
    def feature_size(self) -> int:
        c, h, w = self.conv_output_shapes()[-1]
        return c * h * w

    @property
    def layer_channels(self) -> list:
        return [c.out_channels for c in self.convs]

    def parameter_shapes(self) -> dict:
        shapes = {}
        cin = self.input_shape[0]
        for i, conv in enumerate(self.convs):
            shapes[f"conv{i}.weight"] = (conv.out_channels, cin, conv.kernel, conv.kernel)
            shapes[f"conv{i}.bias"] = (conv.out_channels,)
            cin = conv.out_channels
        width = self.feature_size
        for i, h in enumerate(self.hidden):
            shapes[f"fc{i}.weight"] = (width, h)
            shapes[f"fc{i}.bias"] = (h,)
            width = h
        shapes["out.weight"] = (width, self.num_classes)
        shapes["out.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            convs=tuple(ConvSpec(**c) for c in d["convs"]),
            hidden=tuple(d.get("hidden", ())),
            num_classes=int(d["num_classes"]),
        )


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MaskableModel:
    """Parameters of a :class:`ModelSpec` plus optional baked channel scales.

    ``baked_masks`` (one vector per conv layer) are applied on every forward
    pass; a defended model is the backdoored parameters plus these scales.
    """

    def __init__(self, spec: ModelSpec, params: dict, baked_masks: Optional[list] = None):
        expected = spec.parameter_shapes()
        if list(params) != list(expected):
            raise ValueError(f"parameter names {list(params)} do not match spec {list(expected)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: shape {params[name].shape}, spec expects {shape}")
        self.spec = spec
        self.params = params
        self.baked_masks = None
        if baked_masks is not None:
            self.baked_masks = [np.asarray(m, dtype=np.float32) for m in baked_masks]
            _check_masks(self.baked_masks, spec.layer_channels)

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0, dtype=np.float32) -> "MaskableModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in spec.parameter_shapes().items():
            if name.endswith(".bias"):
                data = np.zeros(shape)
            elif len(shape) == 4:
                data = _kaiming_uniform(rng, shape, shape[1] * shape[2] * shape[3])
            else:
                data = _kaiming_uniform(rng, shape, shape[0])
            params[name] = Tensor(data.astype(dtype))
        return cls(spec, params)

    @property
    def layer_channels(self) -> list:
        return self.spec.layer_channels

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameters(self) -> list:
        return list(self.params.items())

    def requires_grad_(self, flag: bool = True) -> "MaskableModel":
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def copy(self) -> "MaskableModel":
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        baked = copy.deepcopy(self.baked_masks)
        return MaskableModel(self.spec, params, baked)

    def without_masks(self) -> "MaskableModel":
        """Same parameters (shared, not copied), no baked scales."""
        return MaskableModel(self.spec, self.params)

    def with_baked_masks(self, masks: Sequence) -> "MaskableModel":
        arrays = [np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float32) for m in masks]
        return MaskableModel(self.spec, self.params, arrays)

    def logits(self, x, masks: Optional[Sequence] = None, record: Optional[dict] = None) -> Tensor:
        return logits(self, x, masks, record)

    def forward(self, x, masks: Optional[Sequence] = None, record: Optional[dict] = None) -> Tensor:
        return forward(self, x, masks, record)

    __call__ = forward


def _check_masks(masks: Sequence, channels: Sequence) -> None:
    if len(masks) != len(channels):
        raise ShapeError(f"expected {len(channels)} layer masks, got {len(masks)}")
    for i, (m, c) in enumerate(zip(masks, channels)):
        data = m.data if isinstance(m, Tensor) else np.asarray(m)
        if data.shape != (c,):
            raise ShapeError(f"mask for conv{i} has shape {data.shape}, expected ({c},)")
        if data.size and (data.min() < -MASK_TOLERANCE or data.max() > 1 + MASK_TOLERANCE):
            raise ValueError(
                f"mask for conv{i} has entries outside [0, 1]: "
                f"min={data.min():.6g}, max={data.max():.6g}"
            )


def logits(model: MaskableModel, x, masks: Optional[Sequence] = None, record: Optional[dict] = None) -> Tensor:
    """Pre-softmax outputs.  ``record`` (if given) collects activations."""
    spec = model.spec
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match (B, {spec.input_shape})")
    if masks is not None:
        _check_masks(masks, spec.layer_channels)
    p = model.params
    h = x
    for i, conv in enumerate(spec.convs):
        h = ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=conv.padding)
        h = ad.relu(h)
        if record is not None:
            record[f"conv{i}"] = h
        if model.baked_masks is not None:
            h = ad.channel_scale(h, Tensor(model.baked_masks[i], dtype=h.dtype))
        if masks is not None:
            m = masks[i] if isinstance(masks[i], Tensor) else Tensor(masks[i], dtype=h.dtype)
            h = ad.channel_scale(h, m)
        if record is not None:
            record[f"conv{i}.masked"] = h
        if conv.pool:
            h = ad.max_pool(h, conv.pool)
    h = ad.reshape(h, (h.shape[0], -1))
    for i in range(len(spec.hidden)):
        h = ad.relu(ad.add(ad.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"]))
    return ad.add(ad.matmul(h, p["out.weight"]), p["out.bias"])


def forward(model: MaskableModel, x, masks: Optional[Sequence] = None, record: Optional[dict] = None) -> Tensor:
    """Softmax class probabilities, shape ``(batch, num_classes)``."""
    return ad.softmax(logits(model, x, masks, record), axis=1)


def predict(fn, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Arg-max labels of ``fn(x)`` computed in batches without recording."""
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(fn(Tensor(x[i:i + batch_size])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- checkpoints

def _paths(path) -> tuple:
    path = Path(path)
    name = path.name
    for suffix in (".manifest.json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    base = path.with_name(name)
    return base.with_name(name + ".manifest.json"), base.with_name(name + ".bin")


def save_checkpoint(model: MaskableModel, path) -> Path:
    """Write ``<path>.manifest.json`` and ``<path>.bin``; return the manifest path."""
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.shape)})
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    if model.baked_masks is not None:
        for i, m in enumerate(model.baked_masks):
            entries.append({"name": f"scale.conv{i}", "shape": list(m.shape)})
            chunks.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "endianness": "little",
        "dtype": "float32",
        "spec": model.spec.to_dict(),
        "parameters": entries,
        "baked_masks": model.baked_masks is not None,
    }
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def load_checkpoint(path) -> MaskableModel:
    manifest_path, payload_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    version = manifest.get("format")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{manifest_path}: format {version!r}, expected {CHECKPOINT_FORMAT!r}")
    if manifest.get("endianness", "little") != "little" or manifest.get("dtype", "float32") != "float32":
        raise CheckpointVersionError(f"{manifest_path}: only little-endian float32 payloads are supported")
    try:
        spec = ModelSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{manifest_path}: bad model spec ({exc})") from exc

    expected = dict(spec.parameter_shapes())
    if manifest.get("baked_masks"):
        for i, c in enumerate(spec.layer_channels):
            expected[f"scale.conv{i}"] = (c,)
    declared = [(e["name"], tuple(e["shape"])) for e in manifest["parameters"]]
    if [n for n, _ in declared] != list(expected):
        raise CheckpointShapeError(
            f"{manifest_path}: parameter list {[n for n, _ in declared]} disagrees with spec"
        )
    for name, shape in declared:
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"{manifest_path}: {name} declared {shape}, spec implies {expected[name]}"
            )

    payload = payload_path.read_bytes()
    need = 4 * sum(int(np.prod(s)) for _, s in declared)
    if len(payload) < need:
        raise CheckpointTruncatedError(f"{payload_path}: {len(payload)} bytes, manifest needs {need}")
    if len(payload) > need:
        raise CheckpointShapeError(f"{payload_path}: {len(payload)} bytes, manifest declares only {need}")

    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    offset = 0
    for name, shape in declared:
        n = int(np.prod(shape))
        arrays[name] = flat[offset:offset + n].reshape(shape).astype(np.float32)
        offset += n
    params = {name: Tensor(arrays[name]) for name in spec.parameter_shapes()}
    baked = None
    if manifest.get("baked_masks"):
        baked = [arrays[f"scale.conv{i}"] for i in range(len(spec.convs))]
    return MaskableModel(spec, params, baked)


def parameter_bytes(model: MaskableModel) -> bytes:
    """Concatenated raw parameter bytes (for byte-identity checks)."""
    return b"".join(np.ascontiguousarray(t.data).tobytes() for t in model.params.values())
