"""Model assembly, named feature taps, and checkpoint persistence.

A Model is an ordered layer list over a named parameter store. The
classifier family is conv/relu/pool stacks followed by fully connected
layers; the first fully connected layer exposes the feature tap "fc1"
used for embedding-space distance work. Checkpoints are a small custom
binary container (magic "BSLB") holding a JSON header plus raw
little-endian float64 parameter blobs, so round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .errors import (
    BadMagicError,
    DimensionError,
    FileFormatError,
    TruncatedError,
    ValidationError,
    VersionMismatchError,
)

CHECKPOINT_MAGIC = b"BSLB"
CHECKPOINT_VERSION = 1

__all__ = [
    "Model",
    "build_small_cnn",
    "forward_logits",
    "extract_features",
    "extract_features_batched",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class Conv:
    weight: str
    bias: str
    stride: int
    padding: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    weight: str
    bias: str


class Model:
    """Ordered layers + parameter store + named feature taps.

    ``feature_taps`` maps a tap name to a layer index; the tap value is
    that layer's output. Parameters are mutated only by training code;
    inference is read-only and safe to run concurrently.
    """

    def __init__(self, input_shape, layers, params, feature_taps, arch, metadata=None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.params: dict[str, ad.Tensor] = dict(params)
        self.feature_taps = dict(feature_taps)
        self.arch = dict(arch)
        self.metadata = dict(metadata) if metadata else {"training": "untrained", "epsilon": None}
        self._check_wiring()

    # ------------------------------------------------------------- wiring

    def _check_wiring(self) -> None:
        for name, idx in self.feature_taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValidationError(f"tap {name!r} points at layer {idx}, have {len(self.layers)}")
        shape = self.input_shape  # (C, H, W) without the batch axis
        for layer in self.layers:
            shape = self._shape_after(layer, shape)
        if len(shape) != 1:
            raise DimensionError(f"model must end in logits, final shape {shape}")
        self.num_classes = shape[0]

    def _shape_after(self, layer, shape):
        if isinstance(layer, Conv):
            w = self.params[layer.weight]
            f, c, kh, kw = w.shape
            if len(shape) != 3 or shape[0] != c:
                raise DimensionError(f"conv expects {c} channels, got shape {shape}")
            h = (shape[1] + 2 * layer.padding - kh) // layer.stride + 1
            wd = (shape[2] + 2 * layer.padding - kw) // layer.stride + 1
            if h < 1 or wd < 1:
                raise DimensionError(f"conv kernel {kh}x{kw} too large for {shape}")
            return (f, h, wd)
        if isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] < layer.window or shape[2] < layer.window:
                raise DimensionError(f"pool window {layer.window} too large for {shape}")
            return (
                shape[0],
                (shape[1] - layer.window) // layer.stride + 1,
                (shape[2] - layer.window) // layer.stride + 1,
            )
        if isinstance(layer, Flatten):
            return (int(np.prod(shape)),)
        if isinstance(layer, Linear):
            w = self.params[layer.weight]
            if len(shape) != 1 or shape[0] != w.shape[0]:
                raise DimensionError(f"linear expects {w.shape[0]} inputs, got shape {shape}")
            return (w.shape[1],)
        if isinstance(layer, Relu):
            return shape
        raise ValidationError(f"unknown layer {layer!r}")

    # ------------------------------------------------------------- forward

    def _apply(self, layer, x: ad.Tensor) -> ad.Tensor:
        if isinstance(layer, Conv):
            out = ad.conv2d(x, self.params[layer.weight], layer.stride, layer.padding)
            return ad.add_bias(out, self.params[layer.bias])
        if isinstance(layer, Relu):
            return ad.relu(x)
        if isinstance(layer, MaxPool):
            return ad.maxpool2d(x, layer.window, layer.stride)
        if isinstance(layer, Flatten):
            return ad.reshape(x, (x.shape[0], -1))
        if isinstance(layer, Linear):
            return ad.add_bias(ad.matmul(x, self.params[layer.weight]), self.params[layer.bias])
        raise ValidationError(f"unknown layer {layer!r}")

    def run_layers(self, x: ad.Tensor, start: int, stop: int) -> ad.Tensor:
        """Apply layers[start:stop] to x; building block for taps."""
        for layer in self.layers[start:stop]:
            x = self._apply(layer, x)
        return x

    def forward(self, batch) -> ad.Tensor:
        """Logits for a (N, C, H, W) batch."""
        x = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"batch shape {x.shape} does not match model input {self.input_shape}"
            )
        return self.run_layers(x, 0, len(self.layers))

    # ------------------------------------------------------------- params

    def parameters(self) -> list[tuple[str, ad.Tensor]]:
        return list(self.params.items())

    def set_trainable(self, flag: bool) -> None:
        for tensor in self.params.values():
            tensor.requires_grad = bool(flag)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws with |value| > 2*std redrawn, the classic conv init."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        mask = np.abs(out) > 2.0 * std
        if not mask.any():
            return out
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))


def build_small_cnn(
    input_shape=(1, 28, 28),
    conv_channels: Iterable[int] = (32, 64),
    fc_widths: Iterable[int] = (1024,),
    num_classes: int = 10,
    kernel_size: int = 5,
    pool: int = 2,
    tap_post_relu: bool = False,
    seed: int = 0,
) -> Model:
    """Conv/relu/pool stacks followed by fully connected layers.

    The default configuration is conv(32, 5x5), pool 2, conv(64, 5x5),
    pool 2, fc(1024), fc(10) with same-style padding. Tap "fc1" exposes
    the first fully connected layer, pre-activation unless
    ``tap_post_relu`` is set. Weights are truncated-normal std 0.1,
    biases constant 0.1, seeded.
    """
    conv_channels = tuple(int(c) for c in conv_channels)
    fc_widths = tuple(int(w) for w in fc_widths)
    if any(c < 1 for c in conv_channels) or any(w < 1 for w in fc_widths):
        raise ValidationError("all layer widths must be at least 1")
    if num_classes < 2:
        raise ValidationError("need at least two classes")
    if len(input_shape) != 3:
        raise ValidationError(f"input_shape must be (C, H, W), got {input_shape}")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    padding = kernel_size // 2
    params: dict[str, ad.Tensor] = {}
    layers: list = []
    taps: dict[str, int] = {}

    c, h, w = (int(v) for v in input_shape)
    for i, f in enumerate(conv_channels, start=1):
        wname, bname = f"conv{i}.weight", f"conv{i}.bias"
        params[wname] = ad.Tensor(_truncated_normal(rng, (f, c, kernel_size, kernel_size), 0.1))
        params[bname] = ad.Tensor(np.full(f, 0.1))
        layers.append(Conv(wname, bname, stride=1, padding=padding))
        layers.append(Relu())
        layers.append(MaxPool(pool, pool))
        c = f
        h = (h + 2 * padding - kernel_size) + 1
        w = (w + 2 * padding - kernel_size) + 1
        h = (h - pool) // pool + 1
        w = (w - pool) // pool + 1
        if h < 1 or w < 1:
            raise DimensionError("input too small for the conv/pool stack")

    layers.append(Flatten())
    width = c * h * w
    for i, fc in enumerate(fc_widths, start=1):
        wname, bname = f"fc{i}.weight", f"fc{i}.bias"
        params[wname] = ad.Tensor(_truncated_normal(rng, (width, fc), 0.1))
        params[bname] = ad.Tensor(np.full(fc, 0.1))
        layers.append(Linear(wname, bname))
        taps[f"fc{i}"] = len(layers) - 1 + (1 if tap_post_relu else 0)
        layers.append(Relu())
        width = fc

    head_w, head_b = f"fc{len(fc_widths) + 1}.weight", f"fc{len(fc_widths) + 1}.bias"
    params[head_w] = ad.Tensor(_truncated_normal(rng, (width, num_classes), 0.1))
    params[head_b] = ad.Tensor(np.full(num_classes, 0.1))
    layers.append(Linear(head_w, head_b))

    arch = {
        "input_shape": list(input_shape),
        "conv_channels": list(conv_channels),
        "fc_widths": list(fc_widths),
        "num_classes": num_classes,
        "kernel_size": kernel_size,
        "pool": pool,
        "tap_post_relu": tap_post_relu,
    }
    return Model(input_shape, layers, params, taps, arch)


def forward_logits(model: Model, batch) -> ad.Tensor:
    """Logits for a batch; records onto the active tape when one exists."""
    return model.forward(batch)


def extract_features(model: Model, batch, tap: str = "fc1") -> ad.Tensor:
    """Activations at a named tap, flattened to (N, d_t) per example."""
    if tap not in model.feature_taps:
        raise ValidationError(f"unknown tap {tap!r}, have {sorted(model.feature_taps)}")
    x = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match model input")
    stop = model.feature_taps[tap] + 1
    out = model.run_layers(x, 0, stop)
    if out.ndim != 2:
        out = ad.reshape(out, (out.shape[0], -1))
    return out


def extract_features_batched(model: Model, images: np.ndarray, tap: str = "fc1", batch_size: int = 512) -> np.ndarray:
    """Feature rows for a large image array, computed in chunks."""
    chunks = [
        extract_features(model, images[i : i + batch_size], tap).data
        for i in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


# ----------------------------------------------------------------- storage


def save_checkpoint(model: Model, path) -> None:
    """Write a model to the "BSLB" container; round-trips bit-exactly."""
    names = list(model.params)
    header = {
        "arch": model.arch,
        "metadata": model.metadata,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes() for n in names
    )
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + blob
    )
    Path(path).write_bytes(payload)


def load_checkpoint(path) -> Model:
    """Read a "BSLB" container back into a Model.

    Raises BadMagicError, VersionMismatchError, or TruncatedError for
    the three ways a file can disagree with its own layout.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    if len(buf) < 16:
        raise TruncatedError(f"{path}: header cut short")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, reader supports {CHECKPOINT_VERSION}"
        )
    header_len = struct.unpack("<Q", buf[8:16])[0]
    if len(buf) < 16 + header_len:
        raise TruncatedError(f"{path}: header promises {header_len} bytes, file ends early")
    try:
        header = json.loads(buf[16 : 16 + header_len].decode("utf-8"))
        arch = header["arch"]
        entries = header["params"]
        metadata = header["metadata"]
    except (ValueError, KeyError) as exc:
        raise FileFormatError(f"{path}: corrupt header ({exc})") from None

    model = build_small_cnn(
        input_shape=tuple(arch["input_shape"]),
        conv_channels=arch["conv_channels"],
        fc_widths=arch["fc_widths"],
        num_classes=arch["num_classes"],
        kernel_size=arch["kernel_size"],
        pool=arch["pool"],
        tap_post_relu=arch["tap_post_relu"],
    )
    expected_names = list(model.params)
    if [e["name"] for e in entries] != expected_names:
        raise FileFormatError(f"{path}: parameter list does not match architecture")

    blob = buf[16 + header_len :]
    expected_bytes = sum(int(np.prod(e["shape"])) * 8 for e in entries)
    if len(blob) != expected_bytes:
        raise TruncatedError(
            f"{path}: parameter blob is {len(blob)} bytes, architecture needs {expected_bytes}"
        )
    offset = 0
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        if model.params[entry["name"]].shape != shape:
            raise FileFormatError(f"{path}: shape mismatch for {entry['name']}")
        model.params[entry["name"]] = ad.Tensor(values.reshape(shape).copy())
        offset += count * 8
    model.metadata = dict(metadata)
    model._check_wiring()
    return model
