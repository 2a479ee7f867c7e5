"""Base and biased model constructors, plus the checkpoint container."""
from __future__ import annotations

import enum
import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datakit import FOREGROUND_THRESHOLD, FormatError, LabeledBatch
from .diffcore import (
    ContractError,
    Layer,
    LayerKind,
    ShapeError,
    Tape,
    Tensor,
    affine_layer,
    gap_layer,
    relu_layer,
    run_layers,
)

log = logging.getLogger(__name__)


class ModelKind(enum.Enum):
    BASE = "base"
    LOW_CAPACITY = "low_capacity"
    EXPLICIT_FEATURE = "explicit_feature"
    SELF_ENSEMBLE = "self_ensemble"
    STATIC_DISTRIBUTION = "static_distribution"


# Feature selectors turn a batch into the model's input array.
SELECTORS = ("image", "flat", "mean_color", "bias_block", "group", "global")


@dataclass
class Model:
    layers: list[Layer]
    kind: ModelKind
    input_signature: tuple[int, ...]
    num_classes: int
    selector: str = "image"
    arch: dict = field(default_factory=dict)
    # static distribution only: (num_groups, C) log-probabilities and the global prior
    log_table: np.ndarray | None = None
    log_prior: np.ndarray | None = None

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def trainable(self) -> bool:
        return self.kind is not ModelKind.STATIC_DISTRIBUTION

    def select(self, batch: LabeledBatch) -> np.ndarray:
        x = batch.features
        sel = self.selector
        if sel == "image":
            return x
        if sel == "flat":
            return x.reshape(len(x), -1)
        if sel == "mean_color":
            return background_mean_color(x)
        if sel == "bias_block":
            start = self.arch["bias_start"]
            return x.reshape(len(x), -1)[:, start:]
        if sel == "group":
            return batch.bias_attr
        if sel == "global":
            return np.zeros(len(batch), dtype=np.int64)
        raise ContractError(f"unknown selector {sel!r}")

    def forward(self, batch: LabeledBatch, tape: Tape | None = None) -> Tensor:
        x = self.select(batch)
        if self.kind is ModelKind.STATIC_DISTRIBUTION:
            return Tensor(self._static_logits(np.asarray(x)))
        sig = tuple(x.shape[1:])
        if self.input_signature and _signature_mismatch(self.input_signature, sig):
            raise ShapeError(f"{self.kind.value} model expects input {self.input_signature}, got {sig}")
        return run_layers(self.layers, Tensor(x), tape)

    def logits(self, batch: LabeledBatch) -> np.ndarray:
        return self.forward(batch, None).data

    def predict(self, batch: LabeledBatch) -> np.ndarray:
        return self.logits(batch).argmax(axis=1)

    def _static_logits(self, groups: np.ndarray) -> np.ndarray:
        table = self.log_table
        known = (groups >= 0) & (groups < len(table))
        out = np.empty((len(groups), self.num_classes))
        out[known] = table[groups[known]]
        if not known.all():
            log.info("static distribution: %d samples in unseen groups use the global prior", (~known).sum())
            out[~known] = self.log_prior
        return out


def background_mean_color(images: np.ndarray, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    """Mean RGB over background pixels, shape (N, 3).

    Foreground digit pixels are grey (equal channels) and at least
    ``threshold``; leaving them out stops stroke area from leaking the
    digit class. Images with no background fall back to the plain mean.
    """
    fg = (images.min(axis=1) >= threshold) & (np.ptp(images, axis=1) == 0)
    bg = (~fg)[:, None].astype(np.float64)
    count = bg.sum(axis=(2, 3))
    total = (images * bg).sum(axis=(2, 3))
    plain = images.mean(axis=(2, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), plain)


def _signature_mismatch(expected, got) -> bool:
    if len(expected) != len(got):
        return True
    # spatial axes of convolutional models are free (None)
    return any(e is not None and e != g for e, g in zip(expected, got))


# ------------------------------------------------------------------ init


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _conv(rng, cin, cout, k, stride=1) -> Layer:
    w = _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
    return Layer(LayerKind.CONV2D, {"weight": Tensor(w), "bias": Tensor(np.zeros(cout))}, cin, cout, k, stride)


def _linear(rng, din, dout) -> Layer:
    w = _glorot(rng, (din, dout), din, dout)
    return Layer(LayerKind.LINEAR, {"weight": Tensor(w), "bias": Tensor(np.zeros(dout))}, din, dout)


def build_from_arch(arch: dict, seed: int, kind: ModelKind | None = None) -> Model:
    """Instantiate a fresh model from an architecture recipe."""
    rng = np.random.default_rng(seed)
    t = arch["type"]
    C = arch["num_classes"]
    if t == "convnet":
        layers: list[Layer] = []
        cin = arch.get("in_channels", 3)
        strides = arch.get("strides") or [1] * len(arch["channels"])
        for cout, st in zip(arch["channels"], strides):
            layers += [_conv(rng, cin, cout, arch["kernel"], st), affine_layer(cout), relu_layer()]
            cin = cout
        layers += [gap_layer(), _linear(rng, cin, C)]
        default_kind = ModelKind.LOW_CAPACITY if arch["kernel"] == 1 else ModelKind.BASE
        sig = (arch.get("in_channels", 3), None, None)
        selector = "image"
    elif t == "mlp":
        layers = []
        din = arch["in_features"]
        for h in arch.get("hidden", []):
            layers += [_linear(rng, din, h), relu_layer()]
            din = h
        layers.append(_linear(rng, din, C))
        default_kind = ModelKind(arch.get("kind", "base"))
        sig = (arch["in_features"],)
        selector = arch.get("selector", "flat")
    else:
        raise ContractError(f"unknown architecture type {t!r}")
    return Model(layers, kind or default_kind, sig, C, selector, dict(arch))


def build_simplenet(kernel: int, channels, num_classes: int = 10, seed: int = 0,
                    in_channels: int = 3, strides=None) -> Model:
    """Conv + affine + ReLU blocks, global average pooling, linear head.

    With kernel 1 every pre-pool unit sees exactly one pixel, which makes
    the network a colour/texture model.
    """
    if kernel not in (1, 3):
        raise ContractError("kernel must be 1 or 3")
    if not channels:
        raise ContractError("channels must be non-empty")
    arch = {
        "type": "convnet", "kernel": kernel, "channels": list(channels),
        "num_classes": num_classes, "in_channels": in_channels,
        "strides": list(strides) if strides else None,
    }
    return build_from_arch(arch, seed)


def build_mlp(in_features: int, hidden, num_classes: int, seed: int = 0,
              selector: str = "flat", kind: ModelKind = ModelKind.BASE, **extra) -> Model:
    arch = {"type": "mlp", "in_features": in_features, "hidden": list(hidden),
            "num_classes": num_classes, "selector": selector, "kind": kind.value, **extra}
    return build_from_arch(arch, seed)


def build_background_model(num_classes: int = 10, hidden: int = 16, seed: int = 0) -> Model:
    """MLP over the mean RGB colour of the background pixels."""
    return build_mlp(3, [hidden], num_classes, seed, selector="mean_color", kind=ModelKind.EXPLICIT_FEATURE)


def build_static_distribution(labels, groups, epsilon: float = 1.0, num_classes: int | None = None,
                              global_group: bool = False) -> Model:
    """Group-conditioned class prior, emitted as log-probability logits.

    ``global_group`` ignores per-sample groups and uses one prior for all
    samples (the long-tailed setting, where the group would be the label).
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    groups = np.zeros_like(labels) if global_group else np.asarray(groups, dtype=np.int64)
    if labels.shape != groups.shape:
        raise ContractError("labels and groups must align")
    C = int(num_classes if num_classes is not None else labels.max() + 1)
    G = int(groups.max()) + 1
    counts = np.zeros((G, C))
    np.add.at(counts, (groups, labels), 1.0)
    probs = (counts + epsilon) / (counts.sum(axis=1, keepdims=True) + C * epsilon)
    overall = np.bincount(labels, minlength=C).astype(np.float64)
    prior = (overall + epsilon) / (overall.sum() + C * epsilon)
    arch = {"type": "static", "num_classes": C, "epsilon": epsilon, "global_group": global_group}
    return Model([], ModelKind.STATIC_DISTRIBUTION, (), C, "global" if global_group else "group",
                 arch, np.log(probs), np.log(prior))


def clone_architecture(base: Model, seed: int) -> Model:
    """Same layer structure, fresh parameters, tagged as a self-ensemble model."""
    if base.kind is ModelKind.STATIC_DISTRIBUTION:
        raise ContractError("static distribution models have no architecture to clone")
    model = build_from_arch(base.arch, seed, ModelKind.SELF_ENSEMBLE)
    model.selector = base.selector
    model.arch["cloned_from"] = base.kind.value
    return model


# ------------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"GGDM"
_CKPT_VERSION = 1


def model_to_bytes(model: Model) -> bytes:
    arrays: list[np.ndarray] = []
    layer_meta = []
    for layer in model.layers:
        desc = layer.describe()
        desc["params"] = []
        for name, t in layer.params.items():
            desc["params"].append({"name": name, "shape": list(t.shape)})
            arrays.append(t.data)
        layer_meta.append(desc)
    extras = []  # a list, so payload order survives sort_keys
    for name in ("log_table", "log_prior"):
        arr = getattr(model, name)
        if arr is not None:
            extras.append({"name": name, "shape": list(arr.shape)})
            arrays.append(arr)
    header = json.dumps(
        {
            "kind": model.kind.value,
            "num_classes": model.num_classes,
            "input_signature": list(model.input_signature),
            "selector": model.selector,
            "arch": model.arch,
            "layers": layer_meta,
            "extras": extras,
        },
        sort_keys=True,
    ).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return (
        _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(header)) + header
        + struct.pack("<I", zlib.crc32(header + body)) + body
    )


def model_from_bytes(data: bytes) -> Model:
    if len(data) < 16 or data[:4] != _CKPT_MAGIC:
        raise FormatError("not a model checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = data[12 : 12 + hlen]
    if len(data) < 16 + hlen:
        raise FormatError("checkpoint truncated")
    (crc,) = struct.unpack("<I", data[12 + hlen : 16 + hlen])
    body = data[16 + hlen :]
    if zlib.crc32(header + body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    meta = json.loads(header)
    buf = io.BytesIO(body)

    def take(shape):
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(count * 8)
        if len(raw) != count * 8:
            raise FormatError("checkpoint payload truncated")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    layers = []
    for d in meta["layers"]:
        params = {p["name"]: Tensor(take(tuple(p["shape"]))) for p in d["params"]}
        layers.append(Layer(LayerKind(d["kind"]), params, d["in"], d["out"], d["kernel"], d["stride"]))
    extras = {e["name"]: take(tuple(e["shape"])) for e in meta["extras"]}
    sig = tuple(meta["input_signature"])
    return Model(layers, ModelKind(meta["kind"]), sig, meta["num_classes"], meta["selector"],
                 meta["arch"], extras.get("log_table"), extras.get("log_prior"))


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
