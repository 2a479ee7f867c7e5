"""Dense float64 tensors, the layer set used by every model here, and a
small tape-based reverse-mode differentiator."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    """An n-d float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


@dataclass
class Tape:
    """Records primitive applications in execution order."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, op, inputs, output, backward) -> Tensor:
        self.nodes.append(Node(tuple(inputs), output, backward, op))
        return output

    def __len__(self) -> int:
        return len(self.nodes)


def _record(tape: Tape | None, op, inputs, output, backward) -> Tensor:
    if tape is not None:
        tape.record(op, inputs, output, backward)
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill ``grad`` of every tensor touched by ``tape`` with d loss / d tensor.

    Tensors on the tape but not upstream of ``loss`` end up with zero grads.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if tape.nodes and not any(n.output is loss for n in tape.nodes):
        raise ContractError("loss was not produced on this tape")
    seen: set[int] = set()
    for node in tape.nodes:
        for t in (*node.inputs, node.output):
            if id(t) not in seen:
                seen.add(id(t))
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if not g.any():
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is not None:
                inp.grad += gi


# ---------------------------------------------------------------- scalar glue


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(tape, "add", (a, b), Tensor(a.data + b.data), lambda g: (g, g))


def scale(a: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    return _record(tape, "scale", (a,), Tensor(a.data * k), lambda g: (g * k,))


def sub_scaled(a: Tensor, b: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    """a - k * b for same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"sub_scaled: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data - k * b.data)
    return _record(tape, "sub_scaled", (a, b), out, lambda g: (g, -k * g))


def mean_squared(pred: Tensor, target: np.ndarray, tape: Tape | None = None) -> Tensor:
    """0.5 * mean over rows of ||pred - target||^2."""
    diff = pred.data - target
    n = pred.shape[0]
    out = Tensor(0.5 * np.sum(diff * diff) / n)
    return _record(tape, "mse", (pred,), out, lambda g: (g * diff / n,))


# ---------------------------------------------------------------- softmax / CE


def softmax_array(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax: non-finite logits")
    if z.shape[-1] < 1:
        raise ShapeError("softmax: empty class axis")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericError("log_softmax: non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    return Tensor(softmax_array(logits.data))


def cross_entropy_soft(
    logits: Tensor, target_weights, tape: Tape | None = None
) -> Tensor:
    """-sum_j w_j log softmax_j(z), averaged over the batch axis.

    Weights may be sub-stochastic. The gradient is taken in closed form,
    (sum_j w_j) * softmax(z) - w, rather than through log/exp primitives.
    """
    w = np.asarray(target_weights, dtype=np.float64)
    z = logits.data
    if w.shape != z.shape:
        raise ShapeError(f"cross_entropy_soft: logits {z.shape} vs targets {w.shape}")
    if (w < 0).any():
        raise ContractError("cross_entropy_soft: negative target weight")
    if z.ndim == 1:
        z2, w2 = z[None, :], w[None, :]
    else:
        z2, w2 = z.reshape(-1, z.shape[-1]), w.reshape(-1, w.shape[-1])
    n = z2.shape[0]
    logp = log_softmax_array(z2)
    out = Tensor(-np.sum(w2 * logp) / n)

    def back(g):
        p = np.exp(logp)
        dz = (w2.sum(axis=1, keepdims=True) * p - w2) / n
        return (g * dz.reshape(z.shape),)

    return _record(tape, "cross_entropy_soft", (logits,), out, back)


def per_sample_cross_entropy(logits: np.ndarray, target_weights: np.ndarray) -> np.ndarray:
    return -np.sum(target_weights * log_softmax_array(logits), axis=-1)


# ---------------------------------------------------------------- layers


class LayerKind(enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    CONV2D = "conv2d"
    AFFINE = "affine"
    GLOBAL_AVG_POOL = "gap"


@dataclass
class Layer:
    """One layer: kind tag, parameter tensors, and shape hyperparameters.

    ``AFFINE`` is a learnable per-channel scale and shift, used where a
    normalisation layer would normally sit.
    """

    kind: LayerKind
    params: dict[str, Tensor] = field(default_factory=dict)
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind is LayerKind.CONV2D:
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ContractError(f"conv kernel must be a positive odd integer, got {self.kernel}")
            if self.stride < 1:
                raise ContractError(f"conv stride must be >= 1, got {self.stride}")
        expected = _param_shapes(self)
        for key, shape in expected.items():
            if key not in self.params:
                raise ContractError(f"{self.kind.value} layer missing parameter {key!r}")
            if self.params[key].shape != shape:
                raise ShapeError(
                    f"{self.kind.value} parameter {key!r}: expected {shape}, got {self.params[key].shape}"
                )

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "in": self.in_features,
            "out": self.out_features,
            "kernel": self.kernel,
            "stride": self.stride,
        }


def _param_shapes(layer: Layer) -> dict[str, tuple[int, ...]]:
    k = layer.kind
    if k is LayerKind.LINEAR:
        return {"weight": (layer.in_features, layer.out_features), "bias": (layer.out_features,)}
    if k is LayerKind.CONV2D:
        return {
            "weight": (layer.out_features, layer.in_features, layer.kernel, layer.kernel),
            "bias": (layer.out_features,),
        }
    if k is LayerKind.AFFINE:
        return {"scale": (layer.in_features,), "shift": (layer.in_features,)}
    return {}


def linear_layer(w, b) -> Layer:
    w, b = np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return Layer(LayerKind.LINEAR, {"weight": Tensor(w), "bias": Tensor(b)}, w.shape[0], w.shape[1])


def conv_layer(w, b, stride: int = 1) -> Layer:
    w, b = np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return Layer(
        LayerKind.CONV2D, {"weight": Tensor(w), "bias": Tensor(b)},
        w.shape[1], w.shape[0], kernel=w.shape[2], stride=stride,
    )


def affine_layer(channels: int, scale=None, shift=None) -> Layer:
    s = np.ones(channels) if scale is None else np.asarray(scale, dtype=np.float64)
    t = np.zeros(channels) if shift is None else np.asarray(shift, dtype=np.float64)
    return Layer(LayerKind.AFFINE, {"scale": Tensor(s), "shift": Tensor(t)}, channels, channels)


def relu_layer() -> Layer:
    return Layer(LayerKind.RELU)


def gap_layer() -> Layer:
    return Layer(LayerKind.GLOBAL_AVG_POOL)


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (n, ho, wo, c, k, k) -> rows per output position
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, xshape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    pad = k // 2
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[..., i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def apply_layer(layer: Layer, x: Tensor, tape: Tape | None = None) -> Tensor:
    kind = layer.kind
    data = x.data
    if kind is LayerKind.RELU:
        mask = data > 0
        return _record(tape, "relu", (x,), Tensor(data * mask), lambda g: (g * mask,))

    if kind is LayerKind.GLOBAL_AVG_POOL:
        if data.ndim != 4:
            raise ShapeError(f"gap: expected (N, C, H, W) input, got axes {data.shape}")
        n, c, h, w = data.shape
        out = Tensor(data.mean(axis=(2, 3)))

        def back_gap(g):
            return (np.broadcast_to(g[:, :, None, None] / (h * w), data.shape).copy(),)

        return _record(tape, "gap", (x,), out, back_gap)

    if kind is LayerKind.LINEAR:
        W, b = layer.params["weight"], layer.params["bias"]
        if data.ndim != 2 or data.shape[1] != layer.in_features:
            raise ShapeError(
                f"linear({layer.in_features}->{layer.out_features}): input axis 1 is "
                f"{data.shape[1] if data.ndim == 2 else data.shape}, expected {layer.in_features}"
            )
        out = Tensor(data @ W.data + b.data)

        def back_lin(g):
            return g @ W.data.T, data.T @ g, g.sum(axis=0)

        return _record(tape, "linear", (x, W, b), out, back_lin)

    if kind is LayerKind.AFFINE:
        s, t = layer.params["scale"], layer.params["shift"]
        if data.ndim not in (2, 4) or data.shape[1] != layer.in_features:
            raise ShapeError(
                f"affine({layer.in_features}): channel axis 1 is {data.shape[1:2]}, "
                f"expected {layer.in_features}"
            )
        bshape = (1, -1) + (1,) * (data.ndim - 2)
        sb, tb = s.data.reshape(bshape), t.data.reshape(bshape)
        out = Tensor(data * sb + tb)
        red = (0,) + tuple(range(2, data.ndim))

        def back_aff(g):
            return g * sb, (g * data).sum(axis=red), g.sum(axis=red)

        return _record(tape, "affine", (x, s, t), out, back_aff)

    if kind is LayerKind.CONV2D:
        W, b = layer.params["weight"], layer.params["bias"]
        if data.ndim != 4 or data.shape[1] != layer.in_features:
            raise ShapeError(
                f"conv2d({layer.in_features}->{layer.out_features}): input channel axis is "
                f"{data.shape[1] if data.ndim == 4 else data.shape}, expected {layer.in_features}"
            )
        k, st = layer.kernel, layer.stride
        n = data.shape[0]
        cout = layer.out_features
        wmat = W.data.reshape(cout, -1)
        if k == 1 and st == 1:
            out = np.einsum("nchw,oc->nohw", data, wmat, optimize=True) + b.data[None, :, None, None]

            def back_c1(g):
                dx = np.einsum("nohw,oc->nchw", g, wmat, optimize=True)
                dw = np.einsum("nohw,nchw->oc", g, data, optimize=True).reshape(W.shape)
                return dx, dw, g.sum(axis=(0, 2, 3))

            return _record(tape, "conv2d", (x, W, b), Tensor(out), back_c1)

        cols, ho, wo = _im2col(data, k, st)
        out = (cols @ wmat.T + b.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

        def back_conv(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            dw = (gm.T @ cols).reshape(W.shape)
            dx = _col2im(gm @ wmat, data.shape, k, st, ho, wo)
            return dx, dw, gm.sum(axis=0)

        return _record(tape, "conv2d", (x, W, b), Tensor(np.ascontiguousarray(out)), back_conv)

    raise ContractError(f"unknown layer kind {kind}")


def run_layers(layers: Sequence[Layer], x: Tensor, tape: Tape | None = None) -> Tensor:
    for layer in layers:
        x = apply_layer(layer, x, tape)
    return x


# ---------------------------------------------------------------- gradient check


def check_gradients(
    loss_fn: Callable[[Tape | None], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int = 10_000,
    seed: int = 0,
    analytic: Callable[[], list[np.ndarray]] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(tape)`` must rebuild the loss from the current parameter
    values. When more than ``max_entries`` parameter entries exist, a
    seeded subset of that size is checked. ``analytic`` overrides the
    gradients under test (used to plant faults).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    tape = Tape()
    loss = loss_fn(tape)
    for p in params:
        p.zero_grad()
    backward(tape, loss)
    grads = analytic() if analytic is not None else [p.grad.copy() for p in params]

    index = [(pi, j) for pi, p in enumerate(params) for j in range(p.data.size)]
    if len(index) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(index), size=max_entries, replace=False)
        index = [index[i] for i in sorted(pick)]

    worst = 0.0
    for pi, j in index:
        flat = params[pi].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = loss_fn(None).item()
        flat[j] = orig - step
        down = loss_fn(None).item()
        flat[j] = orig
        num = (up - down) / (2 * step)
        ana = grads[pi].reshape(-1)[j]
        err = abs(ana - num) / max(1.0, abs(ana), abs(num))
        worst = max(worst, err)
    return worst


def finite_diff_check(model, batch, step: float = 1e-5, targets=None, **kw) -> float:
    """:func:`check_gradients` for a model's soft-CE loss on one batch.

    ``model`` needs ``forward(batch, tape)`` and ``parameters()``;
    ``targets`` defaults to the batch's one-hot labels.
    """
    w = batch.onehot if targets is None else np.asarray(targets, dtype=np.float64)
    return check_gradients(
        lambda tape: cross_entropy_soft(model.forward(batch, tape), w, tape), model.parameters(), step, **kw
    )
