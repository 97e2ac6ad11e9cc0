"""Small numpy neural-network core.

Parameters of a model live in one flat buffer (:class:`ParamVector`) so that
the federated code can add, scale and average whole models with single array
operations. Layers are stateless descriptions; the forward pass returns caches that
the backward pass consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, LabelError, ShapeError

Layout = tuple[tuple[str, tuple[int, ...]], ...]

CHECKPOINT_MAGIC = "FEDBSS-PV"
CHECKPOINT_VERSION = "v1"


class ParamVector:
    """Flat, ordered parameter buffer with named segment views."""

    __slots__ = ("flat", "layout", "_offsets")

    def __init__(self, flat: np.ndarray, layout: Layout):
        flat = np.asarray(flat)
        if flat.ndim != 1:
            raise ShapeError(f"flat buffer must be 1-D, got shape {flat.shape}")
        total = sum(math.prod(shape) for _, shape in layout)
        if total != flat.size:
            raise ShapeError(f"layout holds {total} scalars but buffer has {flat.size}")
        self.flat = flat
        self.layout = tuple((name, tuple(shape)) for name, shape in layout)
        offsets = {}
        pos = 0
        for name, shape in self.layout:
            n = math.prod(shape)
            offsets[name] = (pos, pos + n, shape)
            pos += n
        self._offsets = offsets

    @classmethod
    def zeros(cls, layout: Layout, dtype=np.float32) -> ParamVector:
        total = sum(math.prod(shape) for _, shape in layout)
        return cls(np.zeros(total, dtype=dtype), layout)

    @property
    def total_len(self) -> int:
        return self.flat.size

    @property
    def dtype(self):
        return self.flat.dtype

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, shape = self._offsets[name]
        return self.flat[start:stop].reshape(shape)

    @property
    def segments(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self[name]) for name, _ in self.layout]

    def copy(self) -> ParamVector:
        return ParamVector(self.flat.copy(), self.layout)

    def astype(self, dtype) -> ParamVector:
        return ParamVector(self.flat.astype(dtype), self.layout)

    def zeros_like(self) -> ParamVector:
        return ParamVector(np.zeros_like(self.flat), self.layout)

    def check_aligned(self, other: ParamVector) -> None:
        if self.layout != other.layout:
            raise ShapeError("parameter vectors come from different architectures")

    def __add__(self, other: ParamVector) -> ParamVector:
        self.check_aligned(other)
        return ParamVector(self.flat + other.flat, self.layout)

    def __sub__(self, other: ParamVector) -> ParamVector:
        self.check_aligned(other)
        return ParamVector(self.flat - other.flat, self.layout)

    def __mul__(self, scalar: float) -> ParamVector:
        return ParamVector((self.flat * scalar).astype(self.flat.dtype, copy=False), self.layout)

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    def __repr__(self) -> str:
        return f"ParamVector(total_len={self.total_len}, segments={len(self.layout)}, dtype={self.dtype})"

    @staticmethod
    def mean(vectors: Sequence[ParamVector], weights: Sequence[float] | None = None) -> ParamVector:
        """Element-wise (optionally weighted) mean, accumulated in float64."""
        if not vectors:
            raise ShapeError("cannot average an empty list of parameter vectors")
        first = vectors[0]
        if weights is None:
            weights = [1.0] * len(vectors)
        if len(weights) != len(vectors):
            raise ShapeError("one weight per parameter vector is required")
        acc = np.zeros(first.total_len, dtype=np.float64)
        for vec in vectors:
            first.check_aligned(vec)
        total_w = float(sum(weights))
        for vec, w in zip(vectors, weights):
            acc += float(w) * vec.flat.astype(np.float64)
        return ParamVector((acc / total_w).astype(first.dtype), first.layout)


# ---------------------------------------------------------------------------
# layers


def _activate(name: str | None, z: np.ndarray) -> np.ndarray:
    if name is None:
        return z
    if name == "relu":
        return np.maximum(z, 0)
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str | None, z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if name is None:
        return dy
    return dy * (z > 0)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: str | None = None

    kind = "dense"

    def param_shapes(self):
        return [("W", (self.in_features, self.out_features)), ("b", (self.out_features,))]

    def fans(self):
        return self.in_features, self.out_features

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"dense layer expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, p, x):
        z = x @ p["W"] + p["b"]
        return _activate(self.activation, z), (x, z)

    def backward(self, p, cache, dy):
        x, z = cache
        dz = _activate_grad(self.activation, z, dy)
        return dz @ p["W"].T, {"W": x.T @ dz, "b": dz.sum(axis=0)}


@dataclass(frozen=True)
class Conv2D:
    """Stride-1 2D convolution over (B, C, H, W) inputs."""

    in_channels: int
    out_channels: int
    kernel: int
    padding: int = 0
    activation: str | None = None

    kind = "conv2d"

    def param_shapes(self):
        k = self.kernel
        return [("W", (self.out_channels, self.in_channels, k, k)), ("b", (self.out_channels,))]

    def fans(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.out_channels * k2

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv layer expects ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {in_shape} smaller than kernel {self.kernel}")
        return (self.out_channels, ho, wo)

    def forward(self, p, x):
        k, pad = self.kernel, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        b = x.shape[0]
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
        wmat = p["W"].reshape(self.out_channels, -1)
        z = (cols @ wmat.T + p["b"]).reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return _activate(self.activation, z), (xp.shape, cols, z)

    def backward(self, p, cache, dy):
        xp_shape, cols, z = cache
        k, pad = self.kernel, self.padding
        dz = _activate_grad(self.activation, z, dy)
        b, _, ho, wo = dz.shape
        dz_flat = dz.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.out_channels)
        wmat = p["W"].reshape(self.out_channels, -1)
        dw = (dz_flat.T @ cols).reshape(p["W"].shape)
        db = dz_flat.sum(axis=0)
        dcols = (dz_flat @ wmat).reshape(b, ho, wo, self.in_channels, k, k)
        dxp = np.zeros(xp_shape, dtype=dz.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:xp_shape[2] - pad, pad:xp_shape[3] - pad] if pad else dxp
        return dx, {"W": dw, "b": db}


@dataclass(frozen=True)
class MaxPool2D:
    size: int
    stride: int | None = None

    kind = "maxpool2d"

    @property
    def step(self) -> int:
        return self.stride or self.size

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"max-pool expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        ho = (h - self.size) // self.step + 1
        wo = (w - self.size) // self.step + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {in_shape} smaller than pool window {self.size}")
        return (c, ho, wo)

    def forward(self, p, x):
        s, st = self.size, self.step
        win = sliding_window_view(x, (s, s), axis=(2, 3))[:, :, ::st, ::st]
        b, c, ho, wo = win.shape[:4]
        flat = win.reshape(b, c, ho, wo, s * s)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, p, cache, dy):
        x_shape, arg = cache
        s, st = self.size, self.step
        ho, wo = arg.shape[2], arg.shape[3]
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(s):
            for j in range(s):
                hit = arg == i * s + j
                dx[:, :, i:i + st * (ho - 1) + 1:st, j:j + st * (wo - 1) + 1:st] += dy * hit
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, cache, dy):
        return dy.reshape(cache), {}


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]

    kind = "reshape"

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        if math.prod(in_shape) != math.prod(self.shape):
            raise ShapeError(f"cannot reshape {in_shape} to {self.shape}")
        return tuple(self.shape)

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + tuple(self.shape)), x.shape

    def backward(self, p, cache, dy):
        return dy.reshape(cache), {}


Layer = Dense | Conv2D | MaxPool2D | Flatten | Reshape


# ---------------------------------------------------------------------------
# model


class Model:
    """A feed-forward stack of layers plus its parameters."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...],
                 params: ParamVector | None = None, seed: int = 0, dtype=np.float32):
        self.architecture = tuple(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        layout = []
        for i, layer in enumerate(self.architecture):
            for suffix, pshape in layer.param_shapes():
                layout.append((f"{i}.{suffix}", pshape))
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"model must end in a vector of logits, got {shape}")
        self.num_classes = shape[0]
        self.layout: Layout = tuple(layout)
        if params is None:
            params = self._init_params(seed, dtype)
        elif params.layout != self.layout:
            raise ShapeError("params do not match the architecture")
        self.params = params

    def _init_params(self, seed: int, dtype) -> ParamVector:
        rng = np.random.default_rng(seed)
        params = ParamVector.zeros(self.layout, dtype=np.float64)
        for i, layer in enumerate(self.architecture):
            if not layer.param_shapes():
                continue
            fan_in, fan_out = layer.fans()
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = params[f"{i}.W"]
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return params.astype(dtype)

    def with_params(self, params: ParamVector) -> Model:
        return Model(self.architecture, self.input_shape, params=params)

    def _views(self, i: int, params: ParamVector) -> dict[str, np.ndarray]:
        return {suffix: params[f"{i}.{suffix}"] for suffix, _ in self.architecture[i].param_shapes()}

    def check_input(self, batch: np.ndarray) -> None:
        if batch.ndim < 2 or tuple(batch.shape[1:]) != self.input_shape or batch.shape[0] < 1:
            raise ShapeError(
                f"expected batch of shape (B, {', '.join(map(str, self.input_shape))}), got {batch.shape}")

    def __repr__(self) -> str:
        return f"Model(input={self.input_shape}, classes={self.num_classes}, params={self.params.total_len})"


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits of shape (B, num_classes)."""
    batch = np.asarray(batch)
    model.check_input(batch)
    x = batch.astype(model.params.dtype, copy=False)
    for i, layer in enumerate(model.architecture):
        x, _ = layer.forward(model._views(i, model.params), x)
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise LabelError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(float(probs[label]), np.finfo(np.float64).tiny)))


def _check_labels(labels: np.ndarray, batch_size: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch_size,):
        raise ShapeError(f"expected {batch_size} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return labels


def sample_losses(model: Model, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy, as float64."""
    logits = forward(model, batch)
    labels = _check_labels(labels, logits.shape[0], model.num_classes)
    logp = log_softmax(logits.astype(np.float64))
    return -logp[np.arange(labels.size), labels]


def loss_and_grad(model: Model, batch: np.ndarray, labels: np.ndarray,
                  params: ParamVector | None = None) -> tuple[float, ParamVector]:
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter."""
    params = model.params if params is None else params
    batch = np.asarray(batch)
    model.check_input(batch)
    labels = _check_labels(labels, batch.shape[0], model.num_classes)
    x = batch.astype(params.dtype, copy=False)
    caches = []
    for i, layer in enumerate(model.architecture):
        x, cache = layer.forward(model._views(i, params), x)
        caches.append(cache)
    b = labels.size
    logp = log_softmax(x)
    loss = float(-logp[np.arange(b), labels].astype(np.float64).mean())
    dy = np.exp(logp)
    dy[np.arange(b), labels] -= 1
    dy /= b
    grad = params.zeros_like()
    for i in range(len(model.architecture) - 1, -1, -1):
        layer = model.architecture[i]
        dy, grads = layer.backward(model._views(i, params), caches[i], dy)
        for suffix, g in grads.items():
            grad[f"{i}.{suffix}"][...] = g
    return loss, grad


def backward(model: Model, batch: np.ndarray, labels: np.ndarray) -> ParamVector:
    """Gradient of the batch-mean cross-entropy."""
    return loss_and_grad(model, batch, labels)[1]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffer: ParamVector | None = field(default=None, repr=False)


def sgd_step(params: ParamVector, grad: ParamVector, state: OptimizerState) -> ParamVector:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    Updates ``state.buffer`` in place and returns the new parameters.
    """
    params.check_aligned(grad)
    if state.buffer is None:
        state.buffer = params.zeros_like()
    else:
        params.check_aligned(state.buffer)
    dtype = params.dtype
    d = grad.flat
    if state.weight_decay:
        d = d + dtype.type(state.weight_decay) * params.flat
    buf = state.buffer.flat
    buf *= dtype.type(state.momentum)
    buf += d
    return ParamVector(params.flat - dtype.type(state.lr) * buf, params.layout)


# ---------------------------------------------------------------------------
# model zoo


def softmax_regression(input_shape: Sequence[int], num_classes: int, seed: int = 0) -> Model:
    input_shape = tuple(input_shape)
    layers: list[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    layers.append(Dense(math.prod(input_shape), num_classes))
    return Model(layers, input_shape, seed=seed)


def mlp(input_shape: Sequence[int], num_classes: int, hidden: int = 128, seed: int = 0) -> Model:
    input_shape = tuple(input_shape)
    layers: list[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    layers += [Dense(math.prod(input_shape), hidden, "relu"), Dense(hidden, num_classes)]
    return Model(layers, input_shape, seed=seed)


def cnn(input_shape: Sequence[int], num_classes: int, channels: tuple[int, int] = (32, 64),
        hidden: int = 512, kernel: int = 5, pool: int = 3, seed: int = 0) -> Model:
    """Two 5x5 conv + 3x3 max-pool blocks, a 512-unit dense layer, then logits.

    Accepts (H, W) grayscale or (C, H, W) inputs; convolutions are 'same'-padded.
    """
    input_shape = tuple(input_shape)
    layers: list[Layer] = []
    if len(input_shape) == 2:
        layers.append(Reshape((1,) + input_shape))
        in_c = 1
    elif len(input_shape) == 3:
        in_c = input_shape[0]
    else:
        raise ShapeError(f"cnn needs (H, W) or (C, H, W) input, got {input_shape}")
    pad = kernel // 2
    c1, c2 = channels
    layers += [
        Conv2D(in_c, c1, kernel, pad, "relu"), MaxPool2D(pool),
        Conv2D(c1, c2, kernel, pad, "relu"), MaxPool2D(pool),
        Flatten(),
    ]
    shape = input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers += [Dense(shape[0], hidden, "relu"), Dense(hidden, num_classes)]
    return Model(layers, input_shape, seed=seed)


MODEL_KINDS = {"softmax": softmax_regression, "mlp": mlp, "cnn": cnn}


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path: str | Path, params: ParamVector) -> None:
    header = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {params.total_len}\n".encode("ascii")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f4").tobytes())
    tmp.replace(path)


def load_params(path: str | Path, layout: Layout) -> ParamVector:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing checkpoint header line", 0)
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 3 or parts[0] != CHECKPOINT_MAGIC or parts[1] != CHECKPOINT_VERSION:
        raise FormatError(f"bad checkpoint header {raw[:nl]!r}", 0)
    total = int(parts[2])
    expected = sum(math.prod(s) for _, s in layout)
    if total != expected:
        raise ShapeError(f"checkpoint holds {total} scalars, architecture needs {expected}")
    body = raw[nl + 1:]
    if len(body) != 4 * total:
        raise FormatError(f"expected {4 * total} payload bytes, found {len(body)}", nl + 1 + min(len(body), 4 * total))
    return ParamVector(np.frombuffer(body, dtype="<f4").astype(np.float32), layout)
