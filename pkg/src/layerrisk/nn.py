"""Layers, the three experiment architectures, optimizers and checkpoints.

Architectures (probe points are the post-ReLU outputs of each conv layer):

``cnn_mnist``
    Conv2d_1 1->12, 5x5, valid (12*25 + 12 = 312 params) -> ReLU -> maxpool 2
    -> Dense 1728 -> classes.
``lenet``
    Three 5x5 "same" conv blocks 3->12->12->12 (912 / 3,612 / 3,612 params),
    each followed by ReLU and maxpool 2, then Dense 192->84 -> ReLU -> Dense.
    Padding keeps the deepest probe at 12x8x8 so it still has a few hundred
    output dimensions.
``alexnet_scaled``
    The five AlexNet conv layers (11x11, 5x5, 3x3, 3x3, 3x3) with channel
    widths divided by ``ALEXNET_WIDTH_DIVISOR``: 16, 48, 96, 64, 64.
    Strides/padding are adapted to 32x32 inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import SeededRng

ALEXNET_WIDTH_DIVISOR = 4
ALEXNET_FULL_WIDTHS = (64, 192, 384, 256, 256)


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0):
        self.name, self.in_ch, self.out_ch = name, in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"weight": (self.out_ch, self.in_ch, self.kernel, self.kernel), "bias": (self.out_ch,)}

    def fan_in(self) -> int:
        return self.in_ch * self.kernel * self.kernel

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise DimensionError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (self.out_ch, ho, wo)

    def __call__(self, x, p):
        return ad.conv2d(x, p["weight"], p["bias"], stride=self.stride, padding=self.padding)

    def linear_part(self, x, p):
        return ad.conv2d(x, p["weight"], None, stride=self.stride, padding=self.padding)


class Dense:
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name, self.in_features, self.out_features = name, in_features, out_features

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise DimensionError(f"{self.name}: expected ({self.in_features},), got {shape}")
        return (self.out_features,)

    def __call__(self, x, p):
        return ad.linear(x, p["weight"], p["bias"])

    def linear_part(self, x, p):
        return ad.matmul(x, p["weight"])


class ReLU:
    name = "relu"

    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return shape

    def __call__(self, x, p):
        return ad.relu(x)


class MaxPool2d:
    name = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size

    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // self.size, w // self.size)

    def __call__(self, x, p):
        return ad.maxpool2d(x, self.size)


class Flatten:
    name = "flatten"

    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def __call__(self, x, p):
        return ad.flatten(x)


@dataclass
class ForwardPass:
    logits: Variable | None
    loss: Variable | None
    activations: dict[str, Variable]
    input: Variable


@dataclass
class Model:
    """A feed-forward stack with named probe points.

    ``probes`` maps a probe name to the index of the layer whose output it
    captures. Parameters live in ``params`` keyed ``"<layer>.<weight|bias>"``.
    """

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list
    probes: dict[str, int]
    params: dict[str, Variable] = field(default_factory=dict)

    @property
    def probe_points(self) -> list[str]:
        return list(self.probes)

    def init_params(self, seed: int) -> None:
        """He-uniform weights (LeCun-uniform for the output layer), zero biases."""
        last = max(i for i, layer in enumerate(self.layers) if layer.param_shapes())
        for i, layer in enumerate(self.layers):
            for pname, shape in layer.param_shapes().items():
                key = f"{layer.name}.{pname}"
                if pname == "bias":
                    value = np.zeros(shape)
                else:
                    gain = 3.0 if i == last else 6.0
                    bound = math.sqrt(gain / layer.fan_in())
                    gen = SeededRng(seed).child("init", key).generator()
                    value = gen.uniform(-bound, bound, size=shape)
                self.params[key] = Variable(value, requires_grad=True, name=key)

    def layer_params(self, layer, track: bool = True) -> dict[str, Variable]:
        out = {}
        for pname in layer.param_shapes():
            var = self.params[f"{layer.name}.{pname}"]
            out[pname] = var if track else Variable(var.value)
        return out

    def activation_shape(self, probe: str) -> tuple[int, ...]:
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            if i == self._probe_index(probe):
                return shape
        raise AssertionError("unreachable")

    def activation_dim(self, probe: str) -> int:
        return int(np.prod(self.activation_shape(probe)))

    def parameter_count(self, probe: str) -> int:
        """Trainable parameters of the conv layer feeding ``probe``."""
        idx = self._probe_index(probe)
        for layer in reversed(self.layers[:idx + 1]):
            shapes = layer.param_shapes()
            if shapes:
                return int(sum(np.prod(s) for s in shapes.values()))
        return 0

    def total_parameters(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))

    def _probe_index(self, probe: str) -> int:
        try:
            return self.probes[probe]
        except KeyError:
            raise ConfigError(f"{self.name} has no probe point {probe!r}; "
                              f"available: {', '.join(self.probes)}") from None

    def forward(self, x, labels=None, *, stop_at: str | None = None,
                track_params: bool = True, input_grad: bool = False,
                shared_offset: Variable | None = None) -> ForwardPass:
        """Run the network on a batch ``x`` of shape (m, C, H, W).

        ``stop_at`` truncates after the given probe point. With
        ``track_params=False`` the parameters enter the graph as constants,
        which is what the input-gradient probes want.

        ``shared_offset`` (shape (1, C, H, W)) is added to every sample. The
        first layer is affine, so it is applied as ``f(x) + A(offset)``; the
        gradient w.r.t. the offset is then the batch sum of the per-sample
        input gradients, and the batch reduction happens before the first
        layer's backward instead of after it.
        """
        xin = x if isinstance(x, Variable) else Variable(x, requires_grad=input_grad)
        if xin.value.ndim != 4 or tuple(xin.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(f"{self.name} expects input (m, {', '.join(map(str, self.input_shape))}), "
                                 f"got {xin.shape}")
        if xin.shape[0] < 1:
            raise DimensionError("empty batch")
        stop_idx = self._probe_index(stop_at) if stop_at is not None else None
        by_index = {i: name for name, i in self.probes.items()}
        acts: dict[str, Variable] = {}
        h = xin
        for i, layer in enumerate(self.layers):
            params = self.layer_params(layer, track_params)
            if i == 0 and shared_offset is not None:
                if tuple(shared_offset.shape) != (1,) + tuple(self.input_shape):
                    raise DimensionError(f"shared offset must have shape (1, {self.input_shape}), "
                                         f"got {shared_offset.shape}")
                h = ad.add(layer(h, params), layer.linear_part(shared_offset, params))
            else:
                h = layer(h, params)
            if i in by_index:
                acts[by_index[i]] = h
            if stop_idx is not None and i == stop_idx:
                return ForwardPass(logits=None, loss=None, activations=acts, input=xin)
        loss = ad.softmax_cross_entropy(h, labels) if labels is not None else None
        return ForwardPass(logits=h, loss=loss, activations=acts, input=xin)

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = []
        for start in range(0, len(x), batch_size):
            fp = self.forward(x[start:start + batch_size], track_params=False)
            out.append(fp.logits.value.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()


def _cnn_mnist(num_classes):
    layers = [Conv2d("Conv2d_1", 1, 12, 5), ReLU(), MaxPool2d(2), Flatten(),
              Dense("Dense_1", 12 * 12 * 12, num_classes)]
    return (1, 28, 28), layers, {"Conv2d_1": 1}


def _lenet(num_classes):
    layers = [
        Conv2d("Conv2d_1", 3, 12, 5, padding=2), ReLU(), MaxPool2d(2),
        Conv2d("Conv2d_2", 12, 12, 5, padding=2), ReLU(), MaxPool2d(2),
        Conv2d("Conv2d_3", 12, 12, 5, padding=2), ReLU(), MaxPool2d(2),
        Flatten(), Dense("Dense_1", 12 * 4 * 4, 84), ReLU(), Dense("Dense_2", 84, num_classes),
    ]
    return (3, 32, 32), layers, {"Conv2d_1": 1, "Conv2d_2": 4, "Conv2d_3": 7}


def alexnet_widths(divisor: int = ALEXNET_WIDTH_DIVISOR) -> tuple[int, ...]:
    return tuple(w // divisor for w in ALEXNET_FULL_WIDTHS)


def _alexnet_scaled(num_classes):
    w1, w2, w3, w4, w5 = alexnet_widths()
    layers = [
        Conv2d("Conv2d_1", 3, w1, 11, stride=2, padding=5), ReLU(), MaxPool2d(2),    # 16 -> 8
        Conv2d("Conv2d_2", w1, w2, 5, padding=2), ReLU(),
        Conv2d("Conv2d_3", w2, w3, 3, padding=1), ReLU(),
        Conv2d("Conv2d_4", w3, w4, 3, padding=1), ReLU(),
        Conv2d("Conv2d_5", w4, w5, 3, padding=1), ReLU(), MaxPool2d(2),             # 8 -> 4
        Flatten(), Dense("Dense_1", w5 * 4 * 4, 256), ReLU(), Dense("Dense_2", 256, num_classes),
    ]
    return (3, 32, 32), layers, {"Conv2d_1": 1, "Conv2d_2": 4, "Conv2d_3": 6, "Conv2d_4": 8, "Conv2d_5": 10}


_BUILDERS = {"cnn_mnist": _cnn_mnist, "lenet": _lenet, "alexnet_scaled": _alexnet_scaled}
MODEL_NAMES = tuple(_BUILDERS)


def build_model(name: str, num_classes: int, seed: int = 0) -> Model:
    if name not in _BUILDERS:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    if num_classes not in (10, 100):
        raise ConfigError(f"num_classes must be 10 or 100, got {num_classes}")
    input_shape, layers, probes = _BUILDERS[name](num_classes)
    model = Model(name=name, input_shape=input_shape, num_classes=num_classes, layers=layers, probes=probes)
    shape = input_shape
    for layer in layers:  # validates the stack
        shape = layer.output_shape(shape)
    model.init_params(seed)
    return model


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    momentum: float = 0.9          # beta1 for adam
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, model: Model) -> None:
    """Apply one update to every parameter of ``model`` and zero its grads."""
    missing = [k for k, v in model.params.items() if v.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
    state.step_count += 1
    t = state.step_count
    for key, var in model.params.items():
        g = var.grad
        if key not in state.first:
            state.first[key] = np.zeros_like(var.value)
            if state.kind == "adam":
                state.second[key] = np.zeros_like(var.value)
        if state.kind == "sgd-momentum":
            buf = state.first[key] = state.momentum * state.first[key] + g
            var.value = var.value - state.learning_rate * buf
        else:
            m = state.first[key] = state.momentum * state.first[key] + (1 - state.momentum) * g
            v = state.second[key] = state.beta2 * state.second[key] + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.momentum ** t)
            v_hat = v / (1 - state.beta2 ** t)
            var.value = var.value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    model.zero_grad()


# ---------------------------------------------------------------- checkpoints
#
# Layout (all little-endian):
#   magic   8 bytes  b"LRCKPT01"
#   u16 len + utf-8  model name
#   u32              num_classes
#   u32              parameter count P
#   P times:  u16 len + utf-8 key, u8 ndim, ndim x u32 dims, prod(dims) x f64

CHECKPOINT_MAGIC = b"LRCKPT01"


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    parts = [CHECKPOINT_MAGIC]
    name = model.name.encode("utf-8")
    parts.append(struct.pack("<H", len(name)) + name)
    parts.append(struct.pack("<II", model.num_classes, len(model.params)))
    for key, var in model.params.items():
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb)
        parts.append(struct.pack("<B", var.value.ndim) + struct.pack(f"<{var.value.ndim}I", *var.value.shape))
        parts.append(np.ascontiguousarray(var.value, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at offset 0")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise FormatError(f"{path}: truncated checkpoint at offset {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    def take_str():
        nonlocal off
        (n,) = take("<H")
        if off + n > len(buf):
            raise FormatError(f"{path}: truncated string at offset {off}")
        s = buf[off:off + n].decode("utf-8")
        off += n
        return s

    name = take_str()
    num_classes, count = take("<II")
    model = build_model(name, num_classes)
    for _ in range(count):
        key = take_str()
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(buf):
            raise FormatError(f"{path}: truncated tensor {key!r} at offset {off}")
        if key not in model.params or model.params[key].shape != tuple(shape):
            raise FormatError(f"{path}: unexpected tensor {key!r} with shape {shape} at offset {off}")
        model.params[key].value = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off) \
            .astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes at offset {off}")
    return model
