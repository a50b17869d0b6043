"""Minimal neural-network layers with explicit forward/backward passes.

Parameters are float32 throughout (checkpoints store raw float32 blobs).
Layers cache their forward inputs only when ``need_grad=True``; frozen
parts are simply run without caches, so no gradient for them ever exists.
Initialization is fan-in-scaled uniform, drawn from an explicit
``numpy.random.Generator`` so every model is reproducible from its seed.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError


class Parameter:
    """A trainable array and its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=np.float32)
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad)
        else:
            self.grad += grad

    @property
    def shape(self):
        return self.value.shape


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Affine:
    """Single fully connected layer ``y = x @ W + b`` with no activation."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, trainable: bool = True):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = Parameter(_uniform_init(rng, (in_dim, out_dim), in_dim))
        self.bias = Parameter(_uniform_init(rng, (out_dim,), in_dim))
        self.trainable = trainable
        self._x = None

    @classmethod
    def from_arrays(cls, weight: np.ndarray, bias: np.ndarray, trainable: bool = True) -> "Affine":
        layer = cls.__new__(cls)
        layer.in_dim, layer.out_dim = weight.shape
        layer.weight = Parameter(weight)
        layer.bias = Parameter(bias)
        layer.trainable = trainable
        layer._x = None
        return layer

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InvalidArgumentError(
                f"affine layer expects (N, {self.in_dim}) input, got {x.shape}"
            )
        self._x = x if need_grad else None
        return x @ self.weight.value + self.bias.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called without a need_grad forward pass")
        self.weight.accumulate(self._x.T @ dout)
        self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weight.value.T

    def params(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        out = np.maximum(x, 0.0)
        self._mask = x > 0.0 if need_grad else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def params(self) -> dict[str, Parameter]:
        return {}


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + oh, j : j + ow]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)


def _col2im(cols: np.ndarray, x_shape, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    cols6 = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + oh, j : j + ow] += cols6[:, :, i, j]
    if pad == 0:
        return dxp
    return dxp[:, :, pad : h + pad, pad : w + pad]


class Conv2d:
    """3x3-style same convolution implemented via im2col, stride 1."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel_size: int = 3,
        pad: int = 1,
        trainable: bool = True,
    ):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.pad = int(pad)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_uniform_init(rng, (out_channels, fan_in), fan_in))
        self.bias = Parameter(_uniform_init(rng, (out_channels,), fan_in))
        self.trainable = trainable
        self._cols = None
        self._x_shape = None

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise InvalidArgumentError(
                f"conv layer expects {self.in_channels} input channels, got {c}"
            )
        cols = _im2col(x, self.kernel_size, self.pad)
        out = cols @ self.weight.value.T + self.bias.value
        oh = h + 2 * self.pad - self.kernel_size + 1
        ow = w + 2 * self.pad - self.kernel_size + 1
        if need_grad:
            self._cols = cols
            self._x_shape = x.shape
        else:
            self._cols = None
            self._x_shape = None
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cols is None:
            raise RuntimeError("backward called without a need_grad forward pass")
        flat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.weight.accumulate(flat.T @ self._cols)
        self.bias.accumulate(flat.sum(axis=0))
        dcols = flat @ self.weight.value
        return _col2im(dcols, self._x_shape, self.kernel_size, self.pad)

    def params(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}


class MaxPool2x2:
    """2x2 max pooling with stride 2; input height/width must be even."""

    def __init__(self):
        self._argmax = None
        self._x_shape = None

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise InvalidArgumentError(f"pooling needs even spatial dims, got {h}x{w}")
        windows = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        idx = windows.argmax(axis=4)
        out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]
        if need_grad:
            self._argmax = idx
            self._x_shape = x.shape
        else:
            self._argmax = None
            self._x_shape = None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._argmax is None:
            raise RuntimeError("backward called without a need_grad forward pass")
        n, c, h, w = self._x_shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, self._argmax[..., None], dout[..., None], axis=4)
        return (
            dwin.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )

    def params(self) -> dict[str, Parameter]:
        return {}


class ConvBackbone:
    """Three conv+relu+pool blocks whose flattened output is the representation.

    ``in_shape`` is (channels, height, width); both spatial dims must be
    divisible by 8 so the three pooling stages land on integers.
    """

    kind = "conv"

    def __init__(self, in_shape, widths, rng: np.random.Generator, trainable: bool = True):
        c, h, w = in_shape
        if len(widths) != 3:
            raise InvalidArgumentError(f"conv backbone takes exactly 3 widths, got {widths}")
        if h % 8 or w % 8:
            raise InvalidArgumentError(f"conv backbone needs H, W divisible by 8, got {h}x{w}")
        self.in_shape = (int(c), int(h), int(w))
        self.widths = tuple(int(x) for x in widths)
        self.trainable = trainable
        self._layers = []
        prev = c
        for width in self.widths:
            self._layers.append(Conv2d(prev, width, rng))
            self._layers.append(ReLU())
            self._layers.append(MaxPool2x2())
            prev = width
        self.feature_dim = self.widths[-1] * (h // 8) * (w // 8)

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        if x.shape[1:] != self.in_shape:
            raise InvalidArgumentError(
                f"backbone expects input shape {self.in_shape}, got {x.shape[1:]}"
            )
        out = x
        for layer in self._layers:
            out = layer.forward(out, need_grad)
        self._out_spatial = out.shape[1:]
        return out.reshape(out.shape[0], -1)

    def backward(self, dflat: np.ndarray) -> np.ndarray:
        dout = dflat.reshape(dflat.shape[0], *self._out_spatial)
        for layer in reversed(self._layers):
            dout = layer.backward(dout)
        return dout

    def params(self) -> dict[str, Parameter]:
        named = {}
        conv_index = 0
        for layer in self._layers:
            if isinstance(layer, Conv2d):
                conv_index += 1
                for name, p in layer.params().items():
                    named[f"conv{conv_index}.{name}"] = p
        return named

    def describe(self) -> dict:
        return {"kind": self.kind, "in_shape": list(self.in_shape), "widths": list(self.widths)}


class MlpBackbone:
    """Two hidden affine+relu layers over the flattened input; the second
    hidden activation is the representation."""

    kind = "mlp"

    def __init__(self, in_shape, widths, rng: np.random.Generator, trainable: bool = True):
        if len(widths) != 2:
            raise InvalidArgumentError(f"mlp backbone takes exactly 2 widths, got {widths}")
        self.in_shape = tuple(int(x) for x in in_shape)
        self.widths = tuple(int(x) for x in widths)
        self.trainable = trainable
        flat = int(np.prod(self.in_shape))
        self.fc1 = Affine(flat, self.widths[0], rng)
        self.fc2 = Affine(self.widths[0], self.widths[1], rng)
        self.relu1 = ReLU()
        self.relu2 = ReLU()
        self.feature_dim = self.widths[1]

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        if x.shape[1:] != self.in_shape:
            raise InvalidArgumentError(
                f"backbone expects input shape {self.in_shape}, got {x.shape[1:]}"
            )
        flat = x.reshape(x.shape[0], -1)
        h1 = self.relu1.forward(self.fc1.forward(flat, need_grad), need_grad)
        return self.relu2.forward(self.fc2.forward(h1, need_grad), need_grad)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = self.fc2.backward(self.relu2.backward(dout))
        return self.fc1.backward(self.relu1.backward(d))

    def params(self) -> dict[str, Parameter]:
        named = {}
        for prefix, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            for name, p in layer.params().items():
                named[f"{prefix}.{name}"] = p
        return named

    def describe(self) -> dict:
        return {"kind": self.kind, "in_shape": list(self.in_shape), "widths": list(self.widths)}


BACKBONE_KINDS = {"conv": ConvBackbone, "mlp": MlpBackbone}


def build_backbone(kind: str, in_shape, widths, rng: np.random.Generator):
    """Construct a backbone by kind name; see ``BACKBONE_KINDS`` for options."""
    if kind not in BACKBONE_KINDS:
        raise InvalidArgumentError(
            f"unknown backbone kind {kind!r}; valid kinds: {sorted(BACKBONE_KINDS)}"
        )
    return BACKBONE_KINDS[kind](in_shape, widths, rng)
