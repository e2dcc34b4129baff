"""Layer primitives with explicit forward and backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients additively in ``backward``.  Convolutions
use an im2col formulation: gather the dilated/strided taps of the padded
input into a column matrix, then one matmul per channel group.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from itertools import product
from typing import Iterator

import numpy as np

from .exceptions import ConfigError, ShapeError, StateError
from .tensor import Parameter

GROUP = "group"
SPATIAL_SPLIT = "spatial-split"


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ConfigError(f"expected a scalar or 3 values, got {v}")
    return v


def out_extent(n: int, kernel: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """RNG keyed on (seed, layer name) so shared layers initialise identically
    no matter which other layers a network contains."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def msra_init(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass(frozen=True)
class ConvSpec:
    """Convolution hyperparameters, (filters, kernel, stride, dilation, subvolumes)
    plus the input width and padding.  ``padding=None`` means "same" padding
    for stride 1: dilation * (kernel - 1) / 2 on every axis."""

    filters: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    subvolumes: int = 1
    in_channels: int = 1
    padding: int | tuple[int, int, int] | None = None
    mode: str = GROUP

    def __post_init__(self):
        for name in ("filters", "kernel", "stride", "dilation", "subvolumes", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.mode not in (GROUP, SPATIAL_SPLIT):
            raise ConfigError(f"unknown subvolume mode {self.mode!r}")
        if self.mode == GROUP and (self.in_channels % self.subvolumes or self.filters % self.subvolumes):
            raise ConfigError(
                f"channels ({self.in_channels} -> {self.filters}) not divisible by subvolumes {self.subvolumes}")

    @property
    def pads(self) -> tuple[int, int, int]:
        if self.padding is None:
            return (self.dilation * (self.kernel - 1) // 2,) * 3
        return _triple(self.padding)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel
        if self.mode == SPATIAL_SPLIT:
            return (self.subvolumes * self.filters, self.in_channels, k, k, k)
        return (self.filters, self.in_channels // self.subvolumes, k, k, k)

    def output_spatial(self, spatial) -> tuple[int, int, int]:
        spatial = tuple(spatial)
        if self.mode == SPATIAL_SPLIT:
            if spatial[0] % self.subvolumes:
                raise ShapeError(f"depth {spatial[0]} not divisible into {self.subvolumes} subvolumes")
            block = (spatial[0] // self.subvolumes,) + spatial[1:]
            o = tuple(out_extent(n, self.kernel, self.stride, self.dilation, p) for n, p in zip(block, self.pads))
            o = (o[0] * self.subvolumes,) + o[1:]
        else:
            o = tuple(out_extent(n, self.kernel, self.stride, self.dilation, p) for n, p in zip(spatial, self.pads))
        if min(o) < 1:
            raise ShapeError(f"non-positive output extent {o} for input {spatial}")
        return o


@dataclass(frozen=True)
class DeconvSpec:
    """Transposed convolution; the defaults double every spatial extent."""

    filters: int
    in_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    subvolumes: int = 1

    def __post_init__(self):
        for name in ("filters", "in_channels", "kernel", "stride", "subvolumes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.in_channels % self.subvolumes or self.filters % self.subvolumes:
            raise ConfigError("deconv channels not divisible by subvolumes")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel
        return (self.in_channels, self.filters // self.subvolumes, k, k, k)

    def output_spatial(self, spatial) -> tuple[int, int, int]:
        o = tuple((n - 1) * self.stride - 2 * self.padding + self.kernel for n in spatial)
        if min(o) < 1:
            raise ShapeError(f"non-positive deconv output extent {o}")
        return o


# --- convolution kernels -------------------------------------------------

def _tap_slices(k, stride, dilation, out_sp):
    for kz, ky, kx in product(range(k), repeat=3):
        yield tuple(slice(t * dilation, t * dilation + stride * (o - 1) + 1, stride)
                    for t, o in zip((kz, ky, kx), out_sp))


def _pad(x, pads):
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))


def im2col(x, k, stride, dilation, pads, groups):
    """Columns of shape (B, G, Cg*k^3, N) matching weights flattened to (G, Fg, Cg*k^3)."""
    B, C = x.shape[:2]
    out_sp = tuple(out_extent(n, k, stride, dilation, p) for n, p in zip(x.shape[2:], pads))
    n = int(np.prod(out_sp))
    if k == 1 and stride == 1 and not any(pads):
        return x.reshape(B, groups, C // groups, n), out_sp
    xp = _pad(x, pads)
    cols = np.empty((B, C, k ** 3, n), dtype=x.dtype)
    for t, sl in enumerate(_tap_slices(k, stride, dilation, out_sp)):
        cols[:, :, t, :] = xp[(slice(None), slice(None)) + sl].reshape(B, C, n)
    return cols.reshape(B, groups, (C // groups) * k ** 3, n), out_sp


def col2im(cols, x_shape, k, stride, dilation, pads, out_sp):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    B, C = x_shape[:2]
    n = int(np.prod(out_sp))
    if k == 1 and stride == 1 and not any(pads):
        return cols.reshape(x_shape)
    padded = (B, C) + tuple(s + 2 * p for s, p in zip(x_shape[2:], pads))
    gxp = np.zeros(padded, dtype=cols.dtype)
    cols = cols.reshape(B, C, k ** 3, n)
    for t, sl in enumerate(_tap_slices(k, stride, dilation, out_sp)):
        gxp[(slice(None), slice(None)) + sl] += cols[:, :, t, :].reshape((B, C) + out_sp)
    return gxp[(slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pads, x_shape[2:]))]


def conv3d(x, w, stride=1, dilation=1, pads=(0, 0, 0), groups=1):
    """Grouped, dilated, strided 3D convolution without bias."""
    F, k = w.shape[0], w.shape[2]
    cols, out_sp = im2col(x, k, stride, dilation, pads, groups)
    wg = w.reshape(groups, F // groups, -1)
    out = np.matmul(wg, cols)
    return out.reshape((x.shape[0], F) + out_sp)


def conv3d_input_grad(gout, w, x_shape, stride=1, dilation=1, pads=(0, 0, 0), groups=1):
    B, F = gout.shape[:2]
    k = w.shape[2]
    out_sp = gout.shape[2:]
    wg = w.reshape(groups, F // groups, -1)
    g = gout.reshape(B, groups, F // groups, -1)
    dcols = np.matmul(wg.transpose(0, 2, 1), g)
    return col2im(dcols, x_shape, k, stride, dilation, pads, out_sp)


def conv3d_weight_grad(x, gout, w_shape, stride=1, dilation=1, pads=(0, 0, 0), groups=1):
    B, F = gout.shape[:2]
    k = w_shape[2]
    cols, _ = im2col(x, k, stride, dilation, pads, groups)
    g = gout.reshape(B, groups, F // groups, -1)
    gw = np.matmul(g, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape(w_shape)


# --- layers --------------------------------------------------------------

class Layer:
    """Base class: a forward/backward pair plus owned parameters."""

    def parameters(self) -> Iterator[Parameter]:
        return iter(())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _cached(self, attr):
        value = getattr(self, attr, None)
        if value is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return value


class Conv3d(Layer):
    """Separated-kernel dilated convolution.

    With ``subvolumes=S`` in group mode the input channels are split into S
    contiguous groups and filter group g only sees input group g, so the
    weight tensor is 1/S the size of the ungrouped one.  ``S=1`` is ordinary
    dilated convolution.  The spatial-split mode instead cuts the depth axis
    into S blocks, each convolved by its own full kernel.
    """

    def __init__(self, spec: ConvSpec, name: str = "conv", seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.name = name
        rng = layer_rng(seed, name)
        shape = spec.weight_shape
        fan_in = int(np.prod(shape[1:]))
        self.weight = Parameter(f"{name}.weight", msra_init(shape, fan_in, rng, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.filters, dtype=dtype))
        self._x = None

    def parameters(self):
        yield self.weight
        yield self.bias

    def _check_input(self, x):
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name}: expected [B,{self.spec.in_channels},D,H,W] input, got {list(x.shape)}")
        self.spec.output_spatial(x.shape[2:])

    def _blocks(self, a):
        s = self.spec.subvolumes
        return np.split(a, s, axis=2)

    def forward(self, x, cache=True):
        self._check_input(x)
        sp = self.spec
        w = self.weight.value
        b = self.bias.value.reshape(1, -1, 1, 1, 1)
        if sp.mode == SPATIAL_SPLIT:
            F = sp.filters
            outs = [conv3d(xb, w[i * F:(i + 1) * F], sp.stride, sp.dilation, sp.pads)
                    for i, xb in enumerate(self._blocks(x))]
            y = np.concatenate(outs, axis=2) + b
        else:
            y = conv3d(x, w, sp.stride, sp.dilation, sp.pads, sp.subvolumes) + b
        if cache:
            self._x = x
        return y

    def backward(self, gout):
        x = self._cached("_x")
        sp = self.spec
        self.bias.grad += gout.sum(axis=(0, 2, 3, 4))
        if sp.mode == SPATIAL_SPLIT:
            F = sp.filters
            gxs = []
            for i, (xb, gb) in enumerate(zip(self._blocks(x), self._blocks(gout))):
                wb = self.weight.value[i * F:(i + 1) * F]
                self.weight.grad[i * F:(i + 1) * F] += conv3d_weight_grad(
                    xb, gb, wb.shape, sp.stride, sp.dilation, sp.pads)
                gxs.append(conv3d_input_grad(gb, wb, xb.shape, sp.stride, sp.dilation, sp.pads))
            return np.concatenate(gxs, axis=2)
        self.weight.grad += conv3d_weight_grad(
            x, gout, self.weight.value.shape, sp.stride, sp.dilation, sp.pads, sp.subvolumes)
        return conv3d_input_grad(gout, self.weight.value, x.shape, sp.stride, sp.dilation, sp.pads, sp.subvolumes)


class Deconv3d(Layer):
    """Transposed convolution: the forward map is the input-gradient map of
    the matching convolution, so the two are exact adjoints."""

    def __init__(self, spec: DeconvSpec, name: str = "deconv", seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.name = name
        rng = layer_rng(seed, name)
        shape = spec.weight_shape
        self.weight = Parameter(f"{name}.weight", msra_init(shape, int(np.prod(shape[1:])), rng, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.filters, dtype=dtype))
        self._x = None

    def parameters(self):
        yield self.weight
        yield self.bias

    @property
    def _pads(self):
        return (self.spec.padding,) * 3

    def forward(self, x, cache=True):
        sp = self.spec
        if x.ndim != 5 or x.shape[1] != sp.in_channels:
            raise ShapeError(f"{self.name}: expected [B,{sp.in_channels},D,H,W] input, got {list(x.shape)}")
        out_shape = (x.shape[0], sp.filters) + sp.output_spatial(x.shape[2:])
        y = conv3d_input_grad(x, self.weight.value, out_shape, sp.stride, 1, self._pads, sp.subvolumes)
        if cache:
            self._x = x
        return y + self.bias.value.reshape(1, -1, 1, 1, 1)

    def backward(self, gout):
        x = self._cached("_x")
        sp = self.spec
        self.bias.grad += gout.sum(axis=(0, 2, 3, 4))
        self.weight.grad += conv3d_weight_grad(
            gout, x, self.weight.value.shape, sp.stride, 1, self._pads, sp.subvolumes)
        return conv3d(gout, self.weight.value, sp.stride, 1, self._pads, sp.subvolumes)


class MaxPool3d(Layer):
    """Non-overlapping max pooling (window == stride).  Gradient goes to the
    first maximum in scan order within each window."""

    def __init__(self, window: int = 2, stride: int = 2):
        if window != stride:
            raise ConfigError("only non-overlapping pooling (window == stride) is supported")
        self.window = window
        self._argmax = None
        self._shape = None

    def _windows(self, x):
        B, C, D, H, W = x.shape
        s = self.window
        if D % s or H % s or W % s:
            raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by pooling stride {s}")
        v = x.reshape(B, C, D // s, s, H // s, s, W // s, s)
        return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, D // s, H // s, W // s, s ** 3)

    def forward(self, x, cache=True):
        if x.ndim != 5:
            raise ShapeError("pooling expects a 5-axis tensor")
        win = self._windows(x)
        idx = np.argmax(win, axis=-1)
        if cache:
            self._argmax = idx
            self._shape = x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, gout):
        idx = self._cached("_argmax")
        B, C, D, H, W = self._shape
        s = self.window
        gwin = np.zeros(idx.shape + (s ** 3,), dtype=gout.dtype)
        np.put_along_axis(gwin, idx[..., None], gout[..., None], axis=-1)
        g = gwin.reshape(B, C, D // s, H // s, W // s, s, s, s).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return g.reshape(B, C, D, H, W)


class ReLU(Layer):
    def forward(self, x, cache=True):
        y = np.maximum(x, 0)
        if cache:
            self._mask = x > 0
        return y

    def backward(self, gout):
        # subgradient 0 at exactly 0
        return gout * self._cached("_mask")


class Tanh(Layer):
    def forward(self, x, cache=True):
        y = np.tanh(x)
        if cache:
            self._y = y
        return y

    def backward(self, gout):
        y = self._cached("_y")
        return gout * (1 - y * y)


def relu(x):
    return np.maximum(x, 0)
