"""Basic and guided residual blocks."""
from __future__ import annotations

import copy

import numpy as np

from .exceptions import ConfigError, ShapeError
from .layers import Conv3d, ConvSpec, Layer, ReLU

NO_AMPLIFY = "no-amplify"
NO_GUIDANCE = "no-guidance"


class ResidualTransform(Layer):
    """h(x) = conv3 -> ReLU -> conv3, channel count preserved."""

    def __init__(self, channels: int, name: str, seed: int = 0, dtype=np.float64):
        spec = ConvSpec(filters=channels, kernel=3, in_channels=channels)
        self.conv1 = Conv3d(spec, f"{name}.conv1", seed, dtype)
        self.act = ReLU()
        self.conv2 = Conv3d(spec, f"{name}.conv2", seed, dtype)
        # last conv starts at zero so every residual block begins as identity;
        # without this, deep stacks of untrained blocks destabilise SGD
        self.conv2.weight.value[...] = 0

    def parameters(self):
        yield from self.conv1.parameters()
        yield from self.conv2.parameters()

    def forward(self, x, cache=True):
        return self.conv2.forward(self.act.forward(self.conv1.forward(x, cache), cache), cache)

    def backward(self, g):
        return self.conv1.backward(self.act.backward(self.conv2.backward(g)))


class BasicResidualBlock(Layer):
    """ReLU(x + h(x))."""

    def __init__(self, channels: int, name: str = "brb", seed: int = 0, dtype=np.float64):
        self.channels = channels
        self.name = name
        self.h = ResidualTransform(channels, f"{name}.h", seed, dtype)
        self.out_act = ReLU()

    def parameters(self):
        return self.h.parameters()

    def forward(self, x, cache=True):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got shape {list(x.shape)}")
        return self.out_act.forward(x + self.h.forward(x, cache), cache)

    def backward(self, g):
        g = self.out_act.backward(g)
        return g + self.h.backward(g)


class GuidedResidualBlock(Layer):
    """Residual block fed by a shallow guidance feature G.

    The fused input x̂ = x + G is amplified as x̂ * (1 + tanh(x̂)) and added to
    the residual transform h(x̂), followed by ReLU.  When G has a different
    width than x it first passes through a learned 1x1x1 projection.
    """

    def __init__(self, channels: int, guidance_channels: int | None = None, name: str = "grb",
                 seed: int = 0, dtype=np.float64, amplify: bool = True, use_guidance: bool = True):
        self.channels = channels
        self.guidance_channels = channels if guidance_channels is None else guidance_channels
        self.name = name
        self.amplify = amplify
        self.use_guidance = use_guidance
        self.proj = None
        if self.guidance_channels != channels:
            spec = ConvSpec(filters=channels, kernel=1, in_channels=self.guidance_channels)
            self.proj = Conv3d(spec, f"{name}.proj", seed, dtype)
        self.h = ResidualTransform(channels, f"{name}.h", seed, dtype)
        self.out_act = ReLU()

    def parameters(self):
        if self.proj is not None:
            yield from self.proj.parameters()
        yield from self.h.parameters()

    def ablate(self, mode: str) -> "GuidedResidualBlock":
        """Copy of this block (same parameter values) with one branch disabled."""
        if mode not in (NO_AMPLIFY, NO_GUIDANCE):
            raise ConfigError(f"unknown GRB ablation {mode!r}")
        block = copy.deepcopy(self)
        if mode == NO_AMPLIFY:
            block.amplify = False
        else:
            block.use_guidance = False
        return block

    def forward(self, x, g, cache=True):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got shape {list(x.shape)}")
        if g.ndim != 5 or g.shape[0] != x.shape[0] or g.shape[2:] != x.shape[2:]:
            raise ShapeError(f"{self.name}: guidance {list(g.shape)} does not match input {list(x.shape)}")
        if g.shape[1] != self.guidance_channels:
            raise ShapeError(f"{self.name}: expected {self.guidance_channels} guidance channels")
        if not self.use_guidance:
            xh = x
        elif self.proj is not None:
            xh = x + self.proj.forward(g, cache)
        else:
            xh = x + g
        if self.amplify:
            t = np.tanh(xh)
            fused = xh * (1 + t)
        else:
            t = None
            fused = xh
        out = self.out_act.forward(fused + self.h.forward(xh, cache), cache)
        if cache:
            self._xh, self._t, self._gshape = xh, t, g.shape
        return out

    def backward(self, gout):
        xh = self._cached("_xh")
        gr = self.out_act.backward(gout)
        if self.amplify:
            t = self._t
            g_xh = gr * (1 + t + xh * (1 - t * t))
        else:
            g_xh = gr.copy()
        g_xh += self.h.backward(gr)
        if not self.use_guidance:
            g_g = np.zeros(self._gshape, dtype=g_xh.dtype)
        elif self.proj is not None:
            g_g = self.proj.backward(g_xh)
        else:
            g_g = g_xh.copy()
        return g_xh, g_g
