"""Multi-scale context extraction and the two aggregation schemes.

Contexts are produced by dilated convolutions on the encoder output, each
followed by a 1x1x1 feature-reduction conv to a shared width.  The cascaded
aggregator folds them largest-dilation first through residual blocks,
``A = f(...f(f(X1 + X2) + X3)... + Xn)``; the parallel baseline concatenates
them along channels and mixes with a single 1x1x1 conv.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .blocks import BasicResidualBlock
from .exceptions import ConfigError, ShapeError
from .layers import Conv3d, ConvSpec, Layer

CASCADED = "cascaded"
PARALLEL = "parallel"
DESK_RATES = (8, 6, 4, 2, 1)
FULL_RATES = (30, 24, 18, 12, 6, 1)


@dataclass(frozen=True)
class PyramidConfig:
    rates: tuple[int, ...] = DESK_RATES
    branch_channels: int = 16
    mode: str = CASCADED
    # "descending" folds the largest rate first; "ascending" is the reversed experiment
    order: str = "descending"
    subvolumes: int = 1

    def __post_init__(self):
        rates = tuple(int(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if len(rates) < 2:
            raise ConfigError("a pyramid needs at least 2 scales")
        if any(r < 1 for r in rates) or any(a <= b for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"dilation rates must be strictly decreasing positive integers, got {list(rates)}")
        if self.mode not in (CASCADED, PARALLEL):
            raise ConfigError(f"unknown pyramid mode {self.mode!r}")
        if self.order not in ("descending", "ascending"):
            raise ConfigError(f"unknown aggregation order {self.order!r}")
        if self.branch_channels < 1 or self.branch_channels % self.subvolumes:
            raise ConfigError("branch_channels must be a positive multiple of subvolumes")

    @property
    def n(self) -> int:
        return len(self.rates)


def _check_contexts(contexts):
    if len(contexts) < 2:
        raise ConfigError("aggregation needs at least 2 contexts")
    shape = contexts[0].shape
    for c in contexts[1:]:
        if c.shape != shape:
            raise ShapeError(f"context extents differ: {list(shape)} vs {list(c.shape)}")


class ContextBranch(Layer):
    """Dilated conv followed by a 1x1x1 reduction conv, with no activation in between."""

    def __init__(self, in_channels, channels, dilation, subvolumes, name, seed=0, dtype=np.float64):
        self.context = Conv3d(ConvSpec(channels, 3, 1, dilation, subvolumes, in_channels),
                              f"{name}.context", seed, dtype)
        self.reduce = Conv3d(ConvSpec(channels, 1, in_channels=channels), f"{name}.reduce", seed, dtype)

    def parameters(self):
        yield from self.context.parameters()
        yield from self.reduce.parameters()

    def forward(self, x, cache=True):
        return self.reduce.forward(self.context.forward(x, cache), cache)

    def backward(self, g):
        return self.context.backward(self.reduce.backward(g))


class CascadedAggregator(Layer):
    """Sequential residual fusion of n contexts through n-1 blocks."""

    def __init__(self, blocks: Sequence[BasicResidualBlock]):
        self.blocks = list(blocks)

    def parameters(self):
        for b in self.blocks:
            yield from b.parameters()

    def forward(self, contexts, cache=True):
        _check_contexts(contexts)
        if len(self.blocks) != len(contexts) - 1:
            raise ConfigError(f"{len(contexts)} contexts need {len(contexts) - 1} blocks, got {len(self.blocks)}")
        acc = contexts[0]
        for block, ctx in zip(self.blocks, contexts[1:]):
            acc = block.forward(acc + ctx, cache)
        if cache:
            self._n = len(contexts)
        return acc

    def backward(self, g):
        self._cached("_n")
        grads = []
        for block in reversed(self.blocks):
            g = block.backward(g)
            grads.append(g)
        # the first block's input gradient flows to both X1 and X2
        grads.append(g)
        return grads[::-1]


class ParallelAggregator(Layer):
    """Channel concatenation followed by a 1x1x1 conv."""

    def __init__(self, conv: Conv3d):
        self.conv = conv

    def parameters(self):
        return self.conv.parameters()

    def forward(self, contexts, cache=True):
        _check_contexts(contexts)
        if contexts[0].shape[1] * len(contexts) != self.conv.spec.in_channels:
            raise ConfigError("parallel aggregator width does not match n * branch_channels")
        if cache:
            self._split = [c.shape[1] for c in contexts]
        return self.conv.forward(np.concatenate(contexts, axis=1), cache)

    def backward(self, g):
        split = self._cached("_split")
        gcat = self.conv.backward(g)
        return np.split(gcat, np.cumsum(split)[:-1], axis=1)


def aggregate_cascaded(contexts, blocks, cache=False):
    return CascadedAggregator(blocks).forward(contexts, cache)


def aggregate_parallel(contexts, conv, cache=False):
    return ParallelAggregator(conv).forward(contexts, cache)


class ContextPyramid(Layer):
    """Branches plus aggregator; ``forward`` maps encoder features to one tensor."""

    def __init__(self, cfg: PyramidConfig, in_channels: int, name: str = "ccp", seed: int = 0,
                 dtype=np.float64):
        self.cfg = cfg
        self.name = name
        b = cfg.branch_channels
        self.branches = [ContextBranch(in_channels, b, d, cfg.subvolumes, f"{name}.branch{i}", seed, dtype)
                         for i, d in enumerate(cfg.rates)]
        if cfg.mode == CASCADED:
            blocks = [BasicResidualBlock(b, f"{name}.f{i + 1}", seed, dtype) for i in range(cfg.n - 1)]
            self.aggregator = CascadedAggregator(blocks)
        else:
            conv = Conv3d(ConvSpec(b, 1, in_channels=cfg.n * b), f"{name}.g", seed, dtype)
            self.aggregator = ParallelAggregator(conv)

    def parameters(self):
        for br in self.branches:
            yield from br.parameters()
        yield from self.aggregator.parameters()

    def _ordered(self, items):
        return list(items) if self.cfg.order == "descending" else list(items)[::-1]

    def extract_contexts(self, x, cache=True):
        return [br.forward(x, cache) for br in self.branches]

    def forward(self, x, cache=True):
        contexts = self.extract_contexts(x, cache)
        return self.aggregator.forward(self._ordered(contexts), cache)

    def backward(self, g):
        gctx = self._ordered(self.aggregator.backward(g))
        gx = None
        for br, gc in zip(self.branches, gctx):
            gi = br.backward(gc)
            gx = gi if gx is None else gx + gi
        return gx
