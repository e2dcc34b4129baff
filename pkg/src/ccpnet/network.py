"""End-to-end network: dilated-convolution encoder, context pyramid and
guided residual refinement, ending in a 1x1x1 classifier."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .blocks import NO_AMPLIFY, NO_GUIDANCE, BasicResidualBlock, GuidedResidualBlock
from .exceptions import ConfigError, ShapeError
from .layers import Conv3d, ConvSpec, Deconv3d, DeconvSpec, MaxPool3d, ReLU
from .pyramid import FULL_RATES, ContextPyramid, PyramidConfig
from .tensor import Parameter, argmax_axis

POOL = "pool"
RESOLUTION_DROP = {"full": 0, "half": 1, "quarter": 2}
GRB_MODES = ("guided", NO_AMPLIFY, NO_GUIDANCE, "brb")

# (filters, kernel, stride, dilation, subvolumes)
EncoderEntry = Union[str, tuple]


@dataclass(frozen=True)
class GrrStage:
    """One refinement stage: 2x deconv, then a GRB guided by an encoder tap."""

    channels: int
    guidance: str
    kernel: int = 4
    padding: int = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_dims: tuple[int, int, int] = (60, 36, 60)
    num_classes: int = 12
    encoder: tuple = ((8, 3, 1, 1, 1), POOL, (16, 3, 1, 2, 4), POOL, (64, 3, 1, 2, 2), (64, 3, 1, 2, 1))
    pyramid: PyramidConfig = field(default_factory=lambda: PyramidConfig(branch_channels=32))
    grr: tuple = (GrrStage(16, "dce.conv1"), GrrStage(8, "dce.conv0"))
    output_resolution: str = "full"
    subvolume_mode: str = "group"
    # "guided", or an ablation: "no-amplify", "no-guidance", "brb"
    grb_mode: str = "guided"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        enc = tuple(e if e == POOL else tuple(int(v) for v in e) for e in self.encoder)
        object.__setattr__(self, "encoder", enc)
        object.__setattr__(self, "grr", tuple(s if isinstance(s, GrrStage) else GrrStage(*s) for s in self.grr))

    def with_resolution(self, resolution: str) -> "NetworkConfig":
        return replace(self, output_resolution=resolution)

    def with_subvolumes(self, subvolumes: int) -> "NetworkConfig":
        """Same network with every dilated encoder conv set to ``subvolumes``."""
        enc = tuple(e if e == POOL or e[3] == 1 else e[:4] + (subvolumes,) for e in self.encoder)
        return replace(self, encoder=enc)


@dataclass
class LayerPlan:
    """Static shape walk of a config, shared by :func:`build` for validation."""

    encoder: list = field(default_factory=list)   # (name, ConvSpec | "pool", out_channels, out_spatial)
    taps: dict = field(default_factory=dict)      # tap name -> (channels, spatial)
    encoder_out: tuple = ()
    stages: list = field(default_factory=list)    # (name, DeconvSpec, guidance channels, out_spatial)
    head_in: int = 0
    output_spatial: tuple = ()


def plan(cfg: NetworkConfig) -> LayerPlan:
    """Validate a config and compute every layer's spec and output extents."""
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if cfg.output_resolution not in RESOLUTION_DROP:
        raise ConfigError(f"output_resolution must be one of {sorted(RESOLUTION_DROP)}")
    if cfg.grb_mode not in GRB_MODES:
        raise ConfigError(f"grb_mode must be one of {GRB_MODES}")
    if len(cfg.input_dims) != 3 or min(cfg.input_dims) < 1:
        raise ConfigError(f"input_dims must be three positive integers, got {cfg.input_dims}")
    p = LayerPlan()
    channels, spatial = 1, cfg.input_dims
    last_s = None
    conv_index = 0
    try:
        for entry in cfg.encoder:
            if entry == POOL:
                if any(n % 2 for n in spatial):
                    raise ConfigError(f"pooling needs even extents, got {spatial}")
                spatial = tuple(n // 2 for n in spatial)
                p.encoder.append((POOL, POOL, channels, spatial))
                continue
            if len(entry) != 5:
                raise ConfigError(f"encoder conv needs (filters, kernel, stride, dilation, subvolumes), got {entry}")
            f, k, s, d, sv = entry
            if d > 1:
                if last_s is not None and sv > last_s:
                    raise ConfigError("subvolume counts must not increase with encoder depth")
                last_s = sv
            spec = ConvSpec(f, k, s, d, sv, channels, mode=cfg.subvolume_mode)
            spatial = spec.output_spatial(spatial)
            channels = f
            name = f"conv{conv_index}"
            conv_index += 1
            p.encoder.append((name, spec, channels, spatial))
            p.taps[f"dce.{name}"] = (channels, spatial)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    if conv_index == 0:
        raise ConfigError("encoder needs at least one convolution")
    p.encoder_out = (channels, spatial)
    channels = cfg.pyramid.branch_channels
    keep = len(cfg.grr) - RESOLUTION_DROP[cfg.output_resolution]
    if keep < 0:
        raise ConfigError(f"{cfg.output_resolution} output needs at least {-keep + len(cfg.grr)} refinement stages")
    for i, stage in enumerate(cfg.grr):
        dspec = DeconvSpec(stage.channels, channels, stage.kernel, 2, stage.padding)
        spatial = dspec.output_spatial(spatial)
        if stage.guidance not in p.taps:
            raise ConfigError(f"unknown guidance tap {stage.guidance!r}; available: {sorted(p.taps)}")
        gch, gsp = p.taps[stage.guidance]
        if gsp != spatial:
            raise ConfigError(f"stage {i}: guidance {stage.guidance} has extents {gsp}, stage output {spatial}")
        channels = stage.channels
        if i < keep:
            p.stages.append((f"grr.stage{i}", dspec, gch, spatial))
    if cfg.output_resolution == "full" and spatial != cfg.input_dims:
        raise ConfigError(f"full-resolution output {spatial} does not match input {cfg.input_dims}")
    if p.stages:
        p.head_in, p.output_spatial = p.stages[-1][1].filters, p.stages[-1][3]
    else:
        p.head_in, p.output_spatial = cfg.pyramid.branch_channels, p.encoder_out[1]
    return p


class Network:
    """A built network.  ``forward`` caches activations for ``backward``;
    parameter gradients accumulate until :meth:`zero_grad`."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.plan = plan(cfg)
        self.encoder = []
        for name, spec, _, _ in self.plan.encoder:
            if spec == POOL:
                self.encoder.append((name, MaxPool3d(), None))
            else:
                self.encoder.append((name, Conv3d(spec, f"dce.{name}", seed, dtype), ReLU()))
        enc_ch = self.plan.encoder_out[0]
        self.pyramid = ContextPyramid(cfg.pyramid, enc_ch, "ccp", seed, dtype)
        self.stages = []
        for (name, dspec, gch, _), stage in zip(self.plan.stages, cfg.grr):
            deconv = Deconv3d(dspec, f"{name}.deconv", seed, dtype)
            if cfg.grb_mode == "brb":
                grb = BasicResidualBlock(stage.channels, f"{name}.brb", seed, dtype)
            else:
                grb = GuidedResidualBlock(stage.channels, gch, f"{name}.grb", seed, dtype,
                                          amplify=cfg.grb_mode != NO_AMPLIFY,
                                          use_guidance=cfg.grb_mode != NO_GUIDANCE)
            self.stages.append((name, deconv, grb, stage.guidance))
        self.head = Conv3d(ConvSpec(cfg.num_classes, 1, in_channels=self.plan.head_in), "head", seed, dtype)
        self.activations = {}
        self._registry = None
        self.parameters()

    def parameters(self) -> dict[str, Parameter]:
        if self._registry is None:
            reg = {}
            for p in self._iter_parameters():
                if p.name in reg:
                    raise ConfigError(f"duplicate parameter name {p.name}")
                reg[p.name] = p
            self._registry = reg
        return self._registry

    def _iter_parameters(self):
        for _, layer, _ in self.encoder:
            yield from layer.parameters()
        yield from self.pyramid.parameters()
        for _, deconv, grb, _ in self.stages:
            yield from deconv.parameters()
            yield from grb.parameters()
        yield from self.head.parameters()

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    @property
    def output_shape(self) -> tuple[int, ...]:
        return (self.cfg.num_classes,) + self.plan.output_spatial

    def forward(self, x, cache=True, record=False):
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != self.cfg.input_dims:
            raise ShapeError(f"expected input [B,1,{','.join(map(str, self.cfg.input_dims))}], got {list(x.shape)}")
        x = x.astype(self.dtype, copy=False)
        acts = {}
        taps = {}
        h = x
        for name, layer, act in self.encoder:
            h = layer.forward(h, cache)
            if act is not None:
                h = act.forward(h, cache)
                taps[f"dce.{name}"] = h
        acts["dce.out"] = h
        h = self.pyramid.forward(h, cache)
        acts["ccp.out"] = h
        for name, deconv, grb, tap in self.stages:
            u = deconv.forward(h, cache)
            if isinstance(grb, BasicResidualBlock):
                h = grb.forward(u, cache)
            else:
                h = grb.forward(u, taps[tap], cache)
            acts[f"{name}.out"] = h
        scores = self.head.forward(h, cache)
        if record:
            acts.update(taps)
            self.activations = acts
        return scores

    def backward(self, grad_scores):
        g = self.head.backward(grad_scores)
        tap_grads = {}
        for name, deconv, grb, tap in reversed(self.stages):
            if isinstance(grb, BasicResidualBlock):
                g = grb.backward(g)
            else:
                g, gg = grb.backward(g)
                tap_grads[tap] = tap_grads[tap] + gg if tap in tap_grads else gg
            g = deconv.backward(g)
        g = self.pyramid.backward(g)
        for name, layer, act in reversed(self.encoder):
            if act is not None:
                extra = tap_grads.get(f"dce.{name}")
                if extra is not None:
                    g = g + extra
                g = act.backward(g)
            g = layer.backward(g)
        return g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint extents {state[name].shape} != {p.value.shape}")
            p.value[...] = state[name]


def build(cfg: NetworkConfig, seed: int = 0, dtype=np.float64) -> Network:
    return Network(cfg, seed, dtype)


def predict_labels(scores: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over the class axis; ties go to the lowest class."""
    return argmax_axis(scores, 1)


# --- presets ---------------------------------------------------------------

def desk_config(**overrides) -> NetworkConfig:
    return replace(NetworkConfig(), **overrides)


def full_config(**overrides) -> NetworkConfig:
    cfg = NetworkConfig(
        input_dims=(240, 144, 240),
        encoder=((2, 3, 1, 1, 1), POOL, (8, 3, 1, 2, 2), POOL, (16, 3, 1, 2, 2), (16, 3, 1, 2, 2)),
        pyramid=PyramidConfig(rates=FULL_RATES, branch_channels=12, subvolumes=4),
        grr=(GrrStage(4, "dce.conv1", 2, 0), GrrStage(2, "dce.conv0", 2, 0)),
    )
    return replace(cfg, **overrides)


def tiny_config(**overrides) -> NetworkConfig:
    cfg = NetworkConfig(
        input_dims=(16, 16, 16),
        encoder=((4, 3, 1, 1, 1), POOL, (16, 3, 1, 2, 2), POOL, (32, 3, 1, 2, 1)),
        pyramid=PyramidConfig(rates=(2, 1), branch_channels=16),
        grr=(GrrStage(16, "dce.conv1"), GrrStage(8, "dce.conv0")),
    )
    return replace(cfg, **overrides)


PRESETS = {"desk": desk_config, "full": full_config, "tiny": tiny_config}
