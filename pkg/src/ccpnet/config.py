"""Line-based configuration files.

Grammar: one ``dotted.key = value`` per line, ``#`` starts a comment.
Values are Python literals (ints, floats, strings, lists); bare words such
as ``cascaded`` or ``pool`` are read as strings.  ``preset = desk|full|tiny``
selects the starting point that the remaining keys override.

Example::

    preset = desk
    pyramid.rates = [8, 6, 4, 2, 1]
    pyramid.mode = parallel
    encoder.layers = [[8, 3, 1, 1, 1], pool, [16, 3, 1, 2, 4]]
    grr.stages = [[16, dce.conv1], [8, dce.conv0, 4, 1]]
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .exceptions import ConfigError, ParseError
from .network import PRESETS, GrrStage, NetworkConfig
from .pyramid import PyramidConfig
from .training import SgdConfig
from .voxel import GRID_PRESETS, VoxelGridSpec

_BARE = re.compile(r"""(?<!["'\w.\-])([A-Za-z_][\w\-]*(?:\.[\w\-]+)*)(?!["'\w])""")
_KEYWORDS = {"True", "False", "None"}


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    quoted = _BARE.sub(lambda m: m.group(1) if m.group(1) in _KEYWORDS else repr(m.group(1)), text)
    try:
        return ast.literal_eval(quoted)
    except (ValueError, SyntaxError):
        return text


def format_value(value) -> str:
    if isinstance(value, tuple):
        value = list(value)
    if isinstance(value, list):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, str):
        return value
    return repr(value)


def parse_lines(text: str, path=None) -> dict:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, lineno)
        entries[key] = (parse_value(value), lineno)
    return entries


@dataclass
class RunConfig:
    """Network plus training settings read from one config file."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    ratio: float = 2.0
    occluded_only: bool = False
    preset: str = "desk"


_NET_KEYS = {"input_dims", "num_classes", "output_resolution", "subvolume_mode", "grb_mode"}
_PYRAMID_KEYS = {f.name for f in fields(PyramidConfig)}
_SGD_KEYS = {f.name for f in fields(SgdConfig)}


def _stage(v):
    if isinstance(v, GrrStage):
        return v
    if not isinstance(v, (list, tuple)) or not 2 <= len(v) <= 4:
        raise ConfigError(f"grr stage must be [channels, guidance, (kernel, padding)], got {v!r}")
    return GrrStage(*v)


def run_config_from_text(text: str, path=None) -> RunConfig:
    entries = parse_lines(text, path)
    preset = "desk"
    if "preset" in entries:
        preset, lineno = entries.pop("preset")
        if preset not in PRESETS:
            raise ParseError(f"unknown preset {preset!r}", path, lineno)
    net = PRESETS[preset]()
    net_kw, pyr_kw, sgd_kw = {}, {}, {}
    rc = RunConfig(preset=preset)
    for key, (value, lineno) in entries.items():
        section, _, name = key.partition(".")
        if key in _NET_KEYS:
            net_kw[key] = value
        elif key == "encoder.layers":
            net_kw["encoder"] = value
        elif key == "grr.stages":
            net_kw["grr"] = tuple(_stage(s) for s in value)
        elif section == "pyramid" and name in _PYRAMID_KEYS:
            pyr_kw[name] = value
        elif section == "train" and name in _SGD_KEYS:
            sgd_kw[name] = tuple(tuple(s) for s in value) if name == "lr_steps" else value
        elif key == "train.ratio":
            rc.ratio = float(value)
        elif key == "train.occluded_only":
            rc.occluded_only = bool(value)
        else:
            raise ParseError(f"unknown config key {key!r}", path, lineno)
    try:
        if pyr_kw:
            net_kw["pyramid"] = replace(net.pyramid, **pyr_kw)
        rc.network = replace(net, **net_kw)
        rc.sgd = replace(rc.sgd, **sgd_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
    return rc


def load_run_config(source) -> RunConfig:
    """Accepts a preset name or a config file path."""
    if str(source) in PRESETS:
        return RunConfig(network=PRESETS[str(source)](), preset=str(source))
    p = Path(source)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {source}")
    return run_config_from_text(p.read_text(), p)


def load_config(source) -> NetworkConfig:
    return load_run_config(source).network


def dump_run_config(rc: RunConfig) -> str:
    n = rc.network
    lines = [
        f"input_dims = {format_value(n.input_dims)}",
        f"num_classes = {n.num_classes}",
        f"encoder.layers = {format_value([list(e) if e != 'pool' else e for e in n.encoder])}",
        f"grr.stages = {format_value([[s.channels, s.guidance, s.kernel, s.padding] for s in n.grr])}",
        f"output_resolution = {n.output_resolution}",
        f"subvolume_mode = {n.subvolume_mode}",
        f"grb_mode = {n.grb_mode}",
    ]
    lines += [f"pyramid.{f.name} = {format_value(getattr(n.pyramid, f.name))}" for f in fields(PyramidConfig)]
    lines += [f"train.{f.name} = {format_value(getattr(rc.sgd, f.name))}" for f in fields(SgdConfig)]
    lines += [f"train.ratio = {rc.ratio!r}", f"train.occluded_only = {rc.occluded_only!r}"]
    return "\n".join(lines) + "\n"


def load_grid_spec(source) -> VoxelGridSpec:
    """Grid preset name (``desk``/``full``) or a file of origin/voxel_size/dims/truncation keys."""
    if str(source) in GRID_PRESETS:
        return GRID_PRESETS[str(source)]
    p = Path(source)
    if not p.is_file():
        raise FileNotFoundError(f"grid spec not found: {source}")
    entries = parse_lines(p.read_text(), p)
    allowed = {f.name for f in fields(VoxelGridSpec)}
    kw = {}
    for key, (value, lineno) in entries.items():
        if key not in allowed:
            raise ParseError(f"unknown grid key {key!r}", p, lineno)
        kw[key] = tuple(value) if isinstance(value, list) else value
    return VoxelGridSpec(**kw)
