"""Static parameter and multiply-accumulate accounting.

Counts come from closed forms over the config; nothing is executed.  A
convolution costs F * (C/S) * k^3 weights plus F biases and
F * (C/S) * k^3 MACs per output voxel; FLOPs are reported as 2 * MACs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import POOL, NetworkConfig, plan
from .pyramid import CASCADED


@dataclass
class CostRow:
    name: str
    kind: str
    weights: int
    biases: int
    macs: int

    @property
    def params(self) -> int:
        return self.weights + self.biases


@dataclass
class CostReport:
    rows: list = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def weights(self) -> int:
        return sum(r.weights for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def format(self, tsv: bool = False) -> str:
        header = ("layer", "kind", "params", "MACs")
        body = [(r.name, r.kind, str(r.params), str(r.macs)) for r in self.rows]
        total = ("total", "", str(self.params), str(self.macs))
        if tsv:
            lines = ["\t".join(row) for row in [header, *body, total]]
            lines.append(f"flops\t\t\t{self.flops}")
            return "\n".join(lines) + "\n"
        rows = [header, *body, total]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        fmt = lambda r: f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:>{widths[2]}}  {r[3]:>{widths[3]}}"
        lines = [fmt(header), "-" * (sum(widths) + 6), *map(fmt, body), "-" * (sum(widths) + 6), fmt(total)]
        lines.append(f"params {self.params / 1e3:.1f}k   MACs {self.macs / 1e9:.3f}G   FLOPs {self.flops / 1e9:.3f}G")
        return "\n".join(lines) + "\n"


def _vox(spatial) -> int:
    return int(np.prod(spatial))


def conv_cost(name, in_ch, out_ch, kernel, out_spatial, groups=1, kind="conv", bias=True) -> CostRow:
    w = out_ch * (in_ch // groups) * kernel ** 3
    return CostRow(name, kind, w, out_ch if bias else 0, w * _vox(out_spatial))


def deconv_cost(name, in_ch, out_ch, kernel, in_spatial, groups=1) -> CostRow:
    # every input voxel scatters into k^3 outputs per (in, out/S) channel pair
    w = in_ch * (out_ch // groups) * kernel ** 3
    return CostRow(name, "deconv", w, out_ch, w * _vox(in_spatial))


def profile(cfg: NetworkConfig) -> CostReport:
    p = plan(cfg)
    rep = CostReport()
    for name, spec, _, spatial in p.encoder:
        if spec == POOL:
            rep.rows.append(CostRow(f"dce.{name}", "pool", 0, 0, 0))
            continue
        kind = "dilated-conv" if spec.dilation > 1 else "conv"
        if spec.mode == "spatial-split":
            w = spec.subvolumes * spec.filters * spec.in_channels * spec.kernel ** 3
            macs = spec.filters * spec.in_channels * spec.kernel ** 3 * _vox(spatial)
            rep.rows.append(CostRow(f"dce.{name}", kind, w, spec.filters, macs))
        else:
            rep.rows.append(conv_cost(f"dce.{name}", spec.in_channels, spec.filters, spec.kernel, spatial,
                                      spec.subvolumes, kind))
    enc_ch, qsp = p.encoder_out
    pc = cfg.pyramid
    b = pc.branch_channels
    for i, d in enumerate(pc.rates):
        rep.rows.append(conv_cost(f"ccp.branch{i}.context", enc_ch, b, 3, qsp, pc.subvolumes, "dilated-conv"))
        rep.rows.append(conv_cost(f"ccp.branch{i}.reduce", b, b, 1, qsp))
    if pc.mode == CASCADED:
        for i in range(1, pc.n):
            for j in (1, 2):
                rep.rows.append(conv_cost(f"ccp.f{i}.h.conv{j}", b, b, 3, qsp, kind="brb-conv"))
    else:
        rep.rows.append(conv_cost("ccp.g", pc.n * b, b, 1, qsp, kind="concat-conv"))
    ch, sp = b, qsp
    for name, dspec, gch, out_sp in p.stages:
        rep.rows.append(deconv_cost(f"{name}.deconv", ch, dspec.filters, dspec.kernel, sp, dspec.subvolumes))
        ch, sp = dspec.filters, out_sp
        block = "brb" if cfg.grb_mode == "brb" else "grb"
        if gch != ch and block == "grb":
            proj = conv_cost(f"{name}.grb.proj", gch, ch, 1, sp)
            if cfg.grb_mode == "no-guidance":
                proj.macs = 0
            rep.rows.append(proj)
        for j in (1, 2):
            rep.rows.append(conv_cost(f"{name}.{block}.h.conv{j}", ch, ch, 3, sp, kind=f"{block}-conv"))
    rep.rows.append(conv_cost("head", p.head_in, cfg.num_classes, 1, p.output_spatial))
    return rep


def sscnet_reference(input_dims=(240, 144, 240), num_classes: int = 12, subvolumes: int = 1) -> CostReport:
    """Cost of the SSCNet-shaped baseline: 7^3 stride-2 stem, five residual
    blocks (the last two dilated), concatenation of three block outputs and
    three 1x1x1 convs, predicting at quarter resolution.  ``subvolumes``
    applies separated kernels to the dilated convs."""
    half = tuple(n // 2 for n in input_dims)
    q = tuple(n // 4 for n in input_dims)
    rows = [conv_cost("conv1", 1, 16, 7, half)]
    rows += [conv_cost("res1.conv1", 16, 32, 3, half), conv_cost("res1.conv2", 32, 32, 3, half),
             conv_cost("res1.skip", 16, 32, 1, half), CostRow("pool", "pool", 0, 0, 0)]
    rows += [conv_cost("res2.conv1", 32, 64, 3, q), conv_cost("res2.conv2", 64, 64, 3, q),
             conv_cost("res2.skip", 32, 64, 1, q)]
    rows += [conv_cost("res3.conv1", 64, 64, 3, q), conv_cost("res3.conv2", 64, 64, 3, q)]
    for blk in ("res4", "res5"):
        rows += [conv_cost(f"{blk}.conv{j}", 64, 64, 3, q, subvolumes, "dilated-conv") for j in (1, 2)]
    rows += [conv_cost("fuse1", 192, 128, 1, q), conv_cost("fuse2", 128, 128, 1, q),
             conv_cost("score", 128, num_classes, 1, q)]
    return CostReport(rows)


def compare(a: CostReport, b: CostReport) -> dict:
    """Ratios a / b of the totals, and of weights per layer name present in both."""
    def ratio(x, y):
        return round(x / y, 3) if y else float("nan")
    totals = {
        "params": ratio(a.params, b.params),
        "weights": ratio(a.weights, b.weights),
        "macs": ratio(a.macs, b.macs),
        "flops": ratio(a.flops, b.flops),
    }
    names_b = {r.name: r for r in b.rows}
    layers = {r.name: ratio(r.weights, names_b[r.name].weights)
              for r in a.rows if r.name in names_b and names_b[r.name].weights}
    return {"totals": totals, "layers": layers}


def format_comparison(result: dict) -> str:
    lines = [f"{k}\t{v:.3f}" for k, v in result["totals"].items()]
    lines += [f"weights:{k}\t{v:.3f}" for k, v in result["layers"].items()]
    return "\n".join(lines) + "\n"
