"""Central finite-difference gradient checks for every layer type.

The error of a gradient tensor is max|analytic - numeric| divided by the
larger of max|analytic| and max|numeric| over the checked entries, i.e. a
relative error in the max norm.  Each check contracts the layer output with
a fixed random tensor so the scalar objective exercises every output.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .blocks import BasicResidualBlock, GuidedResidualBlock
from .layers import Conv3d, ConvSpec, Deconv3d, DeconvSpec, MaxPool3d, ReLU, Tanh
from .network import POOL, NetworkConfig, plan
from .pyramid import CASCADED, PARALLEL, ContextPyramid
from .training import softmax_loss

LAYER_TOL = 1e-4
LOSS_TOL = 1e-6
KINK_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def rel_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _sample(shape, rng, samples):
    size = int(np.prod(shape))
    if samples is None or size <= samples:
        return [np.unravel_index(i, shape) for i in range(size)]
    return [np.unravel_index(i, shape) for i in rng.choice(size, samples, replace=False)]


def numeric_grad(objective, arr, indices, eps=1e-5, return_kinks=False):
    """Central differences at ``indices``; optionally also a mask of entries
    where the one-sided slopes disagree by more than KINK_TOL."""
    out = np.empty(len(indices))
    kinks = np.zeros(len(indices), dtype=bool)
    base = objective() if return_kinks else 0.0
    for j, i in enumerate(indices):
        orig = arr[i]
        arr[i] = orig + eps
        plus = objective()
        arr[i] = orig - eps
        minus = objective()
        arr[i] = orig
        out[j] = (plus - minus) / (2 * eps)
        if return_kinks:
            fwd, bwd = (plus - base) / eps, (base - minus) / eps
            kinks[j] = abs(fwd - bwd) > KINK_TOL * max(abs(fwd), abs(bwd), 1e-8)
    return (out, kinks) if return_kinks else out


def check_gradients(forward, backward, inputs, params=(), seed=0, samples=40, eps=1e-5,
                    param_samples=None) -> float:
    """Worst relative error over the inputs and parameters of one layer.

    ``forward(*inputs)`` returns an array or a list of arrays; ``backward(g)``
    receives matching upstream gradients and returns the input gradients (an
    array or a tuple/list aligned with ``inputs``).
    """
    rng = np.random.default_rng(seed)
    params = list(params)
    out = forward(*inputs)
    multi = isinstance(out, (list, tuple))
    outs = list(out) if multi else [out]
    weights = [rng.standard_normal(o.shape) for o in outs]

    def objective():
        o = forward(*inputs)
        o = list(o) if multi else [o]
        return float(sum((a * w).sum() for a, w in zip(o, weights)))

    for p in params:
        p.zero_grad()
    forward(*inputs)
    grads = backward(weights if multi else weights[0])
    if not isinstance(grads, (list, tuple)):
        grads = [grads]
    targets = list(zip(inputs, grads)) + [(p.value, p.grad.copy()) for p in params]
    worst = 0.0
    for k, (arr, grad) in enumerate(targets):
        n = samples if k < len(inputs) or param_samples is None else param_samples
        idx = _sample(arr.shape, rng, n)
        num, kinks = numeric_grad(objective, arr, idx, eps, return_kinks=True)
        ana = np.array([grad[i] for i in idx])
        worst = max(worst, rel_error(ana[~kinks], num[~kinks]))
    return worst


def _randn(rng, shape):
    return rng.standard_normal(shape)


def randomize_parameters(params, rng):
    """Replace every parameter with random values so zero-initialised
    branches still contribute to the checked gradient."""
    params = list(params)
    for p in params:
        fan = max(1, int(np.prod(p.value.shape[1:]))) if p.value.ndim > 1 else 1
        p.value[...] = rng.standard_normal(p.value.shape) * np.sqrt(2.0 / fan)
    return params


def layer_checks(cfg: NetworkConfig, seed: int = 0, n: int = 6):
    """Yield CheckResults for every distinct layer/block in ``cfg`` at 64-bit
    on random inputs no larger than n^3."""
    rng = np.random.default_rng(seed)
    p = plan(cfg)
    for name, spec, ch, _ in p.encoder:
        if spec == POOL:
            pool = MaxPool3d()
            x = _randn(rng, (1, ch, n, n, n))
            yield CheckResult(f"dce.{name} (maxpool)", check_gradients(pool.forward, pool.backward, [x], seed=seed), LAYER_TOL)
            continue
        depth = n - n % spec.subvolumes if spec.mode == "spatial-split" else n
        conv = Conv3d(spec, f"dce.{name}", seed)
        conv.bias.value[...] = rng.standard_normal(conv.bias.value.shape)
        x = _randn(rng, (1, spec.in_channels, depth, n, n))
        err = check_gradients(conv.forward, conv.backward, [x], conv.parameters(), seed)
        yield CheckResult(f"dce.{name} (conv k{spec.kernel} d{spec.dilation} S{spec.subvolumes})", err, LAYER_TOL)

    enc_ch = p.encoder_out[0]
    m = min(n, 4)  # the pyramid is the widest block; keep its check cheap
    for mode in (CASCADED, PARALLEL):
        pyr = ContextPyramid(replace(cfg.pyramid, mode=mode), enc_ch, "ccp", seed)
        x = _randn(rng, (1, enc_ch, m, m, m))
        err = check_gradients(pyr.forward, pyr.backward, [x], randomize_parameters(pyr.parameters(), rng), seed,
                              param_samples=12)
        yield CheckResult(f"ccp ({mode}, rates {list(cfg.pyramid.rates)})", err, LAYER_TOL)

    b = cfg.pyramid.branch_channels
    brb = BasicResidualBlock(b, "brb", seed)
    x = _randn(rng, (1, b, n, n, n))
    yield CheckResult(f"brb ({b} ch)", check_gradients(brb.forward, brb.backward, [x], randomize_parameters(brb.parameters(), rng), seed), LAYER_TOL)

    ch = b
    half = max(1, n // 2)
    for (name, dspec, gch, _), stage in zip(p.stages, cfg.grr):
        deconv = Deconv3d(dspec, f"{name}.deconv", seed)
        x = _randn(rng, (1, ch, half, half, half))
        err = check_gradients(deconv.forward, deconv.backward, [x], deconv.parameters(), seed)
        yield CheckResult(f"{name}.deconv (k{dspec.kernel} s{dspec.stride})", err, LAYER_TOL)
        ch = dspec.filters
        out = dspec.output_spatial((half,) * 3)
        grb = GuidedResidualBlock(ch, gch, f"{name}.grb", seed)
        x = _randn(rng, (1, ch) + out)
        g = _randn(rng, (1, gch) + out)
        err = check_gradients(grb.forward, grb.backward, [x, g], randomize_parameters(grb.parameters(), rng), seed)
        yield CheckResult(f"{name}.grb ({ch} ch, guidance {gch} ch)", err, LAYER_TOL)

    head = Conv3d(ConvSpec(cfg.num_classes, 1, in_channels=p.head_in), "head", seed)
    x = _randn(rng, (1, p.head_in, n, n, n))
    yield CheckResult("head (1x1x1 conv)", check_gradients(head.forward, head.backward, [x], head.parameters(), seed), LAYER_TOL)

    relu = ReLU()
    x = _randn(rng, (1, 2, n, n, n))
    x += np.sign(x) * 0.1  # keep finite differences off the kink
    yield CheckResult("relu", check_gradients(relu.forward, relu.backward, [x], seed=seed), LAYER_TOL)
    tanh = Tanh()
    x = _randn(rng, (1, 2, n, n, n))
    yield CheckResult("tanh", check_gradients(tanh.forward, tanh.backward, [x], seed=seed), LAYER_TOL)

    yield CheckResult("softmax loss", loss_check(cfg.num_classes, seed), LOSS_TOL)


def loss_check(num_classes: int = 12, seed: int = 0, n: int = 3) -> float:
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((1, num_classes, n, n, n))
    labels = rng.integers(0, num_classes, (n, n, n))
    weights = (rng.random((n, n, n)) < 0.7).astype(np.float64)
    weights.reshape(-1)[0] = 1.0
    ana = softmax_loss(scores, labels, weights).grad
    idx = [np.unravel_index(i, scores.shape) for i in range(scores.size)]
    num = numeric_grad(lambda: softmax_loss(scores, labels, weights).loss, scores, idx)
    return rel_error(np.array([ana[i] for i in idx]), num)
