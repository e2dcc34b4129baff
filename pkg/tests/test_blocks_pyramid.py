import numpy as np
import pytest

from ccpnet.blocks import NO_AMPLIFY, NO_GUIDANCE, BasicResidualBlock, GuidedResidualBlock
from ccpnet.exceptions import ConfigError, ShapeError
from ccpnet.gradcheck import LAYER_TOL, check_gradients, randomize_parameters
from ccpnet.layers import Conv3d, ConvSpec
from ccpnet.pyramid import (PARALLEL, ContextPyramid, PyramidConfig, aggregate_cascaded, aggregate_parallel)

TANH1_AMPLIFIED = 1.7615941559557649


def _zero(block):
    for p in block.parameters():
        p.value[...] = 0
    return block


def test_residual_branch_starts_at_zero():
    blk = BasicResidualBlock(3, "b", seed=1)
    assert not blk.h.conv2.weight.value.any() and blk.h.conv1.weight.value.any()
    x = np.abs(np.random.default_rng(0).standard_normal((1, 3, 3, 3, 3)))
    assert np.array_equal(blk.forward(x), x)


def test_brb_identity_cases():
    blk = _zero(BasicResidualBlock(2))
    x = np.abs(np.random.default_rng(1).standard_normal((1, 2, 3, 3, 3)))
    assert np.array_equal(blk.forward(x), x)
    assert not blk.forward(-np.ones((1, 2, 3, 3, 3))).any()
    with pytest.raises(ShapeError):
        blk.forward(np.zeros((1, 3, 3, 3, 3)))


def test_brb_gradcheck():
    rng = np.random.default_rng(2)
    blk = BasicResidualBlock(2, "b")
    params = randomize_parameters(blk.parameters(), rng)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    assert check_gradients(blk.forward, blk.backward, [x], params) < LAYER_TOL


def test_grb_algebra():
    grb = _zero(GuidedResidualBlock(2, name="g"))
    z = np.zeros((1, 2, 2, 2, 2))
    assert not grb.forward(z, z).any()
    x = np.full((1, 2, 2, 2, 2), 0.25)
    g = np.full_like(x, 0.75)
    out = grb.forward(x, g)
    assert np.abs(out - TANH1_AMPLIFIED).max() < 1e-6
    xh = np.random.default_rng(3).standard_normal((1, 2, 3, 3, 3))
    expected = np.maximum(xh * (1 + np.tanh(xh)), 0)
    assert np.abs(grb.forward(xh, np.zeros_like(xh)) - expected).max() < 1e-12


def test_grb_ablations():
    rng = np.random.default_rng(4)
    grb = GuidedResidualBlock(2, 3, "g", seed=1)
    randomize_parameters(grb.parameters(), rng)
    x = rng.standard_normal((1, 2, 3, 3, 3))
    g1, g2 = rng.standard_normal((2, 1, 3, 3, 3, 3))
    ng = grb.ablate(NO_GUIDANCE)
    assert np.array_equal(ng.forward(x, g1), ng.forward(x, g2))
    assert not np.array_equal(grb.forward(x, g1), grb.forward(x, g2))
    # no-guidance with no amplification is a BRB with the same h
    brb = BasicResidualBlock(2, "b")
    brb.h = ng.h
    both = ng.ablate(NO_AMPLIFY)
    assert np.array_equal(both.forward(x, g1), brb.forward(x))
    # no-amplify on nonnegative fused input with zero h is the identity
    na = _zero(GuidedResidualBlock(2, name="z")).ablate(NO_AMPLIFY)
    xp = np.abs(x)
    assert np.array_equal(na.forward(xp, np.zeros_like(xp)), xp)
    amp = _zero(GuidedResidualBlock(1, name="one"))
    one = np.full((1, 1, 1, 1, 1), 0.5)
    amplified = amp.forward(one, 0 * one).item()
    plain = amp.ablate(NO_AMPLIFY).forward(one, 0 * one).item()
    assert plain == 0.5 and abs(amplified - 0.5 * (1 + np.tanh(0.5))) < 1e-15
    with pytest.raises(ConfigError):
        grb.ablate("sideways")


def test_grb_gradcheck_with_projection():
    rng = np.random.default_rng(5)
    grb = GuidedResidualBlock(2, 3, "g")
    params = randomize_parameters(grb.parameters(), rng)
    x, g = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((1, 3, 4, 4, 4))
    assert check_gradients(grb.forward, grb.backward, [x, g], params) < LAYER_TOL
    with pytest.raises(ShapeError):
        grb.forward(x, g[:, :, :2])


@pytest.mark.parametrize("n", range(2, 7))
def test_cascade_of_identity_blocks_sums(n):
    rng = np.random.default_rng(n)
    ctx = [np.abs(rng.standard_normal((1, 3, 4, 4, 4))) for _ in range(n)]
    blocks = [_zero(BasicResidualBlock(3, f"f{i}")) for i in range(n - 1)]
    assert np.abs(aggregate_cascaded(ctx, blocks) - sum(ctx)).max() < 1e-12


def test_cascade_errors():
    ctx = [np.zeros((1, 2, 2, 2, 2))] * 3
    with pytest.raises(ConfigError):
        aggregate_cascaded(ctx[:1], [])
    with pytest.raises(ConfigError):
        aggregate_cascaded(ctx, [BasicResidualBlock(2)])


def test_parallel_selection():
    rng = np.random.default_rng(6)
    ctx = [rng.standard_normal((1, 4, 3, 3, 3)) for _ in range(3)]
    conv = Conv3d(ConvSpec(4, 1, in_channels=12), "g")
    conv.weight.value[...] = 0
    conv.weight.value[:, :4, 0, 0, 0] = np.eye(4)
    assert np.abs(aggregate_parallel(ctx, conv) - ctx[0]).max() < 1e-15


@pytest.mark.parametrize("mode", ["cascaded", "parallel"])
def test_pyramid_gradcheck_three_scales(mode):
    rng = np.random.default_rng(7)
    pyr = ContextPyramid(PyramidConfig((3, 2, 1), 2, mode), 4, "p")
    params = randomize_parameters(pyr.parameters(), rng)
    x = rng.standard_normal((1, 4, 4, 4, 4))
    assert check_gradients(pyr.forward, pyr.backward, [x], params) < LAYER_TOL


def test_contexts_and_impulse_support():
    cfg = PyramidConfig((4, 2, 1), 2)
    pyr = ContextPyramid(cfg, 2, "p")
    x = np.zeros((1, 2, 11, 11, 11))
    ctx = pyr.extract_contexts(x)
    assert len(ctx) == 3 and all(c.shape == (1, 2, 11, 11, 11) for c in ctx)
    for br, c in zip(pyr.branches, ctx):
        br.reduce.bias.value[...] = np.arange(2) + 1.0
    for c in pyr.extract_contexts(x):
        assert np.array_equal(c[0, :, 0, 0, 0], [1.0, 2.0]) and np.all(c[0, 1] == 2.0)
    x[0, 0, 5, 5, 5] = 1.0
    for br, d in zip(pyr.branches, cfg.rates):
        out = br.context.forward(x)
        nz = np.nonzero(np.abs(out).sum(axis=(0, 1)))
        for axis in nz:
            assert axis.max() - axis.min() + 1 == 2 * d + 1


def test_pyramid_config_validation():
    with pytest.raises(ConfigError):
        PyramidConfig((4,))
    with pytest.raises(ConfigError):
        PyramidConfig((2, 4, 1))
    with pytest.raises(ConfigError):
        PyramidConfig(mode="serial")


def test_mode_swap_changes_params_not_shapes():
    x = np.random.default_rng(8).standard_normal((1, 4, 5, 5, 5))
    a = ContextPyramid(PyramidConfig((3, 2, 1), 4), 4, "p")
    b = ContextPyramid(PyramidConfig((3, 2, 1), 4, PARALLEL), 4, "p")
    assert a.forward(x).shape == b.forward(x).shape
    na = sum(p.size for p in a.parameters())
    nb = sum(p.size for p in b.parameters())
    branches = 3 * ((4 * 4 * 27 + 4) + (4 * 4 + 4))
    assert na == branches + 2 * 2 * (4 * 4 * 27 + 4)
    assert nb == branches + (12 * 4 + 4)
