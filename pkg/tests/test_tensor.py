import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpnet.exceptions import ParseError, ShapeError
from ccpnet.tensor import (Parameter, argmax_axis, full, load_tensor, map_tensor, ravel_index, reduce_sum,
                           save_tensor, tensor_from_bytes, tensor_to_bytes, unravel_index, zeros, zip_tensors)


def test_zeros_and_full():
    assert zeros([2, 3]).size == 6 and not zeros([2, 3]).any()
    t = full([1, 1, 2, 2, 2], 1.5)
    assert t.size == 8 and np.all(t == 1.5)


@pytest.mark.parametrize("extents", [[1, 0], [], [1] * 6, [2, -1]])
def test_bad_extents(extents):
    with pytest.raises(ShapeError):
        zeros(extents)


def test_map_zip():
    assert zip_tensors(np.array([1.0, 2]), np.array([3.0, 4]), np.add).tolist() == [4, 6]
    assert map_tensor(np.array([0.0]), np.tanh).tolist() == [0.0]
    with pytest.raises(ShapeError):
        zip_tensors(np.zeros((2, 3)), np.zeros((3, 2)), np.add)


def test_reductions():
    assert argmax_axis(np.array([0.1, 0.7, 0.2]), 0) == 1
    assert argmax_axis(np.array([0.5, 0.5]), 0) == 0
    assert reduce_sum(np.array([1.0, 2, 3]), 0) == 6
    with pytest.raises(ShapeError):
        reduce_sum(np.zeros(3), 1)


extents_st = st.lists(st.integers(1, 6), min_size=1, max_size=5)


@given(extents_st, st.data())
@settings(max_examples=200, deadline=None)
def test_index_round_trip(extents, data):
    n = int(np.prod(extents))
    i = data.draw(st.integers(0, n - 1))
    coord = unravel_index(i, extents)
    assert ravel_index(coord, extents) == i
    assert coord == tuple(int(c) for c in np.unravel_index(i, extents))


def test_index_out_of_range():
    with pytest.raises(ShapeError):
        ravel_index((2, 0), (2, 3))
    with pytest.raises(ShapeError):
        unravel_index(6, (2, 3))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_cct1_round_trip(tmp_path, dtype):
    t = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    save_tensor(t, tmp_path / "t.cct")
    back = load_tensor(tmp_path / "t.cct")
    assert back.dtype == dtype and np.array_equal(back, t)


def test_cct1_truncated():
    data = tensor_to_bytes(np.ones((2, 2)))
    with pytest.raises(ParseError) as err:
        tensor_from_bytes(data[:-3])
    assert err.value.offset is not None
    with pytest.raises(ParseError):
        tensor_from_bytes(b"XXXX" + data[4:])


def test_parameter_grad():
    p = Parameter("w", np.ones(3))
    assert p.size == 3 and np.all(p.grad == 0)
    p.grad += 2
    p.zero_grad()
    assert np.all(p.grad == 0)
