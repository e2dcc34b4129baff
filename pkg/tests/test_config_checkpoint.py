import numpy as np
import pytest

from ccpnet import checkpoint
from ccpnet.config import (dump_run_config, load_config, load_grid_spec, load_run_config, parse_value,
                           run_config_from_text)
from ccpnet.exceptions import ConfigError, ParseError
from ccpnet.network import build, desk_config, tiny_config
from ccpnet.voxel import GRID_PRESETS


def test_checkpoint_round_trip(tmp_path):
    state = build(tiny_config(), seed=1).state_dict()
    checkpoint.save(tmp_path / "w.ccpw", state)
    back = checkpoint.load(tmp_path / "w.ccpw")
    assert list(back) == list(state)
    assert all(np.array_equal(back[k], state[k].astype(np.float32)) for k in state)
    net = build(tiny_config(), seed=2)
    net.load_state_dict(back)
    assert all(np.array_equal(net.state_dict()[k], back[k]) for k in back)


def test_checkpoint_layout():
    data = checkpoint.dumps({"a": np.array([1.5, -2.0], np.float32)})
    assert data == b"CCPW" + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + b"a" + b"\x01" + \
        (2).to_bytes(4, "little") + np.array([1.5, -2.0], "<f4").tobytes()


def test_checkpoint_errors():
    data = checkpoint.dumps({"w": np.ones((2, 3), np.float32), "b": np.zeros(3, np.float32)})
    for cut in (2, 6, 9, len(data) - 1):
        with pytest.raises(ParseError) as err:
            checkpoint.loads(data[:cut])
        assert err.value.offset is not None and err.value.offset <= cut
    with pytest.raises(ParseError, match="magic"):
        checkpoint.loads(b"CCPX" + data[4:])
    with pytest.raises(ParseError, match="trailing"):
        checkpoint.loads(data + b"\0")


def test_checkpoint_wrong_network():
    state = checkpoint.loads(checkpoint.dumps(build(tiny_config()).state_dict()))
    with pytest.raises(ConfigError):
        build(desk_config()).load_state_dict(state)


def test_parse_value():
    assert parse_value("[8, 6, 4]") == [8, 6, 4]
    assert parse_value("parallel") == "parallel"
    assert parse_value("[[16, dce.conv1], pool]") == [[16, "dce.conv1"], "pool"]
    assert parse_value("True") is True and parse_value("0.5") == 0.5


def test_run_config_text():
    rc = run_config_from_text("""
        # comment line
        preset = tiny
        pyramid.mode = parallel      # trailing comment
        pyramid.rates = [3, 1]
        grb_mode = no-amplify
        train.learning_rate = 0.02
        train.lr_steps = [[100, 0.002]]
        train.ratio = 3
    """)
    assert rc.preset == "tiny" and rc.network.pyramid.mode == "parallel"
    assert rc.network.pyramid.rates == (3, 1) and rc.network.grb_mode == "no-amplify"
    assert rc.sgd.learning_rate == 0.02 and rc.sgd.lr_at(100) == 0.002 and rc.ratio == 3.0
    assert rc.network.input_dims == tiny_config().input_dims


def test_dump_round_trip(tmp_path):
    for preset in ("desk", "tiny", "full"):
        rc = load_run_config(preset)
        (tmp_path / f"{preset}.cfg").write_text(dump_run_config(rc))
        back = load_run_config(tmp_path / f"{preset}.cfg")
        assert back.network == rc.network and back.sgd == rc.sgd


def test_config_errors(tmp_path):
    with pytest.raises(ParseError) as err:
        run_config_from_text("preset = desk\nbogus.key = 1\n", "x.cfg")
    assert err.value.offset == 2 and "x.cfg" in str(err.value)
    with pytest.raises(ParseError):
        run_config_from_text("just words\n")
    with pytest.raises(ParseError):
        run_config_from_text("preset = huge\n")
    with pytest.raises(ConfigError):
        run_config_from_text("pyramid.rates = [4]\n")
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.cfg")


def test_grid_spec(tmp_path):
    assert load_grid_spec("desk").dims == (60, 36, 60)
    (tmp_path / "g.txt").write_text("origin = [0, 0, 0]\nvoxel_size = 0.1\ndims = [4, 5, 6]\ntruncation = 0.3\n")
    spec = load_grid_spec(tmp_path / "g.txt")
    assert spec.dims == (4, 5, 6) and spec.truncation == 0.3
    (tmp_path / "h.txt").write_text("voxel_size = 0.1\ncolour = red\n")
    with pytest.raises(ParseError):
        load_grid_spec(tmp_path / "h.txt")
    assert set(GRID_PRESETS) >= {"desk", "full", "tiny"}
