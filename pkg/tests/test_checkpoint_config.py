import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fdnas.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from fdnas.config import ExperimentConfig, config_from_dict, load_config

ids = st.text("abcdefghij./_0123456789", min_size=1, max_size=20)
values = arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                elements=st.floats(allow_nan=False, allow_infinity=False, width=64))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(ids, values, max_size=5), st.integers(0, 1000))
def test_checkpoint_roundtrip(arrays_, rnd):
    ck = Checkpoint(rnd, {"k": [1, 2], "s": "x"}, arrays_)
    back = from_bytes(to_bytes(ck))
    assert back.round == rnd and back.header == ck.header
    assert set(back.arrays) == set(arrays_)
    for key, arr in arrays_.items():
        assert back.arrays[key].shape == arr.shape
        np.testing.assert_array_equal(back.arrays[key], arr)


def test_checkpoint_bytes_do_not_depend_on_insertion_order():
    a = Checkpoint(1, {}, {"b": np.ones(2), "a": np.zeros(3)})
    b = Checkpoint(1, {}, {"a": np.zeros(3), "b": np.ones(2)})
    assert to_bytes(a) == to_bytes(b)


def test_checkpoint_corruption_is_reported(tmp_path):
    ck = Checkpoint(3, {"x": 1}, {"global/w": np.arange(6.0).reshape(2, 3)})
    save_checkpoint(ck, tmp_path / "c.ckpt")
    blob = (tmp_path / "c.ckpt").read_bytes()
    assert load_checkpoint(tmp_path / "c.ckpt").group("global")["w"].shape == (2, 3)
    with pytest.raises(ValueError, match="truncated"):
        from_bytes(blob[:-5])
    with pytest.raises(ValueError, match="magic"):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="version"):
        from_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(ValueError, match="trailing"):
        from_bytes(blob + b"\0")


def test_config_defaults_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 4\nfederation:\n  rounds: 7\n  online: {kind: fixed, value: 3}\n")
    cfg = load_config(path, {"out_dir": str(tmp_path / "o"), "seed": None})
    assert cfg.seed == 4 and cfg.federation.rounds == 7 and cfg.federation.online.kind == "fixed"
    assert cfg.federation.local_epochs == 5 and cfg.out_dir == str(tmp_path / "o")
    echo = json.loads(cfg.resolved_json())
    assert echo["loss"]["lambda1"] == 1.5e-4 and "zero" not in echo["space"]["candidates"]
    cfg.validate()


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ValueError, match="federation"):
        config_from_dict({"federation": {"roundz": 3}})
    with pytest.raises(ValueError, match="cluster key"):
        config_from_dict({"cluster": {"key": "colour"}}).validate()
    with pytest.raises(ValueError, match="not found"):
        config_from_dict({"cluster": {"tables": {"gpu": str(tmp_path / "none.csv")}}}).validate()
    with pytest.raises(ValueError, match="hardware tags"):
        config_from_dict({"federation": {"num_devices": 3, "hardware_tags": ["gpu"]}}).validate()


def test_search_space_from_config():
    space = ExperimentConfig().search_space()
    assert space.num_layers == 8 and space.downsample_layers == [2]
    assert all("identity" not in l.candidate_ids() for l in space.layers if not l.shape_preserving)
