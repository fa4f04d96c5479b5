import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ucl.checkpoint import MAGIC, decode_tensors, encode_tensors, read_tensors, write_tensors
from ucl.config import RunConfig, config_from_dict, load_config, load_data_config
from ucl.errors import ConfigError, FormatError


def test_defaults():
    cfg = load_config(None)
    assert cfg.optim.lr == 2e-4 and cfg.optim.weight_decay == 0.01
    assert cfg.optim.betas == (0.9, 0.999) and cfg.optim.clip == 5.0
    assert cfg.schedule.warmup_frac == 0.05 and cfg.train.tau == 0.05
    assert cfg.train.batch_size == 8 and cfg.train.ratio == (1, 1)
    assert (cfg.data.train_per_class, cfg.data.eval_per_class, cfg.data.align_pairs) == (50, 20, 800)
    assert (cfg.model.visual.image_size, cfg.model.visual.patch_size, cfg.model.visual.out_dim) == (32, 8, 64)


def test_partial_override_and_roundtrip():
    cfg = config_from_dict({"mode": "split_head", "optim": {"lr": 1e-3}, "data": {"held_out": [["red", "square"]]}})
    assert cfg.mode == "split_head" and cfg.optim.lr == 1e-3 and cfg.optim.clip == 5.0
    assert cfg.data.held_out == (("red", "square"),)
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash() == cfg.hash()


def test_hash_is_content_sensitive():
    assert RunConfig().hash() == RunConfig().hash()
    assert RunConfig().hash() != RunConfig(seed=1).hash()


@pytest.mark.parametrize("raw", [
    {"lr": 1e-3},
    {"optim": {"learning_rate": 1e-3}},
    {"model": {"visual": {"widht": 8}}},
])
def test_unknown_keys_rejected(raw):
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"seed": "0"},
    {"seed": True},
    {"enriched": 1},
    {"optim": {"lr": "fast"}},
    {"mode": 3},
    {"optim": []},
])
def test_wrong_types_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"mode": "both"},
    {"schedule": {"warmup_frac": 1.0}},
    {"optim": {"clip": 0}},
    {"train": {"tau": 0}},
    {"data": {"image_size": 16}},
    {"fewshot": {"init": "zeros"}},
])
def test_invalid_values_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_load_config_file_errors(tmp_path):
    bad = tmp_path / "run.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    data = tmp_path / "data.json"
    data.write_text(json.dumps({"train_per_class": 3, "seed": 9}))
    assert load_data_config(data).train_per_class == 3
    data.write_text(json.dumps({"train_per_klass": 3}))
    with pytest.raises(ConfigError):
        load_data_config(data)


# ---------------------------------------------------------------------------
# tensor container


tensor_dicts = st.dictionaries(
    st.text(min_size=1, max_size=12),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=False, width=64)),
    max_size=5,
)


@given(tensor_dicts)
def test_container_roundtrip_bit_exact(tensors):
    blob = encode_tensors(tensors)
    back = decode_tensors(blob)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    assert encode_tensors(back) == blob


def test_container_layout():
    blob = encode_tensors({"w": np.array([[1.0, 2.0]])})
    expected = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w" + struct.pack("<B2I", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0)
    assert blob == expected


def test_bad_magic_reports_offset_zero():
    with pytest.raises(FormatError) as info:
        decode_tensors(b"NOTACKPT" + b"\0" * 8)
    assert info.value.offset == 0


def test_truncation_reports_offset():
    blob = encode_tensors({"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4)})
    for cut in (3, 10, 15, len(blob) - 1):
        with pytest.raises(FormatError) as info:
            decode_tensors(blob[:cut])
        assert info.value.offset is not None and 0 <= info.value.offset <= cut


def test_trailing_bytes_and_duplicates():
    blob = encode_tensors({"a": np.ones(2)})
    with pytest.raises(FormatError):
        decode_tensors(blob + b"\0")
    one = encode_tensors({"a": np.ones(1)})
    body = one[len(MAGIC) + 4:]
    with pytest.raises(FormatError, match="duplicate"):
        decode_tensors(MAGIC + struct.pack("<I", 2) + body + body)


def test_file_roundtrip_is_atomic(tmp_path):
    path = tmp_path / "x.ckpt"
    write_tensors(path, {"a": np.eye(2)})
    assert np.array_equal(read_tensors(path)["a"], np.eye(2))
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]
    with pytest.raises(FormatError):
        read_tensors(tmp_path / "missing.ckpt")
