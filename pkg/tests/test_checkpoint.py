import json
import numpy as np
import pytest
from numpy.testing import assert_equal

from tbdmnet.checkpoint import (
    FORMAT_VERSION,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from tbdmnet.model import ModelConfig, build, predict_proba
from tbdmnet.util import ConfigError, DataError

LABELS = ("angry", "happy", "sad")


@pytest.fixture
def model():
    cfg = ModelConfig(n_classes=3, input_channels=5, n_tabs=2, dilations=(1, 3), filters=4)
    params = build(cfg, rng=11)
    rng = np.random.default_rng(3)
    for _, buf in params.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, size=buf.shape)
    return cfg, params


def split(raw):
    end = raw.index(b"\0")
    return json.loads(raw[:end]), raw[end + 1 :]


def join(header, payload):
    return json.dumps(header).encode() + b"\0" + payload


def test_layout(model):
    cfg, params = model
    header, payload = split(to_bytes(params, cfg, LABELS, 80, "golden"))
    assert header["format_version"] == FORMAT_VERSION
    assert header["model_config"] == cfg.to_dict()
    assert header["label_set"] == list(LABELS)
    assert header["frames"] == 80
    assert header["gender_mode"] == "golden"
    names = [e["name"] for e in header["tensors"]]
    assert names[0] == "forward.0.sub1.weight"
    assert "fc.bias" in names
    assert "reverse.1.sub2.running_var" in names
    n_values = params.parameter_count() + sum(b.size for _, b in params.named_buffers())
    assert len(payload) == 4 * n_values
    offsets = [e["byte_offset"] for e in header["tensors"]]
    assert offsets[0] == 0
    assert offsets == sorted(offsets)


def test_round_trip_is_bitwise(model, tmp_path):
    cfg, params = model
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, cfg, LABELS, 64)
    ckpt = load_checkpoint(path)
    assert ckpt.config == cfg
    assert ckpt.label_set == LABELS
    assert ckpt.frames == 64
    assert ckpt.gender_mode == "none"
    before = params.state_dict()
    after = ckpt.params.state_dict()
    assert before.keys() == after.keys()
    for k in before:
        assert after[k].dtype == np.float32
        assert_equal(after[k], before[k])

    x = np.random.default_rng(5).normal(size=(100, 5, 64)).astype(np.float32)
    assert_equal(ckpt.predict(x), predict_proba(params, cfg, x))
    assert path.read_bytes() == to_bytes(ckpt.params, cfg, LABELS, 64)


def test_label_set_must_match(model):
    cfg, params = model
    with pytest.raises(ConfigError, match="label set of size 2"):
        to_bytes(params, cfg, LABELS[:2])
    header, payload = split(to_bytes(params, cfg, LABELS))
    header["label_set"] = ["a"]
    with pytest.raises(DataError, match="label set of size 1"):
        from_bytes(join(header, payload))


def test_corrupt_header(model):
    cfg, params = model
    raw = to_bytes(params, cfg, LABELS)
    with pytest.raises(DataError, match="not terminated"):
        from_bytes(b"{}")
    with pytest.raises(DataError, match="corrupt checkpoint header"):
        from_bytes(b"{nope\0")
    header, payload = split(raw)
    header["format_version"] = 99
    with pytest.raises(DataError, match="version 99"):
        from_bytes(join(header, payload))
    header, payload = split(raw)
    header["model_config"]["depth"] = 3
    with pytest.raises(DataError, match="invalid checkpoint header"):
        from_bytes(join(header, payload))
    header, payload = split(raw)
    del header["tensors"]
    with pytest.raises(DataError, match="invalid checkpoint header"):
        from_bytes(join(header, payload))


def test_corrupt_payload(model):
    cfg, params = model
    header, payload = split(to_bytes(params, cfg, LABELS))
    with pytest.raises(DataError, match="reverse.1.sub2.running_var lies outside"):
        from_bytes(join(header, payload[:-4]))
    header["tensors"] = header["tensors"][1:]
    with pytest.raises(DataError, match="forward.0.sub1.weight"):
        from_bytes(join(header, payload), "m.ckpt")


def test_load_missing(tmp_path):
    with pytest.raises(DataError, match="cannot read checkpoint"):
        load_checkpoint(tmp_path / "none.ckpt")
