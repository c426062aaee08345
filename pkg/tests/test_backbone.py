import numpy as np
import pytest

from exitwise.backbone import Backbone, BackboneConfig, load_checkpoint
from exitwise.checkpoint import MAGIC, read_tensor_file, write_tensor_file
from exitwise.errors import (
    CheckpointFormatError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    ConfigError,
    ContractError,
    ShapeError,
)
from exitwise.tensor import Tensor


def tiny_config(**kws):
    base = dict(num_layers=3, hidden=8, heads=2, ff_dim=16, head_dims=(6, 7))
    base.update(kws)
    return BackboneConfig(**base)


def wave(batch=2, samples=64, seed=0):
    return Tensor(np.random.default_rng(seed).normal(0, 0.3, (batch, samples)).astype(np.float32))


def test_config_invariants():
    with pytest.raises(ConfigError):
        BackboneConfig(num_layers=1)
    with pytest.raises(ConfigError):
        BackboneConfig(hidden=10, heads=4)
    with pytest.raises(ConfigError):
        BackboneConfig(dropout=1.0)


def test_feature_encode_frame_formula():
    cfg = tiny_config()
    model = Backbone(cfg, seed=1)
    s = 64
    out = model.feature_encode(wave(samples=s))
    # analytic stride arithmetic per conv
    expect = s
    for _, k, st in cfg.encoder_convs:
        expect = (expect - k) // st + 1
    assert out.shape == (2, expect, cfg.hidden)
    assert cfg.frames_for(s) == expect


def test_feature_encode_zero_waveform_finite():
    model = Backbone(tiny_config(), seed=1)
    out = model.feature_encode(Tensor(np.zeros((3, 40), dtype=np.float32)))
    assert np.isfinite(out.data).all()


def test_feature_encode_too_short_reports_minimum():
    cfg = tiny_config()
    model = Backbone(cfg, seed=1)
    with pytest.raises(ShapeError, match=str(cfg.min_input_length())):
        model.feature_encode(Tensor(np.zeros((1, cfg.min_input_length() - 1), dtype=np.float32)))


def test_batch_independence_bit_identical():
    model = Backbone(tiny_config(), seed=1)
    x1 = wave(batch=1, samples=48, seed=3)
    x2 = Tensor(np.vstack([x1.data, x1.data]))
    a = model.feature_encode(x1).data
    b = model.feature_encode(x2).data
    assert a[0].tobytes() == b[0].tobytes() == b[1].tobytes()


def test_forward_to_layer_counts_and_retain():
    model = Backbone(tiny_config(), seed=1)
    before = model.layer_calls
    states = model.forward_to_layer(wave(), 3, retain={2, 3})
    assert model.layer_calls - before == 3
    assert sorted(states.states) == [2, 3]

    before = model.layer_calls
    model.forward_to_layer(wave(), 2)
    assert model.layer_calls - before == 2

    with pytest.raises(ContractError):
        model.forward_to_layer(wave(), 4)
    with pytest.raises(ContractError):
        model.forward_to_layer(wave(), 2, retain={3})


def test_prefix_consistency():
    model = Backbone(tiny_config(), seed=2)
    x = wave(seed=5)
    shallow = model.forward_to_layer(x, 2, retain={1, 2})
    deep = model.forward_to_layer(x, 3, retain={1, 2, 3})
    for j in (1, 2):
        assert shallow.states[j].data.tobytes() == deep.states[j].data.tobytes()


def test_teacher_head_shapes_and_zero_map():
    cfg = tiny_config()
    model = Backbone(cfg, seed=1)
    logits, linear_act, pooled = model.forward(wave())
    assert logits.shape == (2, 7)
    assert linear_act.shape == (2, cfg.head_dims[0])
    assert pooled.shape == (2, cfg.hidden)
    # final projection starts at zero, so logits are exactly zero
    np.testing.assert_array_equal(logits.data, 0.0)
    # identical rows in, identical rows out
    x = wave(batch=1, samples=48, seed=9)
    both = Tensor(np.vstack([x.data, x.data]))
    o = model.forward(both)[0]
    assert o.data[0].tobytes() == o.data[1].tobytes()


def test_forward_pure_without_dropout():
    model = Backbone(tiny_config(), seed=4)
    x = wave(seed=11)
    a = model.forward(x)[2].data
    b = model.forward(x)[2].data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config()
    model = Backbone(cfg, seed=7)
    path = tmp_path / "model.ckpt"
    model.save_checkpoint(path)
    loaded = load_checkpoint(path, cfg, seed=99)
    for name, p in model.parameters().items():
        assert loaded.parameters()[name].data.tobytes() == p.data.tobytes(), name


def test_checkpoint_wrong_architecture(tmp_path):
    model = Backbone(tiny_config(), seed=7)
    path = tmp_path / "model.ckpt"
    model.save_checkpoint(path)
    with pytest.raises(CheckpointMismatchError, match="architecture"):
        load_checkpoint(path, tiny_config(num_layers=4), seed=0)


def test_checkpoint_truncated_file(tmp_path):
    model = Backbone(tiny_config(), seed=7)
    path = tmp_path / "model.ckpt"
    model.save_checkpoint(path)
    blob = path.read_bytes()
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(clipped, tiny_config(), seed=0)


def test_checkpoint_bad_magic_and_version(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError, match="magic"):
        read_tensor_file(path)
    good = tmp_path / "v9.ckpt"
    good.write_bytes(MAGIC + (9).to_bytes(4, "little") + b"\x00" * 8)
    with pytest.raises(CheckpointFormatError, match="version"):
        read_tensor_file(good)


def test_container_roundtrip_arbitrary_tensors(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.b": rng.normal(size=(3, 2)).astype(np.float32),
               "c": rng.normal(size=(5,)).astype(np.float32)}
    path = tmp_path / "t.bin"
    write_tensor_file(path, tensors, architecture=123)
    version, arch, table = read_tensor_file(path)
    assert arch == 123
    for k, v in tensors.items():
        assert table[k].tobytes() == v.tobytes()
