import numpy as np
import pytest

from s3tunet import ops
from s3tunet.blocks import DropBlockParams
from s3tunet.gradcheck import tiny_model_config
from s3tunet.model import (ModelConfig, build, forward, load_checkpoint, parameter_count, read_checkpoint,
                           save_checkpoint)
from s3tunet.rmsvit import RmSvitConfig
from s3tunet.serialize import FormatError
from s3tunet.tensor import Tape


def _tally(base, lka_repeats=1):
    """Layer-by-layer parameter count, written out from the block definitions."""
    def conv(i, o, k, bias):
        return o * i * k * k + (o if bias else 0)

    def lka(c):
        return conv(1, c, 5, True) + conv(1, c, 7, True) + conv(c, c, 1, True)

    def dwf(i, o):
        return conv(i, o, 3, False) + 2 * o + o + lka_repeats * lka(o) + conv(o, o, 3, False) + 2 * o + o \
            + lka_repeats * lka(o)

    def d2br(i, o):
        return conv(i, o, 3, False) + 2 * o + conv(o, o, 3, False) + 2 * o

    def rmsvit(c):
        return (c * c + c) + c * c + (c * c + c) + conv(c, c, 1, True) + 2 * c

    def s2link(c):
        return (3 * c * c + 3 * c) + (c * (c // 2) + c // 2) + ((c // 2) * 3 * c + 3 * c) + (c * c + c)

    def tconv(i, o):
        return i * o * 4 + o

    c0, c1, c2, c3 = base, 2 * base, 4 * base, 8 * base
    total = dwf(1, c0) + d2br(c0, c1) + d2br(c1, c2) + d2br(c2, c3)
    total += rmsvit(c3) + dwf(c3, c3)
    total += tconv(c3, c2) + d2br(2 * c2, c2) + s2link(c2)
    total += tconv(c2, c1) + d2br(2 * c1, c1) + s2link(c1)
    total += tconv(c1, c0) + d2br(2 * c0, c0) + s2link(c0)
    return total + conv(c0, 1, 1, True)


@pytest.fixture(scope="module")
def tiny():
    return build(tiny_model_config(), 0)


def test_default_config_bottleneck():
    cfg = ModelConfig()
    cfg.validate()
    assert cfg.bottleneck_size == (16, 16)
    assert cfg.channels == [16, 32, 64, 128]


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="not divisible by 2\\^3"):
        build(ModelConfig(input_size=(100, 128)), 0)


def test_grid_and_heads_constraints_listed():
    with pytest.raises(ValueError) as info:
        ModelConfig(base_channels=3, input_size=(48, 48), rm_svit=RmSvitConfig(grid=(4, 4), heads=5)).validate()
    assert "grid" in str(info.value) and "heads" in str(info.value)


def test_dropblock_too_large_rejected():
    with pytest.raises(ValueError, match="DropBlock"):
        ModelConfig(input_size=(32, 32), rm_svit=RmSvitConfig(grid=(2, 2)),
                    dropblock=DropBlockParams(7, 0.1)).validate()


def test_parameter_census_base4():
    cfg = ModelConfig(base_channels=4, input_size=(64, 64), rm_svit=RmSvitConfig(grid=(4, 4)))
    assert parameter_count(build(cfg, 0)) == _tally(4)


def test_parameter_census_default():
    assert parameter_count(build(ModelConfig(), 0)) == _tally(16)


def test_output_shape_and_bounds(tiny):
    x = np.random.default_rng(0).standard_normal((2, 1, 32, 32)) * 50
    out = forward(tiny, x).data
    assert out.shape == (2, 1, 32, 32)
    assert ((out > 0) & (out < 1)).all()


def test_wrong_input_shape(tiny):
    with pytest.raises(ops.ShapeError):
        forward(tiny, np.zeros((1, 1, 16, 32)))
    with pytest.raises(ops.ShapeError):
        forward(tiny, np.zeros((1, 2, 32, 32)))


def test_eval_determinism(tiny):
    x = np.random.default_rng(1).random((1, 1, 32, 32))
    assert forward(tiny, x).data.tobytes() == forward(tiny, x).data.tobytes()


def test_seeded_build_is_deterministic():
    a = build(tiny_model_config(), 7).state_dict()
    b = build(tiny_model_config(), 7).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_training_forward_seeded(tiny):
    x = np.random.default_rng(2).random((2, 1, 32, 32))
    a = forward(tiny, x, training=True, rng=np.random.default_rng(4)).data
    b = forward(tiny, x, training=True, rng=np.random.default_rng(4)).data
    tiny.eval()
    assert a.tobytes() == b.tobytes()


def test_stage_composition(tiny):
    """Wire the stages by hand: DWF head, three D2BR+pool stages, RM-SViT, DWF, three up stages."""
    m = tiny.eval()
    x = np.random.default_rng(3).random((1, 1, 32, 32))
    e0 = m.enc0.dwf(x)
    e1 = m.enc1.d2br(ops.maxpool2d(e0))
    e2 = m.enc2.d2br(ops.maxpool2d(e1))
    e3 = m.enc3.d2br(ops.maxpool2d(e2))
    h = m.dec.dwf(m.bottleneck.rmsvit(e3))
    h = m.up2.d2br(ops.concat([m.skip2.s2link(e2), m.up2.tconv(h)], axis=1))
    h = m.up1.d2br(ops.concat([m.skip1.s2link(e1), m.up1.tconv(h)], axis=1))
    h = m.up0.d2br(ops.concat([m.skip0.s2link(e0), m.up0.tconv(h)], axis=1))
    ref = 1.0 / (1.0 + np.exp(-m.out(h).data))
    np.testing.assert_allclose(forward(m, x).data, ref, rtol=0, atol=1e-12)


def test_encoder_decoder_symmetry(tiny):
    _, feats = tiny.eval()(np.zeros((1, 1, 32, 32)), return_features=True)
    for enc, dec in zip(feats["enc"], feats["dec"]):
        assert enc.shape[2:] == dec.shape[2:]


def test_every_parameter_receives_gradient(tiny):
    rng = np.random.default_rng(5)
    x = rng.random((2, 1, 32, 32))
    tiny.train()
    with Tape() as tape:
        out = tiny(x, np.random.default_rng(6))
        loss = ops.sum(ops.mul(out, rng.standard_normal(out.shape)))
    grads = tape.backward(loss)
    tiny.eval()
    dead = [name for name, p in tiny.named_parameters() if not np.any(grads.get(p, 0) != 0)]
    assert dead == []


def test_ablation_switches_change_structure():
    base = tiny_model_config()
    names = {n for n, _ in build(base, 0).named_parameters()}
    for flag, marker in (("use_structured", "d2br"), ("use_rmsvit", "rmsvit"), ("use_s2link", "s2link")):
        cfg = ModelConfig.from_dict({**base.to_dict(), flag: False})
        other = {n for n, _ in build(cfg, 0).named_parameters()}
        assert any(marker in n for n in names) and not any(marker in n for n in other)
        assert forward(build(cfg, 0), np.zeros((1, 1, 32, 32))).shape == (1, 1, 32, 32)


def test_config_round_trip():
    cfg = tiny_model_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tiny, tmp_path):
    x = np.random.default_rng(7).random((1, 1, 32, 32))
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    again = load_checkpoint(path)
    assert forward(again, x).data.tobytes() == forward(tiny, x).data.tobytes()


def test_checkpoint_census(tmp_path):
    cfg = ModelConfig(base_channels=4, input_size=(64, 64), rm_svit=RmSvitConfig(grid=(4, 4)))
    save_checkpoint(build(cfg, 0), tmp_path / "m.ckpt")
    header, tensors = read_checkpoint(tmp_path / "m.ckpt")
    params = sum(a.size for n, a in tensors.items() if not n.endswith(("running_mean", "running_var")))
    assert params == _tally(4)
    assert header["model_config"]["base_channels"] == 4


def test_truncated_checkpoint(tiny, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    raw = path.read_bytes()
    for cut in (4, 15, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_version_and_magic_errors(tiny, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 99"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "g.ckpt").write_bytes(b"garbage!" + bytes(raw[8:]))
    with pytest.raises(FormatError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "g.ckpt")
    (tmp_path / "x.ckpt").write_bytes(bytes(path.read_bytes()) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(tmp_path / "x.ckpt")
