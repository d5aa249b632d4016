import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlpr import autodiff as ad
from dlpr.network import (
    BadMagicError,
    CheckpointError,
    NetworkSpec,
    PhaseNet,
    ShapeMismatchError,
    SpecError,
    TruncatedCheckpointError,
    VersionMismatchError,
    build,
    load_checkpoint,
    parse_key_values,
    save_checkpoint,
)

SMALL = NetworkSpec(input_size=16, down_blocks=2, up_blocks=2, tail_blocks=1, base_channels=2)


def desk_parameter_count():
    """Closed-form count for the 3/3/2 spec with 16 base channels, written out by hand."""
    conv = lambda cin, cout, k: cout * cin * k * k + cout  # noqa: E731
    total = conv(1, 16, 3)
    for cin, cout in ((16, 32), (32, 64), (64, 128)):
        total += conv(cin, cout, 3) + conv(cin, cout, 1)
    for cin, cout in ((128, 64), (64, 32), (32, 16)):
        total += conv(cin, cout, 4) + conv(cin, cout, 2) + conv(2 * cout, cout, 1)
    total += 2 * conv(16, 16, 3)
    total += conv(16, 1, 1)
    return total


def test_default_parameter_count():
    assert desk_parameter_count() == 338913
    assert PhaseNet(NetworkSpec()).n_parameters() == 338913


def test_default_spec_dilations():
    spec = NetworkSpec()
    assert spec.dilations == (1, 1, 1, 1, 1, 1, 2, 4)
    assert spec.skip_pairs == ((2, 0), (1, 1), (0, 2))


def test_minimal_spec_shape():
    spec = NetworkSpec(input_size=32, down_blocks=1, up_blocks=1, tail_blocks=0, base_channels=4)
    out = PhaseNet(spec).forward(np.zeros((2, 1, 32, 32), np.float32))
    assert out.shape == (2, 1, 32, 32)


def test_paper_scale_shapes():
    spec = NetworkSpec.paper_scale()
    model = PhaseNet(spec)
    acts = []
    out = model.forward(np.random.default_rng(0).standard_normal((1, 1, 128, 128)), activations=acts)
    assert out.shape == (1, 1, 128, 128)
    assert len(model.block_names()) == 1 + 7 + 6 + 2
    assert acts[7].shape == (1, 4 * 2**7, 1, 1)
    assert acts[-1].shape == (1, 8, 64, 64)  # one stage short, the head upsamples


def test_uneven_spec_uses_transposed_head():
    spec = NetworkSpec(input_size=16, down_blocks=2, up_blocks=1, tail_blocks=1, base_channels=2)
    model = PhaseNet(spec)
    assert dict(model.named_parameters())["head.w"].shape == (4, 1, 2, 2)
    assert model.forward(np.zeros((1, 1, 16, 16))).shape == (1, 1, 16, 16)


def test_same_seed_same_parameters():
    a, b = build(SMALL, seed=3), build(SMALL, seed=3)
    assert a.digest() == b.digest()
    assert build(SMALL, seed=4).digest() != a.digest()
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


@pytest.mark.parametrize(
    "name, fan",
    [("down3.conv.w", 64 * 9), ("down3.conv.b", 64 * 9), ("up0.conv.w", 64 * 16), ("up0.proj.b", 128), ("head.w", 16)],
)
def test_init_bounds(name, fan):
    p = dict(PhaseNet(NetworkSpec()).named_parameters())[name].data
    bound = 1 / np.sqrt(fan)
    assert np.abs(p).max() <= bound
    if p.size > 1000:
        # uniform on [-b, b] has std b / sqrt(3)
        assert p.std() == pytest.approx(bound / np.sqrt(3), rel=0.03)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1e3))
def test_output_range(seed, gain):
    x = np.random.default_rng(seed).standard_normal((1, 1, 16, 16)) * gain
    out = PhaseNet(SMALL, seed=seed % 7).forward(x).data
    assert out.min() >= -np.pi and out.max() <= 0


def test_zero_head_gives_half_depth():
    model = PhaseNet(SMALL)
    params = dict(model.named_parameters())
    params["head.w"].data[...] = 0
    params["head.b"].data[...] = 0
    out = model.forward(np.random.default_rng(1).standard_normal((3, 1, 16, 16))).data
    np.testing.assert_allclose(out, -np.pi / 2, rtol=1e-6)


def test_forward_is_deterministic():
    model = PhaseNet(SMALL, seed=2)
    x = np.random.default_rng(2).standard_normal((2, 1, 16, 16))
    np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)


def test_repeated_backward_same_gradients():
    with ad.precision(np.float64):
        model = PhaseNet(SMALL, seed=1)
        x = np.random.default_rng(3).standard_normal((2, 1, 16, 16))
        y = -np.pi * np.random.default_rng(4).random((2, 1, 16, 16))
        ad.l1_loss(model.forward(x), y).backward()
        first = [p.grad.copy() for p in model.parameters()]
        model.zero_grad()
        ad.l1_loss(model.forward(x), y).backward()
        for g, p in zip(first, model.parameters()):
            np.testing.assert_array_equal(g, p.grad)


def test_forward_rejects_wrong_size():
    with pytest.raises(ValueError, match="expected input"):
        PhaseNet(SMALL).forward(np.zeros((1, 1, 32, 32)))


def test_small_network_grad_check():
    with ad.precision(np.float64):
        model = PhaseNet(SMALL, seed=5)
        x = ad.Tensor(np.random.default_rng(5).standard_normal((2, 1, 16, 16)))
        y = -np.pi * np.random.default_rng(6).random((2, 1, 16, 16))
        err = ad.grad_check(lambda: ad.l1_loss(model.forward(x), y), model.parameters(), samples=3)
    assert err < 1e-4


def _influence_radius(spec):
    model = PhaseNet(spec, seed=0, dtype=np.float64)
    with ad.precision(np.float64):
        x = np.random.default_rng(0).standard_normal((1, 1, spec.input_size, spec.input_size))
        base = model.forward(x).data[0, 0]
        c = spec.input_size // 2
        x[0, 0, c, c] += 10.0
        diff = np.abs(model.forward(x).data[0, 0] - base) > 1e-12
    rows, cols = np.nonzero(diff)
    return int(max(np.abs(rows - c).max(), np.abs(cols - c).max()))


def test_dilation_grows_receptive_field():
    kw = dict(input_size=64, down_blocks=1, up_blocks=1, tail_blocks=2, base_channels=4)
    narrow = _influence_radius(NetworkSpec(dilations=(1, 1, 1, 1), **kw))
    wide = _influence_radius(NetworkSpec(dilations=(1, 1, 1, 2), **kw))
    assert wide > narrow


@pytest.mark.parametrize(
    "kw, fragment",
    [
        ({"input_size": 20, "down_blocks": 3}, "spatial extent"),
        ({"up_blocks": 4}, "cannot exceed"),
        ({"dilations": (1, 2)}, "dilations"),
        ({"dilations": (1, 1, 1, 2, 1, 1, 2, 4)}, "upsampling"),
        ({"skip_pairs": ((0, 0),)}, "skip_pairs"),
        ({"skip_pairs": ((2, 5),)}, "does not exist"),
        ({"head": "tanh"}, "head"),
        ({"base_channels": 0}, "base_channels"),
    ],
)
def test_spec_validation_names_the_constraint(kw, fragment):
    with pytest.raises(SpecError, match=fragment):
        NetworkSpec(**kw)


def test_spec_text_round_trip():
    spec = NetworkSpec(input_size=32, down_blocks=2, up_blocks=1, tail_blocks=3, head="linear", skip_pairs=((1, 0),))
    assert NetworkSpec.from_text(spec.to_text()) == spec
    with pytest.raises(SpecError, match="unknown"):
        NetworkSpec.from_mapping({"depth": "3"})


def test_parse_key_values():
    text = "# comment\n a = 1 \nb.c = x y # trailing\n\n"
    assert parse_key_values(text) == {"a": "1", "b.c": "x y"}
    with pytest.raises(ValueError, match="line 1"):
        parse_key_values("no equals sign")


def test_linear_head_unbounded():
    spec = NetworkSpec(input_size=16, down_blocks=2, up_blocks=2, tail_blocks=1, base_channels=2, head="linear")
    out = PhaseNet(spec).forward(np.random.default_rng(0).standard_normal((1, 1, 16, 16)) * 50).data
    assert out.max() > 0 or out.min() < -np.pi


# -- checkpoints ----------------------------------------------------------------


@pytest.fixture
def saved(tmp_path):
    model = PhaseNet(SMALL, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"epoch": 7, "optics_digest": "abc123"})
    return model, path


def test_round_trip_bit_identical(saved):
    model, path = saved
    loaded, meta = load_checkpoint(path)
    assert loaded.spec == model.spec
    assert loaded.digest() == model.digest()
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(loaded.forward(x).data, model.forward(x).data)
    assert meta["epoch"] == "7" and meta["optics_digest"] == "abc123" and meta["seed"] == "9"


def test_layout(saved):
    model, path = saved
    raw = path.read_bytes()
    assert raw[:4] == b"DLPR"
    assert struct.unpack("<H", raw[4:6])[0] == 1
    (n,) = struct.unpack("<I", raw[6:10])
    header = raw[10 : 10 + n].decode("utf-8")
    assert "input_size = 16" in header and f"tensors = {len(model.parameters())}" in header
    rank = raw[10 + n]
    shape = struct.unpack(f"<{rank}I", raw[11 + n : 11 + n + 4 * rank])
    assert shape == model.parameters()[0].shape
    first = np.frombuffer(raw, "<f4", count=int(np.prod(shape)), offset=11 + n + 4 * rank)
    np.testing.assert_array_equal(first.reshape(shape), model.parameters()[0].data)


def test_bad_magic(saved, tmp_path):
    _, path = saved
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)


def test_version_mismatch(saved, tmp_path):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 99)
    bad = tmp_path / "v.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError, match="99"):
        load_checkpoint(bad)


@pytest.mark.parametrize("keep", [3, 8, 40, -5])
def test_truncated(saved, tmp_path, keep):
    _, path = saved
    raw = path.read_bytes()
    bad = tmp_path / "t.ckpt"
    bad.write_bytes(raw[:keep])
    with pytest.raises((TruncatedCheckpointError, BadMagicError)):
        load_checkpoint(bad)


def test_trailing_bytes(saved, tmp_path):
    _, path = saved
    bad = tmp_path / "trail.ckpt"
    bad.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_spec_mismatch_names_first_tensor(saved):
    _, path = saved
    other = NetworkSpec(input_size=16, down_blocks=2, up_blocks=2, tail_blocks=1, base_channels=4)
    with pytest.raises(ShapeMismatchError, match="stem.w"):
        load_checkpoint(path, expect=other)


def test_error_classes_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedCheckpointError, ShapeMismatchError}
    assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)
