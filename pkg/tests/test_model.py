import numpy as np
import pytest

from dynchan import tensor as T
from dynchan.arch import (ArchDescriptor, AvgPool, Conv, Flatten, Linear, MaxPool, desk_descriptor,
                          parse_descriptor, tiny_descriptor, vgg19_descriptor)
from dynchan.channels import ChannelMask
from dynchan.errors import ConstraintError, DescriptorError, ParseError, ShapeError
from dynchan.model import build_model, forward, load_checkpoint, save_checkpoint


@pytest.fixture
def tiny():
    return build_model(tiny_descriptor(), seed=3)


def _x(model, n=2, seed=0):
    return np.random.default_rng(seed).standard_normal((n,) + model.desc.input_shape)


class TestDescriptors:
    def test_vgg19_layout(self):
        d = vgg19_descriptor(10)
        assert d.conv_widths == [64, 64, 128, 128] + [256] * 4 + [512] * 8
        assert sum(isinstance(b, MaxPool) for b in d.blocks) == 5
        assert sum(isinstance(b, Linear) for b in d.blocks) == 1
        assert sum(d.conv_widths) == 5504
        # 20% of all channels is the "1100 channels" example for VGG-19
        assert round(0.2 * 5504) == 1101 and int(0.2 * 5504) == 1100

    def test_vgg19_model(self):
        m = build_model(vgg19_descriptor(10), seed=0, dtype=np.float32)
        assert m.num_conv == 16
        assert len(m.registry) == 5504
        assert m.params["fc.weight"].shape == (10, 512)

    def test_tiny_channels(self):
        assert len(build_model(tiny_descriptor()).registry) == 24

    def test_width_chain_and_linear_rules(self):
        with pytest.raises(DescriptorError, match="final"):
            ArchDescriptor((1, 8, 8), [Conv(4), Flatten()], 10).validate()
        with pytest.raises(DescriptorError, match="only the final"):
            ArchDescriptor((1, 8, 8), [Flatten(), Linear(10), Linear(10)], 10).validate()
        with pytest.raises(DescriptorError, match="Flatten"):
            ArchDescriptor((1, 8, 8), [Conv(4), Linear(10)], 10).validate()
        with pytest.raises(DescriptorError, match="collapses"):
            ArchDescriptor((1, 2, 2), [Conv(4, kernel=5, padding=0), Flatten(), Linear(10)], 10).validate()

    def test_text_roundtrip(self):
        for d in (vgg19_descriptor(), desk_descriptor(), tiny_descriptor()):
            back = parse_descriptor(d.to_text())
            assert back.blocks == d.blocks and back.input_shape == d.input_shape
            assert back.num_classes == d.num_classes and back.name == d.name

    def test_parse_error_has_location(self):
        text = "input 1x8x8\nclasses 10\nconv 4\nconv banana\nflatten\nlinear 10\n"
        with pytest.raises(ParseError, match="line 4"):
            parse_descriptor(text)
        with pytest.raises(ParseError, match="line 2"):
            parse_descriptor("input 1x8x8\nwarp 3\n")


class TestBuild:
    def test_he_init_and_bn(self):
        m = build_model(desk_descriptor(), seed=0)
        w = m.params["conv3.weight"].data
        assert w.std() == pytest.approx(np.sqrt(2.0 / (32 * 9)), rel=0.05)
        assert np.all(m.params["bn2.weight"].data == 1.0)
        assert np.all(m.params["bn2.bias"].data == 0.0)
        fc = m.params["fc.weight"].data
        assert fc.std() == pytest.approx(np.sqrt(2.0 / fc.shape[1]), rel=0.1)

    def test_seed_determinism(self):
        a = build_model(desk_descriptor(), seed=11)
        b = build_model(desk_descriptor(), seed=11)
        c = build_model(desk_descriptor(), seed=12)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
        assert not np.array_equal(a.params["conv0.weight"].data, c.params["conv0.weight"].data)

    def test_param_shapes(self, tiny):
        assert tiny.params["conv0.weight"].shape == (8, 1, 3, 3)
        assert tiny.params["conv1.weight"].shape == (16, 8, 3, 3)
        assert tiny.params["fc.weight"].shape == (10, 16)


class TestForward:
    def test_logit_shape(self, tiny):
        assert forward(tiny, _x(tiny, 3), mode="eval").shape == (3, 10)

    def test_all_active_is_identity(self, tiny):
        x = _x(tiny)
        with T.no_grad():
            a = forward(tiny, x, None, mode="train", update_stats=False).data
            b = forward(tiny, x, ChannelMask.full(tiny.registry), mode="train", update_stats=False).data
        assert np.array_equal(a, b)

    def test_masked_tap_is_zero(self, tiny):
        bits = np.ones(24, dtype=bool)
        bits[3] = False
        taps = {}
        forward(tiny, _x(tiny, 1), ChannelMask(tiny.registry, bits), taps=taps)
        assert np.all(taps[0].data[:, 3] == 0)
        assert np.any(taps[0].data[:, 2] != 0)

    def test_zero_layer_equals_zero_input_downstream(self, tiny):
        """Masking all of conv0 equals feeding zeros into conv1."""
        bits = np.ones(24, dtype=bool)
        bits[:8] = False
        x = _x(tiny)
        with T.no_grad():
            masked = forward(tiny, x, ChannelMask(tiny.registry, bits), mode="eval").data
            p = tiny.params
            h = T.Tensor(np.zeros((2, 8, 14, 14)))
            h = T.conv2d(h, p["conv1.weight"], padding=1)
            h = T.batchnorm2d(h, p["bn1.weight"], p["bn1.bias"], tiny.buffers["bn1.running_mean"],
                              tiny.buffers["bn1.running_var"], training=False)
            h = T.avgpool2d(T.maxpool2d(T.relu(h), 2))
            ref = T.linear(T.flatten(h), p["fc.weight"], p["fc.bias"]).data
        np.testing.assert_allclose(masked, ref, rtol=1e-12, atol=1e-12)

    def test_gate_placement_by_construction(self, tiny):
        """Gated forward equals ungated conv0 output with channels zeroed, fed onward."""
        rng = np.random.default_rng(4)
        bits = rng.random(24) < 0.5
        bits[0] = bits[8] = True
        mask = ChannelMask(tiny.registry, bits)
        x = _x(tiny)
        p, buf = tiny.params, tiny.buffers
        with T.no_grad():
            got = forward(tiny, x, mask, mode="eval").data
            h = T.conv2d(T.Tensor(x), p["conv0.weight"], padding=1)
            h = T.relu(T.batchnorm2d(h, p["bn0.weight"], p["bn0.bias"], buf["bn0.running_mean"],
                                     buf["bn0.running_var"], training=False))
            hd = h.data.copy()
            hd[:, ~bits[:8]] = 0
            h = T.maxpool2d(T.Tensor(hd), 2)
            h = T.conv2d(h, p["conv1.weight"], padding=1)
            h = T.relu(T.batchnorm2d(h, p["bn1.weight"], p["bn1.bias"], buf["bn1.running_mean"],
                                     buf["bn1.running_var"], training=False))
            hd = h.data.copy()
            hd[:, ~bits[8:]] = 0
            h = T.avgpool2d(T.maxpool2d(T.Tensor(hd), 2))
            ref = T.linear(T.flatten(h), p["fc.weight"], p["fc.bias"]).data
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)

    def test_inactive_channels_get_zero_grads_and_frozen_stats(self, tiny):
        bits = np.ones(24, dtype=bool)
        bits[[1, 5, 10]] = False
        rm_before = tiny.buffers["bn0.running_mean"].copy()
        logits = forward(tiny, _x(tiny, 4), ChannelMask(tiny.registry, bits), mode="train")
        T.backward(T.softmax_cross_entropy(logits, [0, 1, 2, 3]))
        g = tiny.params
        for k in (1, 5):
            assert np.all(g["conv0.weight"].grad[k] == 0)
            assert g["bn0.weight"].grad[k] == 0 and g["bn0.bias"].grad[k] == 0
            assert tiny.buffers["bn0.running_mean"][k] == rm_before[k]
        assert np.all(g["conv1.weight"].grad[2] == 0)
        assert np.all(g["conv1.weight"].grad[:, 1] == 0)
        assert tiny.buffers["bn0.running_mean"][0] != rm_before[0]

    def test_mask_length_mismatch(self, tiny):
        other = build_model(desk_descriptor())
        with pytest.raises(ConstraintError):
            forward(tiny, _x(tiny), ChannelMask.full(other.registry))

    def test_bad_batch_shape(self, tiny):
        with pytest.raises(ShapeError):
            forward(tiny, np.zeros((1, 3, 28, 28)))

    def test_eval_does_not_touch_running_stats(self, tiny):
        before = {k: v.copy() for k, v in tiny.buffers.items()}
        forward(tiny, _x(tiny), mode="eval")
        assert all(np.array_equal(before[k], tiny.buffers[k]) for k in before)


class TestUpdateMasks:
    def test_entries(self, tiny):
        bits = np.ones(24, dtype=bool)
        bits[[2, 9]] = False
        um = tiny.update_masks(ChannelMask(tiny.registry, bits))
        assert not um["conv0.weight"][2].any() and um["conv0.weight"][3].all()
        assert not um["conv1.weight"][:, 2].any()
        assert not um["conv1.weight"][1].any()
        assert not um["bn1.weight"][1] and um["bn1.weight"][0]
        assert not um["fc.weight"][:, 1].any() and um["fc.weight"][:, 0].all()
        assert um["fc.bias"] is None

    def test_full_mask(self, tiny):
        assert all(v is None for v in tiny.update_masks(ChannelMask.full(tiny.registry)).values())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tiny):
        bits = np.ones(24, dtype=bool)
        bits[[0, 7, 20]] = False
        mask = ChannelMask(tiny.registry, bits)
        tiny.buffers["bn1.running_var"][:] = 2.5
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny, mask, {"stage": "x"})
        m2, mask2, meta = load_checkpoint(path)
        assert mask2 == mask and meta == {"stage": "x"}
        for k in tiny.params:
            assert np.array_equal(tiny.params[k].data, m2.params[k].data)
        for k in tiny.buffers:
            assert np.array_equal(tiny.buffers[k], m2.buffers[k])

    def test_float32_and_header_layout(self, tmp_path):
        import json
        import struct

        m = build_model(tiny_descriptor(), seed=1, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m)
        raw = path.read_bytes()
        assert raw[:8] == b"DYNCHK\x00\x01"
        version, hlen = struct.unpack("<II", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        assert version == 1 and header["precision"] == "float32"
        first = header["tensors"][0]
        blob = np.frombuffer(raw, "<f4", count=int(np.prod(first["shape"])), offset=16 + hlen + first["offset"])
        assert np.array_equal(blob.reshape(first["shape"]), m.params[first["name"]].data)
        m2, _, _ = load_checkpoint(path)
        assert m2.dtype == np.float32

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"garbage!" * 4)
        with pytest.raises(ParseError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path, tiny):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, tiny)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ParseError, match="past end"):
            load_checkpoint(p)


def test_avgpool_descriptor_text():
    d = ArchDescriptor((1, 8, 8), [Conv(2), AvgPool(2, 2), Flatten(), Linear(3)], 3)
    assert parse_descriptor(d.to_text()).blocks == d.blocks
