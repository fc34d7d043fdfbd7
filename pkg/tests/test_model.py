import numpy as np
import pytest

from edgeped.config import InvertedResidualSpec, mini_config, parse_model_config, reference_config
from edgeped.model import (
    BadMagicError,
    LengthMismatchError,
    Model,
    VersionMismatchError,
    block_param_count_exact,
    block_param_count_paper,
    build_model,
    count_flops,
    count_params,
    depthwise_param_count,
    expand_channels,
    forward,
    iter_layer_descs,
    load_weights,
    parameter_buffers,
    randomize_weights,
    run_block,
    save_weights,
)
from edgeped.tensor import ConvParams, DimensionError, Tensor


class TestAccountingFormulas:
    @pytest.mark.parametrize("c,t,expected", [(16, 1, 16), (16, 6, 96), (32, 6, 192)])
    def test_expand_channels(self, c, t, expected):
        assert expand_channels(c, t) == expected

    @pytest.mark.parametrize("k,c,expected", [(1, 8, 8), (3, 16, 144), (3, 96, 864)])
    def test_depthwise_param_count(self, k, c, expected):
        assert depthwise_param_count(k, c) == expected

    @pytest.mark.parametrize(
        "c,t,k,expected",
        [(16, 1, 1, 288), (16, 6, 3, 976), (32, 6, 3, 2464)],
    )
    def test_block_param_count_paper(self, c, t, k, expected):
        spec = InvertedResidualSpec(c, c, t, 1, k)
        assert block_param_count_paper(spec) == expected

    @pytest.mark.parametrize(
        "c,t,k,c_out,expected",
        [(16, 1, 1, 16, 528), (16, 6, 3, 16, 3936)],
    )
    def test_block_param_count_exact(self, c, t, k, c_out, expected):
        spec = InvertedResidualSpec(c, c_out, t, 1, k)
        assert block_param_count_exact(spec) == expected

    def test_exact_matches_instantiated_buffers(self, mini_model):
        # Enumerate actual weight arrays for every block in the config.
        for i, spec in enumerate(mini_model.config.blocks):
            prefix = f"b{i:02d}"
            total = sum(
                mini_model.layers[f"{prefix}.{part}"].weights.size
                for part in ("expand", "dw", "project")
            )
            assert block_param_count_exact(spec) == total
            with_bias = total + sum(
                mini_model.layers[f"{prefix}.{part}"].bias.size
                for part in ("expand", "dw", "project")
            )
            assert block_param_count_exact(spec, include_bias=True) == with_bias


class TestForward:
    def test_reference_head_shapes(self, reference_model):
        x = Tensor.zeros(1, 3, 416, 416)
        raw32, raw16 = forward(reference_model, x)
        assert raw32.shape == (1, 18, 13, 13)
        assert raw16.shape == (1, 18, 26, 26)

    def test_zero_weight_outputs_zero(self, mini_model):
        x = Tensor(np.random.default_rng(0).random((1, 3, 160, 160), dtype=np.float32))
        raw32, raw16 = forward(mini_model, x)
        assert not raw32.data.any()
        assert not raw16.data.any()

    def test_shortcut_with_zero_body(self, mini_model):
        cfg = mini_model.config
        shortcut_blocks = [i for i, b in enumerate(cfg.blocks) if b.has_shortcut]
        assert shortcut_blocks, "mini config must contain shortcut blocks"
        rng = np.random.default_rng(4)
        for i in shortcut_blocks:
            c = cfg.blocks[i].c_in
            x = Tensor(rng.random((1, c, 10, 10)).astype(np.float32))
            out = run_block(mini_model, i, x)
            assert np.array_equal(out.data, x.data)

    def test_shortcut_sum(self, mini_model_random):
        # out = body(in) + in for shortcut blocks: subtracting input recovers body.
        cfg = mini_model_random.config
        i = next(idx for idx, b in enumerate(cfg.blocks) if b.has_shortcut)
        c = cfg.blocks[i].c_in
        x = Tensor(np.random.default_rng(5).random((1, c, 8, 8)).astype(np.float32))
        out = run_block(mini_model_random, i, x)
        zeroed = dict(mini_model_random.layers)
        # Rebuild the same model but keep weights; body output alone comes from
        # running the three convs without the shortcut add.
        from edgeped.model import _run_conv

        y = _run_conv(mini_model_random, f"b{i:02d}.expand", x, "relu6")
        y = _run_conv(mini_model_random, f"b{i:02d}.dw", y, "relu6")
        y = _run_conv(mini_model_random, f"b{i:02d}.project", y, "linear")
        assert np.array_equal(out.data, y.data + x.data)

    def test_bad_input_shape(self, mini_model):
        with pytest.raises(DimensionError):
            forward(mini_model, Tensor.zeros(1, 3, 128, 128))

    def test_misconfigured_graph_rejected_before_compute(self):
        text = """
input_size 64
classes 1
anchors32 10x10
anchors16 4x4

backbone:
conv 8 3 2
block 16 3 2 6
block 16 3 2 6 tap16
block 24 3 2 6 tap32

neck32:
conv 16 1 1

neck16:
conv 8 1 1
upsample
concat tap16
"""
        # tap16 at stride 8 never reaches 16: invalid.
        from edgeped.config import GraphValidationError

        with pytest.raises(GraphValidationError):
            parse_model_config(text)


class TestCounting:
    def test_empty_model_zero(self):
        empty = Model(config=mini_config(), layers={})
        assert count_params(empty) == 0

    def test_single_conv_with_bias(self):
        layer = ConvParams(3, 2, 1, weights=np.zeros((2, 3, 1, 1), np.float32),
                           bias=np.zeros(2, np.float32))
        model = Model(config=mini_config(), layers={"only": layer})
        assert count_params(model) == 8

    def test_params_equals_saved_floats(self, mini_model_random):
        blob = save_weights(mini_model_random)
        buffers = parameter_buffers(mini_model_random)
        header = 12 + 12 * len(buffers)  # 12-byte file header + 12 per buffer
        assert count_params(mini_model_random) == (len(blob) - header) // 4

    def test_flops_single_conv(self):
        # One MAC = 2 ops.
        layer = ConvParams(1, 1, 1, weights=np.ones((1, 1, 1, 1), np.float32))
        cfg = mini_config()
        # Direct formula check through a one-layer synthetic walk:
        from edgeped.model import LayerDesc

        d = LayerDesc("x", 1, 1, 1, 1, 0, 1, "linear")
        flops = 2 * d.kernel**2 * (d.in_ch // d.groups) * d.out_ch * 1 * 1
        assert flops == 2

    def test_flops_3x3_conv_416(self):
        # 3x3 conv, 3 -> 16 channels, same-padded stride 1 at 416.
        assert 2 * 9 * 3 * 16 * 416 * 416 == 149_520_384

    def test_model_flops_positive_and_scales(self, mini_model):
        f160 = count_flops(mini_model)
        f320 = count_flops(mini_model, 320)
        assert f160 > 0
        assert f320 > 3 * f160  # roughly quadratic in input size

    def test_layer_descs_chain(self, reference_model):
        descs = iter_layer_descs(reference_model.config)
        names = [d.name for d in descs]
        assert names[0] == "stem"
        assert "head32" in names and "head16" in names
        assert len(names) == len(set(names))


class TestWeightsIO:
    def test_round_trip_bitwise(self, mini_model_random):
        blob = save_weights(mini_model_random)
        restored = load_weights(build_model(mini_model_random.config), blob)
        for name, p in mini_model_random.layers.items():
            assert np.array_equal(p.weights, restored.layers[name].weights)
            assert np.array_equal(p.bias, restored.layers[name].bias)
        assert save_weights(restored) == blob

    def test_forward_identical_after_round_trip(self, mini_model_random):
        blob = save_weights(mini_model_random)
        restored = load_weights(build_model(mini_model_random.config), blob)
        x = Tensor(np.random.default_rng(1).random((1, 3, 160, 160), dtype=np.float32))
        a32, a16 = forward(mini_model_random, x)
        b32, b16 = forward(restored, x)
        assert np.array_equal(a32.data, b32.data)
        assert np.array_equal(a16.data, b16.data)

    def test_truncated_stream_names_layer(self, mini_model_random):
        blob = save_weights(mini_model_random)
        with pytest.raises(LengthMismatchError) as err:
            load_weights(build_model(mini_model_random.config), blob[: len(blob) // 2])
        assert err.value.layer_index >= 0

    def test_bad_magic(self, mini_model):
        with pytest.raises(BadMagicError):
            load_weights(mini_model, b"NOPE" + b"\x00" * 32)

    def test_bad_version(self, mini_model):
        blob = bytearray(save_weights(mini_model))
        blob[4] = 99
        with pytest.raises(VersionMismatchError):
            load_weights(mini_model, bytes(blob))

    def test_wrong_buffer_length(self, mini_model):
        import struct

        blob = bytearray(save_weights(mini_model))
        # Corrupt the first buffer's float count.
        count_off = 12 + 4
        (n,) = struct.unpack_from("<Q", blob, count_off)
        struct.pack_into("<Q", blob, count_off, n + 1)
        with pytest.raises(LengthMismatchError) as err:
            load_weights(mini_model, bytes(blob))
        assert err.value.layer_index == 0

    def test_randomize_is_seed_deterministic(self, mini_model):
        a = randomize_weights(mini_model, seed=3)
        b = randomize_weights(mini_model, seed=3)
        assert save_weights(a) == save_weights(b)
        c = randomize_weights(mini_model, seed=4)
        assert save_weights(a) != save_weights(c)
