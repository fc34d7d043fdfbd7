"""Model graph: build, run, count, and (de)serialize weights.

A Model is a validated ModelConfig plus one ConvParams per primitive
convolution, keyed by a stable name ("stem", "b03.dw", "n32.0", "head16",
...). Insertion order of the layer dict is the canonical enumeration order
used by the weight file and the accounting cross-checks. Models are
immutable after construction; `forward` may run concurrently on distinct
inputs.

Batch-norm parameters are assumed pre-folded into each conv's weights and
bias (see tensor.batchnorm_fold), so every conv carries a bias array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import InvertedResidualSpec, ModelConfig
from .tensor import (
    ConvParams,
    DimensionError,
    Tensor,
    concat_channels,
    conv2d,
    leaky_relu,
    relu6,
    upsample_nearest2x,
)

WEIGHT_MAGIC = b"EPW1"
WEIGHT_VERSION = 1
LEAKY_SLOPE = 0.1


class WeightFormatError(ValueError):
    """Base class for weight-file problems."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class LengthMismatchError(WeightFormatError):
    """A per-layer buffer has the wrong length; names the layer index."""

    def __init__(self, layer_index: int, message: str):
        super().__init__(message)
        self.layer_index = layer_index


@dataclass(frozen=True)
class LayerDesc:
    """Geometry and activation of one primitive conv in the graph."""

    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    groups: int
    activation: str  # "relu6" | "leaky" | "linear"


def expand_channels(c: int, t: int) -> int:
    """Intermediate channel count of an inverted residual: c * t."""
    if c < 1 or t < 1:
        raise ValueError(f"channels and expansion must be >= 1, got ({c}, {t})")
    return c * t


def depthwise_param_count(k: int, c: int) -> int:
    """Weight count of a depthwise conv over c channels with a k x k kernel."""
    if k < 1 or c < 1:
        raise ValueError(f"kernel and channels must be >= 1, got ({k}, {c})")
    return k * k * c


def block_param_count_paper(spec: InvertedResidualSpec) -> int:
    """Published closed-form block parameter total: C*t^2 + k^2*C + C*C.

    Kept verbatim for comparison; it disagrees with enumerating the three
    convolutions' weight arrays (see block_param_count_exact), so the model
    accounting never uses it.
    """
    c, t, k = spec.c_in, spec.expansion, spec.kernel
    return c * t * t + k * k * c + c * c


def block_param_count_exact(spec: InvertedResidualSpec, include_bias: bool = False) -> int:
    """Float count of the block's three convs: expand 1x1, depthwise, project 1x1.

    C*(C*t) + k^2*(C*t) + (C*t)*C_out, plus the three bias arrays when
    ``include_bias`` is set. Equals the summed buffer lengths of an
    instantiated block.
    """
    c, t, k, c_out = spec.c_in, spec.expansion, spec.kernel, spec.c_out
    expanded = expand_channels(c, t)
    total = c * expanded + k * k * expanded + expanded * c_out
    if include_bias:
        total += expanded + expanded + c_out
    return total


def _block_descs(index: int, spec: InvertedResidualSpec) -> list[LayerDesc]:
    prefix = f"b{index:02d}"
    e = spec.expanded
    return [
        LayerDesc(f"{prefix}.expand", spec.c_in, e, 1, 1, 0, 1, "relu6"),
        LayerDesc(
            f"{prefix}.dw", e, e, spec.kernel, spec.stride, spec.kernel // 2, e, "relu6"
        ),
        LayerDesc(f"{prefix}.project", e, spec.c_out, 1, 1, 0, 1, "linear"),
    ]


def iter_layer_descs(config: ModelConfig) -> list[LayerDesc]:
    """All primitive convs in canonical (graph) order."""
    descs = [
        LayerDesc(
            "stem",
            3,
            config.stem.out_ch,
            config.stem.kernel,
            config.stem.stride,
            config.stem.kernel // 2,
            1,
            "relu6",
        )
    ]
    for i, blk in enumerate(config.blocks):
        descs.extend(_block_descs(i, blk))

    channels = config.blocks[config.tap32_index].c_out
    branch_channels = 0
    for j, op in enumerate(config.neck32):
        descs.append(
            LayerDesc(
                f"n32.{j}", channels, op.out_ch, op.kernel, op.stride,
                op.kernel // 2, 1, "leaky",
            )
        )
        channels = op.out_ch
        if j == config.branch_index:
            branch_channels = channels
    descs.append(
        LayerDesc("head32", channels, config.head32.out_channels, 1, 1, 0, 1, "linear")
    )

    channels = branch_channels
    tap16_channels = config.blocks[config.tap16_index].c_out
    for j, op in enumerate(config.neck16):
        if op.kind == "conv":
            descs.append(
                LayerDesc(
                    f"n16.{j}", channels, op.out_ch, op.kernel, op.stride,
                    op.kernel // 2, 1, "leaky",
                )
            )
            channels = op.out_ch
        elif op.kind == "concat":
            channels += tap16_channels
    descs.append(
        LayerDesc("head16", channels, config.head16.out_channels, 1, 1, 0, 1, "linear")
    )
    return descs


@dataclass(frozen=True)
class Model:
    """Immutable bundle of a validated config and per-layer parameters."""

    config: ModelConfig
    layers: dict[str, ConvParams]

    def layer(self, name: str) -> ConvParams:
        return self.layers[name]


def build_model(config: ModelConfig) -> Model:
    """Instantiate a zero-weight model for the given config."""
    config.validate()
    layers: dict[str, ConvParams] = {}
    for d in iter_layer_descs(config):
        layers[d.name] = ConvParams(
            in_ch=d.in_ch,
            out_ch=d.out_ch,
            kernel=d.kernel,
            stride=d.stride,
            padding=d.padding,
            groups=d.groups,
            bias=np.zeros(d.out_ch, dtype=np.float32),
        )
    return Model(config=config, layers=layers)


def randomize_weights(model: Model, seed: int, weight_scale: float = 1.0,
                      bias_scale: float = 0.5) -> Model:
    """Fresh model with seed-deterministic He-style random weights.

    Biases are perturbed too so raw head outputs spread around zero and
    random-weight smoke runs produce a non-trivial detection mix.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    layers: dict[str, ConvParams] = {}
    for name, p in model.layers.items():
        fan_in = (p.in_ch // p.groups) * p.kernel * p.kernel
        std = weight_scale * np.sqrt(2.0 / fan_in)
        weights = rng.normal(0.0, std, size=p.weights.shape).astype(np.float32)
        bias = rng.normal(0.0, bias_scale, size=p.out_ch).astype(np.float32)
        layers[name] = ConvParams(
            in_ch=p.in_ch, out_ch=p.out_ch, kernel=p.kernel, stride=p.stride,
            padding=p.padding, groups=p.groups, weights=weights, bias=bias,
        )
    return Model(config=model.config, layers=layers)


def _run_conv(model: Model, name: str, x: Tensor, activation: str) -> Tensor:
    out = conv2d(x, model.layers[name])
    if activation == "relu6":
        return relu6(out)
    if activation == "leaky":
        return leaky_relu(out, LEAKY_SLOPE)
    return out


def run_block(model: Model, index: int, x: Tensor) -> Tensor:
    """One inverted residual: expand -> depthwise -> project (+ shortcut)."""
    spec = model.config.blocks[index]
    prefix = f"b{index:02d}"
    y = _run_conv(model, f"{prefix}.expand", x, "relu6")
    y = _run_conv(model, f"{prefix}.dw", y, "relu6")
    y = _run_conv(model, f"{prefix}.project", y, "linear")
    if spec.has_shortcut:
        y = Tensor(y.data + x.data)
    return y


def forward(model: Model, input: Tensor) -> tuple[Tensor, Tensor]:
    """Run the full graph; returns the raw stride-32 and stride-16 head maps."""
    cfg = model.config
    size = cfg.input_size
    if input.shape != (1, 3, size, size):
        raise DimensionError(
            "shape", f"expected input (1, 3, {size}, {size}), got {input.shape}"
        )

    x = _run_conv(model, "stem", input, "relu6")
    taps: dict[int, Tensor] = {}
    for i in range(len(cfg.blocks)):
        x = run_block(model, i, x)
        if i == cfg.tap16_index:
            taps[16] = x
        if i == cfg.tap32_index:
            taps[32] = x

    y = taps[32]
    branch = None
    for j in range(len(cfg.neck32)):
        y = _run_conv(model, f"n32.{j}", y, "leaky")
        if j == cfg.branch_index:
            branch = y
    raw32 = _run_conv(model, "head32", y, "linear")

    z = branch
    for j, op in enumerate(cfg.neck16):
        if op.kind == "conv":
            z = _run_conv(model, f"n16.{j}", z, "leaky")
        elif op.kind == "upsample":
            z = upsample_nearest2x(z)
        else:
            z = concat_channels(z, taps[16])
    raw16 = _run_conv(model, "head16", z, "linear")
    return raw32, raw16


def count_params(model: Model, include_bias: bool = True) -> int:
    """Total float count across all layer buffers."""
    total = 0
    for p in model.layers.values():
        total += int(p.weights.size)
        if include_bias and p.bias is not None:
            total += int(p.bias.size)
    return total


def count_flops(model: Model, input_size: int | None = None) -> int:
    """Conv FLOPs (multiply-accumulate = 2 ops) summed over the graph.

    Per conv: 2 * k^2 * (in_ch / groups) * out_ch * H_out * W_out. Upsample,
    concat, activations, and shortcut adds are not counted.
    """
    cfg = model.config
    size = input_size if input_size is not None else cfg.input_size
    if size < 32 or size % 32:
        raise ValueError(f"input_size must be a positive multiple of 32, got {size}")

    def conv_flops(d: LayerDesc, extent: int) -> tuple[int, int]:
        out_extent = (extent + 2 * d.padding - d.kernel) // d.stride + 1
        flops = 2 * d.kernel * d.kernel * (d.in_ch // d.groups) * d.out_ch * out_extent**2
        return flops, out_extent

    descs = {d.name: d for d in iter_layer_descs(cfg)}
    total = 0

    extent = size
    flops, extent = conv_flops(descs["stem"], extent)
    total += flops
    tap_extents: dict[int, int] = {}
    for i in range(len(cfg.blocks)):
        prefix = f"b{i:02d}"
        for part in ("expand", "dw", "project"):
            flops, extent = conv_flops(descs[f"{prefix}.{part}"], extent)
            total += flops
        if i == cfg.tap16_index:
            tap_extents[16] = extent
        if i == cfg.tap32_index:
            tap_extents[32] = extent

    extent = tap_extents[32]
    branch_extent = extent
    for j in range(len(cfg.neck32)):
        flops, extent = conv_flops(descs[f"n32.{j}"], extent)
        total += flops
        if j == cfg.branch_index:
            branch_extent = extent
    flops, _ = conv_flops(descs["head32"], extent)
    total += flops

    extent = branch_extent
    for j, op in enumerate(cfg.neck16):
        if op.kind == "conv":
            flops, extent = conv_flops(descs[f"n16.{j}"], extent)
            total += flops
        elif op.kind == "upsample":
            extent *= 2
    flops, _ = conv_flops(descs["head16"], extent)
    total += flops
    return total


def parameter_buffers(model: Model) -> list[tuple[str, np.ndarray]]:
    """Flat (name, array) list in canonical order: weights then bias per conv."""
    buffers: list[tuple[str, np.ndarray]] = []
    for name, p in model.layers.items():
        buffers.append((f"{name}.weights", p.weights))
        bias = p.bias if p.bias is not None else np.zeros(p.out_ch, np.float32)
        buffers.append((f"{name}.bias", bias))
    return buffers


def save_weights(model: Model) -> bytes:
    """Serialize all buffers: EPW1 | version u32 | count u32 | per buffer
    (index u32, float count u64, little-endian float32 data)."""
    buffers = parameter_buffers(model)
    out = bytearray()
    out += struct.pack("<4sII", WEIGHT_MAGIC, WEIGHT_VERSION, len(buffers))
    for index, (_, arr) in enumerate(buffers):
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        out += struct.pack("<IQ", index, flat.size)
        out += flat.tobytes()
    return bytes(out)


def load_weights(model: Model, data: bytes) -> Model:
    """New model with buffers read from ``data``; validates layout exactly."""
    head_size = struct.calcsize("<4sII")
    if len(data) < head_size:
        raise BadMagicError("stream too short for header")
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    if version != WEIGHT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")

    expected = parameter_buffers(model)
    if count != len(expected):
        raise LengthMismatchError(
            min(count, len(expected)),
            f"stream declares {count} buffers, model has {len(expected)}",
        )

    offset = head_size
    entry = struct.Struct("<IQ")
    arrays: list[np.ndarray] = []
    for index, (name, arr) in enumerate(expected):
        if offset + entry.size > len(data):
            raise LengthMismatchError(index, f"stream truncated at buffer {index} ({name})")
        got_index, n_floats = entry.unpack_from(data, offset)
        offset += entry.size
        if got_index != index:
            raise LengthMismatchError(index, f"buffer {index} has index {got_index}")
        if n_floats != arr.size:
            raise LengthMismatchError(
                index,
                f"buffer {index} ({name}) has {n_floats} floats, expected {arr.size}",
            )
        end = offset + n_floats * 4
        if end > len(data):
            raise LengthMismatchError(index, f"stream truncated inside buffer {index} ({name})")
        arrays.append(
            np.frombuffer(data, dtype="<f4", count=n_floats, offset=offset)
            .astype(np.float32)
            .reshape(arr.shape)
        )
        offset += n_floats * 4
    if offset != len(data):
        raise LengthMismatchError(
            len(expected) - 1, f"{len(data) - offset} trailing bytes after last buffer"
        )

    layers: dict[str, ConvParams] = {}
    it = iter(arrays)
    for name, p in model.layers.items():
        weights = next(it)
        bias = next(it)
        layers[name] = ConvParams(
            in_ch=p.in_ch, out_ch=p.out_ch, kernel=p.kernel, stride=p.stride,
            padding=p.padding, groups=p.groups, weights=weights, bias=bias,
        )
    return Model(config=model.config, layers=layers)


def load_weights_file(model: Model, path: str) -> Model:
    with open(path, "rb") as fh:
        return load_weights(model, fh.read())


def save_weights_file(model: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(save_weights(model))
