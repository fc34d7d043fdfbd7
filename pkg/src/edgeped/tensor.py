"""Deterministic CPU reference kernels for the layers the detector needs.

All kernels operate on NCHW float32 tensors and are pure functions: given
finite inputs they return a fresh tensor, never mutate their arguments, and
produce bitwise-identical results across runs (no thread-count-dependent
reductions are used outside of BLAS GEMM, whose per-element accumulation
order is fixed).

Convolution is cross-correlation (no kernel flip), the universal CNN
convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between an input tensor and layer parameters.

    ``axis`` names the offending axis ("channels", "height", ...).
    """

    def __init__(self, axis: str, message: str):
        super().__init__(message)
        self.axis = axis


class KernelMisuseError(ValueError):
    """A specialized kernel was called with parameters it does not support."""


class DomainError(ValueError):
    """Parameter values outside the mathematically valid domain."""


@dataclass(frozen=True)
class Tensor:
    """Dense 4-D feature map in (batch, channels, height, width) order.

    ``data`` is a C-contiguous float32 array of exactly that shape, so the
    flat layout is n-major, then c, then h, then w.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise DimensionError("rank", f"tensor must be 4-D NCHW, got {arr.ndim}-D")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor":
        return cls(np.zeros((n, c, h, w), dtype=np.float32))

    @classmethod
    def full(cls, n: int, c: int, h: int, w: int, value: float) -> "Tensor":
        return cls(np.full((n, c, h, w), value, dtype=np.float32))

    @classmethod
    def from_flat(cls, n: int, c: int, h: int, w: int, values) -> "Tensor":
        flat = np.asarray(values, dtype=np.float32).reshape(-1)
        if flat.size != n * c * h * w:
            raise DimensionError(
                "size", f"expected {n * c * h * w} elements, got {flat.size}"
            )
        return cls(flat.reshape(n, c, h, w))


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of one convolution layer.

    ``weights`` has shape (out_ch, in_ch // groups, k, k). ``groups == 1`` is
    a standard convolution; ``groups == in_ch`` is depthwise. ``bias`` is an
    optional per-output-channel array.
    """

    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise DomainError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel < 1:
            raise DomainError(f"kernel must be >= 1, got {self.kernel}")
        if self.padding < 0:
            raise DomainError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1 or self.in_ch % self.groups or self.out_ch % self.groups:
            raise DimensionError(
                "channels",
                f"groups={self.groups} must divide in_ch={self.in_ch} "
                f"and out_ch={self.out_ch}",
            )
        if self.weights is None:
            w = np.zeros(
                (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel),
                dtype=np.float32,
            )
        else:
            w = np.ascontiguousarray(self.weights, dtype=np.float32)
        expected = (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel)
        if w.shape != expected:
            raise DimensionError(
                "weights", f"weights shape {w.shape} != expected {expected}"
            )
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=np.float32)
            if b.shape != (self.out_ch,):
                raise DimensionError(
                    "bias", f"bias shape {b.shape} != ({self.out_ch},)"
                )
            object.__setattr__(self, "bias", b)

    @property
    def weight_count(self) -> int:
        return int(self.weights.size)


def _out_extent(extent: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise DimensionError(
            axis,
            f"kernel {kernel} with padding {padding} does not fit "
            f"{axis} extent {extent}",
        )
    return out


def _windows(padded: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Strided view of every kernel window: (n, c, H_out, W_out, k, k)."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride, :, :]


def conv2d(input: Tensor, params: ConvParams) -> Tensor:
    """Grouped 2-D cross-correlation plus optional bias.

    Each output element accumulates over (in-group channel, kernel row,
    kernel column) in that fixed order, so repeat runs are bit-identical.
    """
    if input.c != params.in_ch:
        raise DimensionError(
            "channels", f"input has {input.c} channels, layer expects {params.in_ch}"
        )
    h_out = _out_extent(input.h, params.kernel, params.stride, params.padding, "height")
    w_out = _out_extent(input.w, params.kernel, params.stride, params.padding, "width")

    x = input.data
    if params.padding:
        p = params.padding
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    n = input.n
    g = params.groups
    cpg = params.in_ch // g
    opg = params.out_ch // g

    if g == params.in_ch and opg == 1:
        # Depthwise: accumulate the k*k shifted planes in (row, column) order,
        # which realizes the fixed per-element accumulation order directly.
        k, s = params.kernel, params.stride
        w = params.weights[:, 0]  # (c, k, k)
        out = np.zeros((n, params.out_ch, h_out, w_out), dtype=np.float32)
        for i in range(k):
            for j in range(k):
                plane = x[:, :, i : i + s * h_out : s, j : j + s * w_out : s]
                out += plane * w[:, i, j].reshape(1, -1, 1, 1)
    elif params.kernel == 1 and g == 1:
        # Pointwise: per-pixel channel mix as one batched GEMM.
        sliced = x[:, :, :: params.stride, :: params.stride]
        flat = sliced.reshape(n, params.in_ch, h_out * w_out)
        mixed = np.matmul(params.weights.reshape(1, params.out_ch, params.in_ch), flat)
        out = mixed.reshape(n, params.out_ch, h_out, w_out)
    else:
        # General grouped conv: im2col, then a float32 GEMM per group.
        win = _windows(x, params.kernel, params.stride)
        cols = win.reshape(n, g, cpg, h_out, w_out, -1)
        cols = cols.transpose(1, 0, 3, 4, 2, 5).reshape(g, n * h_out * w_out, -1)
        filt = params.weights.reshape(g, opg, -1)
        out = np.matmul(cols, filt.transpose(0, 2, 1))  # (g, n*H*W, opg)
        out = out.reshape(g, n, h_out, w_out, opg).transpose(1, 0, 4, 2, 3)
        out = np.ascontiguousarray(out.reshape(n, params.out_ch, h_out, w_out))

    if params.bias is not None:
        out = out + params.bias.reshape(1, params.out_ch, 1, 1)
    return Tensor(out)


def depthwise_conv2d(input: Tensor, params: ConvParams) -> Tensor:
    """Per-channel convolution: output channel i depends only on input channel i."""
    if params.groups != params.in_ch or params.out_ch != params.in_ch:
        raise KernelMisuseError(
            f"depthwise requires groups == in_ch == out_ch, got groups={params.groups}, "
            f"in_ch={params.in_ch}, out_ch={params.out_ch}"
        )
    return conv2d(input, params)


def pointwise_conv2d(input: Tensor, params: ConvParams) -> Tensor:
    """1x1 convolution: a per-pixel (out_ch x in_ch) matrix multiply."""
    if params.kernel != 1:
        raise KernelMisuseError(f"pointwise requires kernel == 1, got {params.kernel}")
    if params.padding != 0:
        raise KernelMisuseError(f"pointwise requires padding == 0, got {params.padding}")
    return conv2d(input, params)


def batchnorm_fold(
    params: ConvParams,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> ConvParams:
    """Fold inference-time batch norm into the preceding convolution.

    conv(x, folded) == gamma * (conv(x, params) - mean) / sqrt(var + eps) + beta
    """
    gamma = np.asarray(gamma, dtype=np.float32)
    beta = np.asarray(beta, dtype=np.float32)
    mean = np.asarray(mean, dtype=np.float32)
    var = np.asarray(var, dtype=np.float32)
    for name, arr in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if arr.shape != (params.out_ch,):
            raise DimensionError(name, f"{name} must have shape ({params.out_ch},)")
    if np.any(var < 0):
        raise DomainError("variance must be non-negative")

    scale = gamma / np.sqrt(var + eps, dtype=np.float32)
    weights = params.weights * scale.reshape(-1, 1, 1, 1)
    old_bias = params.bias if params.bias is not None else np.zeros(params.out_ch, np.float32)
    bias = (old_bias - mean) * scale + beta
    return ConvParams(
        in_ch=params.in_ch,
        out_ch=params.out_ch,
        kernel=params.kernel,
        stride=params.stride,
        padding=params.padding,
        groups=params.groups,
        weights=weights.astype(np.float32),
        bias=bias.astype(np.float32),
    )


def leaky_relu(input: Tensor, slope: float = 0.1) -> Tensor:
    """Elementwise max(x, slope * x)."""
    x = input.data
    return Tensor(np.where(x >= 0, x, np.float32(slope) * x))


def relu6(input: Tensor) -> Tensor:
    """Elementwise min(max(x, 0), 6)."""
    return Tensor(np.clip(input.data, 0.0, 6.0))


def upsample_nearest2x(input: Tensor) -> Tensor:
    """Double height and width by replicating each element into a 2x2 block."""
    x = input.data
    return Tensor(x.repeat(2, axis=2).repeat(2, axis=3))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two tensors along the channel axis; ``a`` occupies channels [0, a.c)."""
    if a.n != b.n:
        raise DimensionError("batch", f"batch mismatch: {a.n} vs {b.n}")
    if a.h != b.h:
        raise DimensionError("height", f"height mismatch: {a.h} vs {b.h}")
    if a.w != b.w:
        raise DimensionError("width", f"width mismatch: {a.w} vs {b.w}")
    return Tensor(np.concatenate([a.data, b.data], axis=1))


def maxpool2d(input: Tensor, kernel: int, stride: int) -> Tensor:
    """Max over each k x k window, stepped by ``stride``."""
    if kernel < 1:
        raise DomainError(f"kernel must be >= 1, got {kernel}")
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    h_out = _out_extent(input.h, kernel, stride, 0, "height")
    w_out = _out_extent(input.w, kernel, stride, 0, "width")
    win = _windows(input.data, kernel, stride)
    out = win.max(axis=(4, 5))
    assert out.shape[2:] == (h_out, w_out)
    return Tensor(out)
