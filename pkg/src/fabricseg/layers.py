"""3D layer operations: convolution, pooling, resize, normalisation, dropout.

Each operation runs its forward through the active kernel backend and records
a tape node with a hand-written backward.  Layer classes (Conv3d,
InstanceNorm3d, ResidualUnit) bundle parameters and call the functional ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import (
    ParamGroup,
    Parameter,
    ShapeMismatchError,
    Tensor5,
    _record,
    add,
)
from .tensor import relu as t_relu


class ExtentError(ValueError):
    """An operation would produce an invalid spatial extent; names the axis."""

    def __init__(self, msg: str, axis: Optional[int] = None):
        self.axis = axis
        super().__init__(msg)


_AXIS_NAMES = ("depth", "height", "width")


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    dilation: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        for name, v, lo in (("kernel", self.kernel, 1), ("stride", self.stride, 1),
                            ("dilation", self.dilation, 1), ("padding", self.padding, 0)):
            if len(v) != 3 or any(int(e) < lo for e in v):
                raise ValueError(f"invalid {name} {v}")

    def effective_kernel(self) -> tuple[int, int, int]:
        return tuple((k - 1) * d + 1 for k, d in zip(self.kernel, self.dilation))

    def output_spatial(self, in_spatial: Sequence[int]) -> tuple[int, int, int]:
        out = []
        for ax, (n, k_eff, s, p) in enumerate(zip(in_spatial, self.effective_kernel(),
                                                  self.stride, self.padding)):
            o = (n + 2 * p - k_eff) // s + 1
            if o < 1:
                raise ExtentError(
                    f"conv3d output extent {o} < 1 on {_AXIS_NAMES[ax]} axis "
                    f"(input {n}, effective kernel {k_eff}, stride {s}, padding {p})",
                    axis=ax,
                )
            out.append(o)
        return tuple(out)


@dataclass(frozen=True)
class PoolSpec:
    rate: int = 2

    def __post_init__(self):
        if self.rate < 1:
            raise ValueError(f"pool rate must be >= 1, got {self.rate}")


def _val(p) -> Tensor5:
    return p.value if isinstance(p, Parameter) else p


def conv3d(x: Tensor5, spec: Conv3dSpec, weights, bias=None) -> Tensor5:
    """Strided/dilated 3D convolution with optional fused bias."""
    w = _val(weights)
    b = _val(bias) if bias is not None else None
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError("conv3d input channels", x.shape, (None, spec.in_channels))
    if w.shape != (spec.out_channels, spec.in_channels) + tuple(spec.kernel):
        raise ShapeMismatchError("conv3d weights", w.shape,
                                 (spec.out_channels, spec.in_channels) + tuple(spec.kernel))
    out_spatial = spec.output_spatial(x.shape[2:])
    # run the kernel at the widest operand dtype so float64 oracle probes stay
    # float64 end to end (the compiled kernels also need one uniform dtype)
    dt = np.result_type(x.data, w.data, *(() if b is None else (b.data,)))
    xd = x.data.astype(dt, copy=False)
    wd = w.data.astype(dt, copy=False)
    pd, ph, pw = spec.padding
    if pd or ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = xd
    y = kernels.conv3d_forward(xp, wd, spec.stride, spec.dilation, out_spatial)
    if b is not None:
        y += b.data
    out = Tensor5(y, dtype=dt)
    xp_shape = xp.shape
    xp_saved = xp

    def bwd(g):
        gxp = kernels.conv3d_backward_data(g, wd, spec.stride, spec.dilation, xp_shape)
        if pd or ph or pw:
            gx = gxp[:, :, pd:gxp.shape[2] - pd, ph:gxp.shape[3] - ph, pw:gxp.shape[4] - pw]
        else:
            gx = gxp
        gw = kernels.conv3d_backward_weights(g, xp_saved, w.shape, spec.stride, spec.dilation)
        if b is not None:
            gb = g.sum(axis=(0, 2, 3, 4)).reshape(b.shape)
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bwd)


def maxpool3d(x: Tensor5, spec: PoolSpec) -> Tensor5:
    """Window max at the pool rate; trailing voxels beyond full windows are discarded."""
    rate = spec.rate
    for ax, n in enumerate(x.shape[2:]):
        if n < rate:
            raise ExtentError(f"maxpool3d: {_AXIS_NAMES[ax]} extent {n} < rate {rate}", axis=ax)
    y, argmax_flat = kernels.maxpool_forward(x.data, rate)
    out = Tensor5(y, dtype=x.data.dtype)
    x_shape = x.shape

    def bwd(g):
        return (kernels.maxpool_backward(g, argmax_flat, x_shape),)

    return _record(out, (x,), bwd)


def upsample_trilinear(x: Tensor5, factor: int) -> Tensor5:
    """Trilinear resize by an integer factor, align-corners=false."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    y = kernels.resize_trilinear_forward(x.data, factor)
    out = Tensor5(y, dtype=x.data.dtype)
    in_spatial = x.shape[2:]

    def bwd(g):
        return (kernels.resize_trilinear_backward(g, factor, in_spatial),)

    return _record(out, (x,), bwd)


def instance_norm(x: Tensor5, gamma, beta, eps: float = 1e-5) -> Tensor5:
    """Normalise each (batch, channel) slice to zero mean / unit variance, then affine."""
    g_t, b_t = _val(gamma), _val(beta)
    d, h, w = x.shape[2:]
    if d * h * w < 2:
        raise ExtentError("instance_norm needs a spatial volume of at least 2 voxels")
    dt = np.result_type(x.data, g_t.data, b_t.data)
    xd = x.data.astype(dt, copy=False)
    mu = xd.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(dt)
    var = (np.square(xd - mu)).mean(axis=(2, 3, 4), keepdims=True,
                                    dtype=np.float64).astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mu) * inv
    out = Tensor5(xhat * g_t.data + b_t.data, dtype=dt)

    def bwd(g):
        dt = g.dtype
        dxhat = g * g_t.data
        # accumulate the slice means at f64: their cancellation against dxhat
        # is the noisy part of this backward
        m1 = dxhat.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(dt)
        m2 = (dxhat * xhat).mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(dt)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=(0, 2, 3, 4), dtype=np.float64).reshape(g_t.shape).astype(dt)
        dbeta = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).reshape(b_t.shape).astype(dt)
        return dx, dgamma, dbeta

    return _record(out, (x, g_t, b_t), bwd)


def dropout(x: Tensor5, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor5:
    """Zero each voxel with probability `rate` and rescale survivors (training only)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = Tensor5(x.data.copy(), dtype=x.data.dtype)

        def bwd_id(g):
            return (g,)

        return _record(out, (x,), bwd_id)
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    inv_keep = 1.0 / (1.0 - rate)
    out = Tensor5(x.data * keep * inv_keep, dtype=x.data.dtype)

    def bwd(g):
        return (g * keep * inv_keep,)

    return _record(out, (x,), bwd)


def pad_crop_high(x: Tensor5, target_spatial: Sequence[int]) -> Tensor5:
    """Zero-pad or crop the high edge of each spatial axis by at most one voxel."""
    target = tuple(int(t) for t in target_spatial)
    pads = []
    for ax, (n, t) in enumerate(zip(x.shape[2:], target)):
        diff = t - n
        if abs(diff) > 1:
            raise ExtentError(
                f"size equalisation on {_AXIS_NAMES[ax]} axis needs |{t} - {n}| <= 1",
                axis=ax,
            )
        pads.append(diff)
    if all(p == 0 for p in pads):
        out = Tensor5(x.data.copy(), dtype=x.data.dtype)

        def bwd_id(g):
            return (g,)

        return _record(out, (x,), bwd_id)
    y = x.data
    pad_widths = [(0, 0), (0, 0)] + [(0, max(p, 0)) for p in pads]
    if any(p > 0 for p in pads):
        y = np.pad(y, pad_widths)
    y = y[:, :, : target[0], : target[1], : target[2]]
    out = Tensor5(np.ascontiguousarray(y), dtype=x.data.dtype)
    in_spatial = x.shape[2:]

    def bwd(g):
        gp = g
        grow = [(0, 0), (0, 0)] + [(0, max(-p, 0)) for p in pads]
        if any(p < 0 for p in pads):
            gp = np.pad(gp, grow)
        gp = gp[:, :, : in_spatial[0], : in_spatial[1], : in_spatial[2]]
        return (np.ascontiguousarray(gp),)

    return _record(out, (x,), bwd)


@dataclass
class ForwardContext:
    """Per-call forward settings threaded through the network."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    dropout_rate: float = 0.5
    capture: Optional[dict] = None


class ParamBuilder:
    """Registers parameters under hierarchical names with one shared init rng."""

    def __init__(self, registry: dict, rng: np.random.Generator,
                 group: ParamGroup, prefix: str = ""):
        self.registry = registry
        self.rng = rng
        self.group = group
        self.prefix = prefix

    def child(self, name: str, group: Optional[ParamGroup] = None) -> "ParamBuilder":
        prefix = f"{self.prefix}{name}."
        return ParamBuilder(self.registry, self.rng, group or self.group, prefix)

    def _register(self, name: str, arr: np.ndarray, trainable: bool = True) -> Parameter:
        full = self.prefix + name
        if full in self.registry:
            raise ValueError(f"duplicate parameter name {full!r}")
        p = Parameter(full, Tensor5(arr.astype(np.float32)), self.group, trainable=trainable)
        self.registry[full] = p
        return p

    def conv_weight(self, name: str, out_ch: int, in_ch: int,
                    kernel=(3, 3, 3), std: Optional[float] = None) -> Parameter:
        fan_in = in_ch * kernel[0] * kernel[1] * kernel[2]
        if std is None:
            std = float(np.sqrt(2.0 / fan_in))
        arr = self.rng.normal(0.0, std, size=(out_ch, in_ch) + tuple(kernel))
        return self._register(name, arr)

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(name, np.ones(shape))

    def uniform_scalar(self, name: str, lo: float, hi: float) -> Parameter:
        arr = self.rng.uniform(lo, hi, size=(1, 1, 1, 1, 1))
        return self._register(name, arr)


class Conv3d:
    """Convolution layer owning its weight (and optional bias) parameters."""

    def __init__(self, builder: ParamBuilder, name: str, spec: Conv3dSpec,
                 weight_std: Optional[float] = None):
        self.spec = spec
        scope = builder.child(name)
        self.weight = scope.conv_weight("weight", spec.out_channels, spec.in_channels,
                                        spec.kernel, std=weight_std)
        self.bias = scope.zeros("bias", (1, spec.out_channels, 1, 1, 1)) if spec.has_bias else None

    def __call__(self, x: Tensor5) -> Tensor5:
        return conv3d(x, self.spec, self.weight, self.bias)


class InstanceNorm3d:
    def __init__(self, builder: ParamBuilder, name: str, channels: int, eps: float = 1e-5):
        scope = builder.child(name)
        self.eps = eps
        self.gamma = scope.ones("gamma", (1, channels, 1, 1, 1))
        self.beta = scope.zeros("beta", (1, channels, 1, 1, 1))

    def __call__(self, x: Tensor5) -> Tensor5:
        return instance_norm(x, self.gamma, self.beta, self.eps)


class ConvNormAct:
    """conv -> instance norm -> relu -> dropout, the repeated block unit."""

    def __init__(self, builder: ParamBuilder, name: str, spec: Conv3dSpec):
        scope = builder.child(name)
        self.conv = Conv3d(scope, "conv", spec)
        self.norm = InstanceNorm3d(scope, "norm", spec.out_channels)

    def __call__(self, x: Tensor5, ctx: ForwardContext) -> Tensor5:
        y = t_relu(self.norm(self.conv(x)))
        return dropout(y, ctx.dropout_rate, ctx.training, ctx.rng)


class ResidualUnit:
    """Two conv-norm-act blocks plus a skip (1x1x1 projection on channel change)."""

    def __init__(self, builder: ParamBuilder, name: str, in_ch: int, out_ch: int):
        scope = builder.child(name)
        same = (3, 3, 3)
        self.f1 = ConvNormAct(scope, "f1", Conv3dSpec(in_ch, out_ch, kernel=same,
                                                      padding=(1, 1, 1), has_bias=False))
        self.f2 = ConvNormAct(scope, "f2", Conv3dSpec(out_ch, out_ch, kernel=same,
                                                      padding=(1, 1, 1), has_bias=False))
        if in_ch != out_ch:
            self.skip = Conv3d(scope, "skip", Conv3dSpec(in_ch, out_ch, kernel=(1, 1, 1),
                                                         has_bias=False))
        else:
            self.skip = None

    def __call__(self, x: Tensor5, ctx: ForwardContext) -> Tensor5:
        y = self.f2(self.f1(x, ctx), ctx)
        s = self.skip(x) if self.skip is not None else x
        return add(y, s)
