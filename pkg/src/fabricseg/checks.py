"""Gradient-verification suite over every differentiable operation.

Single smooth ops must match central differences within 1e-4 relative error;
compositions (convolution stacks, cells, the end-to-end network) within 1e-2.
Pooling is checked with well-separated inputs and a smaller step so the probe
never crosses a window-max switch.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .fabric import FabricConfig, weighted_merge
from .gradcheck import GradCheckReport, away_from_kinks, gradcheck, gradcheck_parameters
from .layers import (
    Conv3dSpec,
    ForwardContext,
    ParamBuilder,
    PoolSpec,
    ResidualUnit,
    conv3d,
    dropout,
    instance_norm,
    maxpool3d,
    pad_crop_high,
    upsample_trilinear,
)
from .network import NetworkConfig, build
from .tensor import ParamGroup, Tensor5

TOL_SMOOTH = 1e-4
TOL_DEEP = 1e-2


def _rand_shape(rng, lo=1, hi=4):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + tuple(
        int(rng.integers(lo, hi + 1)) for _ in range(3)
    )


def _rt(rng, shape, scale=1.0):
    return Tensor5((rng.normal(0, scale, size=shape)).astype(np.float32))


def _merge(label, reports) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_err)
    return GradCheckReport(label, worst.max_rel_err,
                           sum(r.n_coords for r in reports),
                           worst.worst_coord, worst.worst_ad, worst.worst_fd)


def _elementwise_checks(n_shapes, seed):
    rng = np.random.default_rng(seed)
    out = []
    unary = [
        ("sigmoid", T.sigmoid, lambda a: a),
        ("relu", T.relu, lambda a: away_from_kinks(a)),
        ("exp", T.exp, lambda a: np.clip(a, -3, 2)),
        ("log", T.log, lambda a: np.abs(a) + 0.1),
    ]
    for name, fn, precondition in unary:
        reports = []
        for _ in range(n_shapes):
            x = Tensor5(precondition(rng.normal(size=_rand_shape(rng))).astype(np.float32))
            reports.append(gradcheck(fn, x, max_coords=24, rng=rng, label=name))
        out.append((_merge(f"elementwise/{name}", reports), TOL_SMOOTH))
    binary = [
        ("add", T.add),
        ("sub", T.sub),
        ("mul", T.mul),
    ]
    for name, fn in binary:
        reports = []
        for _ in range(n_shapes):
            shape = _rand_shape(rng)
            b = _rt(rng, shape)
            b.requires_grad = True
            reports.append(gradcheck(lambda a: fn(a, b), _rt(rng, shape),
                                     max_coords=24, rng=rng, label=name))
            s = T.scalar_tensor(float(rng.normal()), requires_grad=True)
            reports.append(gradcheck(lambda a: fn(a, s), _rt(rng, shape),
                                     max_coords=24, rng=rng, label=name + "/scalar"))
        out.append((_merge(f"elementwise/{name}", reports), TOL_SMOOTH))
    reports = []
    for _ in range(n_shapes):
        c = float(rng.normal())
        reports.append(gradcheck(lambda a: T.scale(a, c), _rt(rng, _rand_shape(rng)),
                                 max_coords=24, rng=rng, label="scale"))
    out.append((_merge("elementwise/scale", reports), TOL_SMOOTH))
    return out


def _layer_checks(n_shapes, seed):
    rng = np.random.default_rng(seed + 1)
    out = []

    reports = []
    for _ in range(max(3, n_shapes // 4)):
        x = _rt(rng, (1, int(rng.integers(1, 4)), 4, 5, 6))
        reports.append(gradcheck(T.softmax_channels, x, max_coords=60, min_grad=1e-3,
                                 rng=rng, label="softmax"))
    out.append((_merge("softmax_channels", reports), TOL_SMOOTH))

    k = 3
    target = np.eye(k, dtype=np.float32)[
        rng.integers(0, k, size=(1, 3, 3, 3))].transpose(0, 4, 1, 2, 3)
    tt = Tensor5(target)
    probe = Tensor5(rng.uniform(0.1, 0.9, size=(1, k, 3, 3, 3)).astype(np.float32))
    out.append((gradcheck(lambda p: T.cross_entropy(p, tt), probe, max_coords=60,
                          rng=rng, label="cross_entropy"), TOL_SMOOTH))

    conv_cases = [
        ((1, 1, 1), (1, 1, 1), (1, 1, 1)),
        ((2, 2, 2), (1, 1, 1), (1, 1, 1)),
        ((1, 1, 1), (2, 2, 2), (2, 2, 2)),
        ((2, 2, 2), (2, 2, 2), (0, 0, 0)),
    ]
    reports = []
    for stride, dil, pad in conv_cases:
        spec = Conv3dSpec(2, 3, stride=stride, dilation=dil, padding=pad)
        w = Tensor5(rng.normal(0, 0.3, size=(3, 2, 3, 3, 3)).astype(np.float32),
                    requires_grad=True)
        b = Tensor5(rng.normal(0, 0.1, size=(1, 3, 1, 1, 1)).astype(np.float32),
                    requires_grad=True)
        x = _rt(rng, (1, 2, 7, 8, 9))
        reports.append(gradcheck(lambda t: conv3d(t, spec, w, b), x, max_coords=60,
                                 min_grad=1e-2, rng=rng, label="conv/x"))
        xw = Tensor5(x.data.copy())
        reports.append(gradcheck(lambda t: conv3d(xw, spec, t, b), w, max_coords=60,
                                 min_grad=1e-2, rng=rng, label="conv/w"))
    out.append((_merge("conv3d", reports), TOL_DEEP))

    reports = []
    for _ in range(max(3, n_shapes // 4)):
        shape = (1, 2, int(rng.integers(4, 8)), int(rng.integers(4, 8)), int(rng.integers(4, 8)))
        vals = rng.permutation(np.linspace(-1.0, 1.0, int(np.prod(shape))))
        x = Tensor5(vals.reshape(shape).astype(np.float32))
        reports.append(gradcheck(lambda t: maxpool3d(t, PoolSpec(2)), x, h=1e-4,
                                 max_coords=80, rng=rng, label="maxpool"))
    out.append((_merge("maxpool3d", reports), TOL_SMOOTH))

    reports = []
    for factor in (1, 2, 3):
        x = _rt(rng, (1, 2, 4, 5, 3))
        reports.append(gradcheck(lambda t: upsample_trilinear(t, factor), x,
                                 max_coords=80, rng=rng, label=f"upsample{factor}"))
    out.append((_merge("upsample_trilinear", reports), TOL_SMOOTH))

    reports = []
    for _ in range(max(3, n_shapes // 4)):
        c = int(rng.integers(1, 4))
        x = _rt(rng, (2, c, 4, 4, 4))
        g = Tensor5(rng.normal(1, 0.2, size=(1, c, 1, 1, 1)).astype(np.float32),
                    requires_grad=True)
        be = Tensor5(rng.normal(0, 0.2, size=(1, c, 1, 1, 1)).astype(np.float32),
                     requires_grad=True)
        reports.append(gradcheck(lambda t: instance_norm(t, g, be), x, max_coords=60,
                                 min_grad=1e-2, rng=rng, label="instnorm/x"))
        xn = Tensor5(x.data.copy())
        reports.append(gradcheck(lambda t: instance_norm(xn, t, be), g, max_coords=8,
                                 min_grad=1e-2, rng=rng, label="instnorm/gamma"))
    out.append((_merge("instance_norm", reports), TOL_SMOOTH))

    x = _rt(rng, (1, 2, 6, 6, 6))
    drop_fn = lambda t: dropout(t, 0.5, True, np.random.default_rng(123))
    out.append((gradcheck(drop_fn, x, max_coords=80, rng=rng, label="dropout"),
                TOL_SMOOTH))

    x = _rt(rng, (1, 2, 5, 6, 7))
    out.append((gradcheck(lambda t: pad_crop_high(t, (6, 6, 6)), x, max_coords=80,
                          rng=rng, label="pad_crop"), TOL_SMOOTH))

    gates = [Tensor5(rng.uniform(-0.03, 0.03, size=(1, 1, 1, 1, 1)).astype(np.float32),
                     requires_grad=True) for _ in range(2)]
    other = _rt(rng, (1, 2, 4, 4, 4))
    other.requires_grad = True
    out.append((gradcheck(lambda t: weighted_merge([t, other], gates), _rt(rng, (1, 2, 4, 4, 4)),
                          max_coords=60, rng=rng, label="weighted_merge"), TOL_SMOOTH))
    return out


def _composite_checks(seed):
    rng = np.random.default_rng(seed + 2)
    out = []

    params: dict = {}
    builder = ParamBuilder(params, np.random.default_rng(seed + 3), ParamGroup.ENCODER_DECODER)
    unit = ResidualUnit(builder, "unit", 2, 3)
    ctx_rng_seed = 77

    def unit_fn(t):
        ctx = ForwardContext(training=True, rng=np.random.default_rng(ctx_rng_seed),
                             dropout_rate=0.5)
        return unit(t, ctx)

    x = Tensor5(away_from_kinks(rng.normal(size=(1, 2, 6, 6, 6))).astype(np.float32))
    out.append((gradcheck(unit_fn, x, h=1e-4, max_coords=100, rng=rng,
                          label="residual_unit"), TOL_DEEP))

    from .fabric import Aspp3d

    params2: dict = {}
    builder2 = ParamBuilder(params2, np.random.default_rng(seed + 4), ParamGroup.FABRIC)
    aspp = Aspp3d(builder2, "aspp", 2, 3, (1, 2))

    def aspp_fn(t):
        ctx = ForwardContext(training=False, dropout_rate=0.0)
        return aspp(t, ctx)

    x = _rt(rng, (1, 2, 6, 6, 6))
    out.append((gradcheck(aspp_fn, x, h=1e-4, max_coords=100, min_grad=1e-3, rng=rng,
                          label="aspp3d"), TOL_DEEP))
    return out


def _network_check(seed):
    cfg = NetworkConfig(in_channels=1, encoder_channels=(4, 8),
                        fabric=FabricConfig(width=2, depth=2, channels=8),
                        num_classes=2, dropout_rate=0.0)
    net = build(cfg, seed=seed)
    rng = np.random.default_rng(seed + 5)
    xdata = rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32)
    labels = rng.integers(0, 2, size=(1, 24, 24, 24))
    onehot = np.eye(2, dtype=np.float32)[labels].transpose(0, 4, 1, 2, 3)

    def forward_loss(dtype=np.float32):
        x = Tensor5(xdata.astype(dtype), dtype=dtype)
        t = Tensor5(onehot.astype(dtype), dtype=dtype)
        return T.cross_entropy(net.forward(x), t)

    report = gradcheck_parameters(forward_loss, net.parameters(), coords_per_param=6,
                                  total_coords=200, h=1e-4, min_grad=1e-4,
                                  rng=np.random.default_rng(seed + 6),
                                  label="network-end-to-end")
    return [(report, TOL_DEEP)]


def run_gradcheck_suite(full: bool = False, seed: int = 0):
    """Returns (results, all_passed); results are (GradCheckReport, tol) pairs."""
    n_shapes = 20 if not full else 40
    results = []
    results += _elementwise_checks(n_shapes, seed)
    results += _layer_checks(n_shapes, seed)
    results += _composite_checks(seed)
    results += _network_check(seed)
    ok = all(r.passed(tol) for r, tol in results)
    return results, ok
