"""Fabric structure and forward: channel plan, graph, equalisation, cells."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabricseg.fabric import (
    Aspp3d,
    CellCoord,
    FabricConfig,
    ResidualFabric,
    build_graph,
    channel_plan,
    equalize_sizes,
    receptive_field_sizes,
    weighted_merge,
)
from fabricseg.layers import (
    ExtentError,
    ForwardContext,
    ParamBuilder,
    pad_crop_high,
    upsample_trilinear,
)
from fabricseg.tensor import ParamGroup, ShapeMismatchError, Tensor5, scalar_tensor


def ctx_eval():
    return ForwardContext(training=False, dropout_rate=0.0)


# ----------------------------------------------------------------- channel plan

def test_channel_plan_reference_config():
    plan = channel_plan(FabricConfig(width=3, depth=4, channels=64))
    expected = {1: [64, 64, 64], 2: [64, 128, 128], 3: [64, 128, 128], 4: [64, 64, 64]}
    for i, row in plan.rows():
        assert row == expected[i]


def test_channel_plan_single_branch():
    plan = channel_plan(FabricConfig(width=1, depth=2, channels=8))
    assert all(row == [8] for _, row in plan.rows())


def test_channel_plan_small():
    plan = channel_plan(FabricConfig(width=2, depth=2, channels=4))
    assert plan.rows() == [(1, [4, 4]), (2, [4, 4])]


def test_channel_plan_rejects_odd_depth():
    with pytest.raises(ValueError, match="even"):
        FabricConfig(width=2, depth=3, channels=4)


@settings(max_examples=40, deadline=None)
@given(width=st.integers(1, 4), half=st.integers(1, 3),
       channels=st.sampled_from([1, 2, 4, 8, 16]))
def test_channel_plan_mirror_symmetry(width, half, channels):
    depth = 2 * half
    plan = channel_plan(FabricConfig(width=width, depth=depth, channels=channels))
    for i in range(1, depth + 1):
        for j in range(1, width + 1):
            assert plan[(i, j)] == plan[(depth + 1 - i, j)]
    assert max(plan.channels.values()) == plan[(depth // 2, width)]


# ----------------------------------------------------------------------- graph

def test_graph_forward_in_edges():
    g = build_graph(FabricConfig(width=3, depth=4, channels=64))
    assert g.forward_in[CellCoord(2, 2)] == ((1, 1), (1, 2), (1, 3))
    assert g.forward_in[CellCoord(1, 1)] == (("in", 1),)
    for cell in g.cells:
        if cell.i >= 2:
            assert 2 <= len(g.forward_in[cell]) <= 3


def test_graph_residual_rules():
    g = build_graph(FabricConfig(width=3, depth=4, channels=64))
    assert CellCoord(1, 1) in g.residual_in[CellCoord(3, 1)]
    assert g.residual_in[CellCoord(3, 2)] == ()  # 64 != 128


def test_graph_residual_single_branch():
    g = build_graph(FabricConfig(width=1, depth=4, channels=8))
    pairs = {
        (src.i, dst.i)
        for dst, srcs in g.residual_in.items()
        for src in srcs
    }
    assert pairs == {(1, 3), (1, 4), (2, 4)}


def test_graph_deterministic():
    cfg = FabricConfig(width=3, depth=4, channels=16)
    assert build_graph(cfg) == build_graph(cfg)


def test_fabric_gate_parameters_cover_every_edge():
    cfg = FabricConfig(width=3, depth=4, channels=4)
    params = {}
    fab = ResidualFabric(ParamBuilder(params, np.random.default_rng(0), ParamGroup.FABRIC),
                         cfg)
    gates = [p for p in params.values() if p.group is ParamGroup.WRS_FABRIC]
    expected = fab.graph.forward_edge_count() + len(fab.graph.merge_branches)
    assert len(gates) == expected
    for p in gates:
        v = float(p.value.data.reshape(()))
        assert -0.03 <= v <= 0.03


# ------------------------------------------------------------------ equalise

def test_equalize_pads_high_edge(rng):
    x = Tensor5(rng.normal(size=(1, 1, 24, 25, 25)).astype(np.float32))
    (out,) = equalize_sizes([x], (25, 25, 25))
    assert out.shape == (1, 1, 25, 25, 25)
    assert np.array_equal(out.data[:, :, :24], x.data)
    assert np.all(out.data[:, :, 24] == 0.0)


def test_equalize_identity_bitwise(rng):
    x = Tensor5(rng.normal(size=(1, 1, 5, 5, 5)).astype(np.float32))
    (out,) = equalize_sizes([x], (5, 5, 5))
    assert np.array_equal(out.data, x.data)


def test_equalize_crops_high_edge(rng):
    x = Tensor5(rng.normal(size=(1, 1, 26, 25, 25)).astype(np.float32))
    (out,) = equalize_sizes([x], (25, 25, 25))
    assert out.shape == (1, 1, 25, 25, 25)
    assert np.array_equal(out.data, x.data[:, :, :25])


def test_equalize_rejects_gap_of_two(rng):
    x = Tensor5(rng.normal(size=(1, 1, 23, 25, 25)).astype(np.float32))
    with pytest.raises(ExtentError, match="depth"):
        equalize_sizes([x], (25, 25, 25))


# ----------------------------------------------------------------------- gates

def test_weighted_merge_single_input_w0(rng):
    x = Tensor5(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
    out = weighted_merge([x], [scalar_tensor(0.0)])
    assert np.allclose(out.data, 0.5 * x.data, atol=1e-7)


def test_weighted_merge_two_equal_inputs(rng):
    x = Tensor5(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
    x2 = Tensor5(x.data.copy())
    out = weighted_merge([x, x2], [scalar_tensor(0.0), scalar_tensor(0.0)])
    assert np.allclose(out.data, x.data, atol=1e-6)


def test_weighted_merge_saturation(rng):
    x = Tensor5(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
    hi = weighted_merge([x], [scalar_tensor(20.0)])
    lo = weighted_merge([x], [scalar_tensor(-20.0)])
    assert np.abs(hi.data - x.data).max() < 1e-8 * np.abs(x.data).max() + 1e-7
    assert np.abs(lo.data).max() < 1e-7


def test_weighted_merge_shape_mismatch(rng):
    a = Tensor5(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
    b = Tensor5(rng.normal(size=(1, 2, 4, 4, 5)).astype(np.float32))
    with pytest.raises(ShapeMismatchError, match="equalisation"):
        weighted_merge([a, b], [scalar_tensor(0.0), scalar_tensor(0.0)])


# ----------------------------------------------------------------------- aspp

def _build_aspp(cin, cout, dilations, seed=0):
    params = {}
    builder = ParamBuilder(params, np.random.default_rng(seed), ParamGroup.FABRIC)
    return Aspp3d(builder, "aspp", cin, cout, dilations), params


def test_aspp_single_dilation_reduces_to_conv_path(rng):
    aspp, params = _build_aspp(2, 2, (1,))
    # identity-initialise the fuse conv: output should equal the branch output
    fuse_w = params["aspp.fuse.weight"].value.data
    fuse_w[...] = 0.0
    for c in range(2):
        fuse_w[c, c, 0, 0, 0] = 1.0
    params["aspp.fuse.bias"].value.data[...] = 0.0
    x = Tensor5(rng.normal(size=(1, 2, 5, 5, 5)).astype(np.float32))
    out = aspp(x, ctx_eval())
    branch = aspp.branches[0](x, ctx_eval())
    assert np.allclose(out.data, branch.data, atol=1e-6)


def test_aspp_branch_effective_extents():
    aspp, _ = _build_aspp(2, 2, (1, 2, 4))
    assert len(aspp.branches) == 3
    effs = [b.conv.spec.effective_kernel()[0] for b in aspp.branches]
    assert effs == [3, 5, 9]


def test_aspp_preserves_extents(rng):
    aspp, _ = _build_aspp(2, 3, (1, 2, 4))
    x = Tensor5(rng.normal(size=(1, 2, 9, 10, 11)).astype(np.float32))
    out = aspp(x, ctx_eval())
    assert out.shape == (1, 3, 9, 10, 11)


# ----------------------------------------------------------------------- cells

def _build_fabric(cfg, seed=0):
    params = {}
    fab = ResidualFabric(ParamBuilder(params, np.random.default_rng(seed), ParamGroup.FABRIC),
                         cfg)
    return fab, params


def test_cell_first_column_is_gated_aspp_of_input(rng):
    cfg = FabricConfig(width=2, depth=2, channels=4)
    fab, params = _build_fabric(cfg)
    cell = fab.cells[CellCoord(1, 1)]
    for g in cell.gates:
        g.value.data[...] = 0.0
    x = Tensor5(rng.normal(size=(1, 4, 8, 8, 8)).astype(np.float32))
    out = cell([x], (8, 8, 8), [], ctx_eval())
    half = Tensor5(0.5 * x.data)
    expected = cell.aspp(half, ctx_eval())
    assert np.allclose(out.data, expected.data, atol=1e-6)


def test_cell_output_channels_match_plan(rng):
    cfg = FabricConfig(width=3, depth=4, channels=4)
    fab, _ = _build_fabric(cfg)
    x = Tensor5(rng.normal(size=(1, 4, 16, 16, 16)).astype(np.float32))
    out = fab(x, ctx_eval())
    assert out.shape == x.shape


def test_fabric_shape_invariance_sweep(rng):
    cfg = FabricConfig(width=3, depth=4, channels=4)
    fab, _ = _build_fabric(cfg)
    shapes = [(19, 23, 33), (20, 25, 31), (24, 24, 24), (27, 19, 29), (33, 33, 19)]
    for shape in shapes:
        x = Tensor5(rng.normal(size=(1, 4) + shape).astype(np.float32))
        out = fab(x, ctx_eval())
        assert out.shape == (1, 4) + shape


def test_fabric_rejects_small_input(rng):
    cfg = FabricConfig(width=3, depth=2, channels=4)
    fab, _ = _build_fabric(cfg)
    x = Tensor5(rng.normal(size=(1, 4, 11, 16, 16)).astype(np.float32))
    with pytest.raises(ExtentError, match="minimum"):
        fab(x, ctx_eval())


def test_fabric_single_branch_degenerates_to_chain(rng):
    cfg = FabricConfig(width=1, depth=2, channels=4)
    fab, _ = _build_fabric(cfg)
    g = fab.graph
    assert all(len(g.forward_in[c]) == 1 for c in g.cells)
    x = Tensor5(rng.normal(size=(1, 4, 8, 8, 8)).astype(np.float32))
    assert fab(x, ctx_eval()).shape == x.shape


def _reference_fabric_walk(fab, x, ctx):
    """Re-walk the graph with plain (ungated) sums using only layer ops.

    Independent of ResidualFabric.__call__: used to check that saturating all
    gate weights makes the production forward equal an unweighted summation.
    """
    from fabricseg.tensor import add

    cfg = fab.config
    graph = fab.graph
    branch_inputs = {1: x}
    for j, conv in zip(range(2, cfg.width + 1), fab.split_convs):
        branch_inputs[j] = conv(branch_inputs[j - 1])
    extents = {j: branch_inputs[j].shape[2:] for j in branch_inputs}
    outs = {}
    for coord in graph.cells:
        cell = fab.cells[coord]
        raw = [branch_inputs[coord.j] if src[0] == "in" else outs[src]
               for src in graph.forward_in[coord]]
        adapted = [a(t, ctx) for a, t in zip(cell.adapters, raw)]
        eq = [pad_crop_high(t, extents[coord.j]) for t in adapted]
        acc = eq[0]
        for t in eq[1:]:
            acc = add(acc, t)
        y = cell.aspp(acc, ctx)
        for r in graph.residual_in[coord]:
            y = add(y, outs[(r.i, r.j)])
        outs[(coord.i, coord.j)] = y
    merged = None
    for j in graph.merge_branches:
        t = outs[(cfg.depth, j)]
        for k in range(j - 1, 0, -1):
            t = upsample_trilinear(t, 2)
            t = pad_crop_high(t, extents[k])
        merged = t if merged is None else add(merged, t)
    return fab.merge_proj(merged)


def test_saturated_gates_match_unweighted_reference(rng):
    cfg = FabricConfig(width=2, depth=2, channels=4)
    fab, params = _build_fabric(cfg, seed=3)
    for p in params.values():
        if p.group is ParamGroup.WRS_FABRIC:
            p.value.data[...] = 20.0  # sigmoid ~ 1
    x = Tensor5(rng.normal(size=(1, 4, 12, 13, 14)).astype(np.float32))
    prod = fab(x, ctx_eval())
    ref = _reference_fabric_walk(fab, x, ctx_eval())
    assert np.abs(prod.data - ref.data).max() < 1e-4


def test_residual_edges_are_live(rng):
    cfg = FabricConfig(width=1, depth=4, channels=4)
    fab, _ = _build_fabric(cfg, seed=2)
    x = Tensor5(rng.normal(size=(1, 4, 8, 8, 8)).astype(np.float32))
    with_res = fab(x, ctx_eval())
    without = fab(x, ctx_eval(), graph=fab.graph.without_residual_edges())
    assert with_res.shape == without.shape
    assert not np.allclose(with_res.data, without.data, atol=1e-6)


# ------------------------------------------------------------ receptive fields

def test_receptive_fields_configured_rule():
    cfg = FabricConfig(width=3, depth=4, channels=64, dilations=(1, 2, 4))
    assert receptive_field_sizes(cfg) == (3, 5, 6, 9, 10, 12, 18, 20, 36)


def test_receptive_fields_consecutive_rule():
    cfg = FabricConfig(width=3, depth=4, channels=64, dilations=(1, 2, 4))
    assert receptive_field_sizes(cfg, "consecutive") == (3, 5, 6, 7, 10, 12, 14, 20, 28)


def test_receptive_fields_degenerate():
    cfg = FabricConfig(width=1, depth=2, channels=8, dilations=(1,))
    assert receptive_field_sizes(cfg) == (3,)


def test_receptive_fields_unknown_rule():
    with pytest.raises(ValueError):
        receptive_field_sizes(FabricConfig(), "banana")
