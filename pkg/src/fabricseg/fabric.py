"""The dense residual fabric: a W x N grid of multi-dilation feature cells.

An input at scale s is split into W branches (branch j runs at s / 2^(j-1))
by chained stride-2 convolutions.  Each column of cells consumes the previous
column's outputs from neighbouring branches: every incoming map is adapted to
the cell's scale and channel count, size-equalised (conditional +/-1 pad or
crop), merged by a sigmoid-gated weighted sum, then pushed through parallel
dilated convolutions fused by a 1x1x1 convolution.  Cells two or more columns
apart on the same branch with equal channel counts are additionally joined by
plain residual shortcuts.  A final gated merge returns everything to scale s.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .layers import (
    Conv3d,
    Conv3dSpec,
    ConvNormAct,
    ExtentError,
    ForwardContext,
    ParamBuilder,
    pad_crop_high,
    upsample_trilinear,
)
from .tensor import ParamGroup, Parameter, ShapeMismatchError, Tensor5, add, mul, sigmoid


@dataclass(frozen=True)
class FabricConfig:
    width: int = 3
    depth: int = 4
    channels: int = 64
    dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.depth < 2 or self.depth % 2 != 0:
            raise ValueError(f"depth must be even and >= 2, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        d = tuple(self.dilations)
        if not d or any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise ValueError(f"dilations must be non-empty and strictly increasing, got {d}")
        object.__setattr__(self, "dilations", d)

    def min_input_extent(self) -> int:
        # the deepest branch must stay at least one 3x3x3 kernel wide
        return 2 ** (self.width - 1) * 3


@dataclass(frozen=True)
class CellCoord:
    i: int  # column, 1..depth
    j: int  # branch, 1..width


class ChannelPlan:
    """Per-cell channel counts: pyramid growth mirrored about the mid column."""

    def __init__(self, config: FabricConfig):
        self.config = config
        self.channels: dict[CellCoord, int] = {}
        n, w, c = config.depth, config.width, config.channels
        for i in range(1, n + 1):
            ii = i if i <= n // 2 else n + 1 - i
            for j in range(1, w + 1):
                self.channels[CellCoord(i, j)] = min(c * 2 ** (ii - 1), c * 2 ** (j - 1))

    def __getitem__(self, coord) -> int:
        if isinstance(coord, tuple):
            coord = CellCoord(*coord)
        return self.channels[coord]

    def rows(self) -> list[tuple[int, list[int]]]:
        n, w = self.config.depth, self.config.width
        return [(i, [self[(i, j)] for j in range(1, w + 1)]) for i in range(1, n + 1)]


def channel_plan(config: FabricConfig) -> ChannelPlan:
    return ChannelPlan(config)


@dataclass(frozen=True)
class FabricGraph:
    """Cell grid topology: gated forward edges, plain residual shortcuts, merge edges."""

    config: FabricConfig
    cells: tuple[CellCoord, ...]
    # per destination cell, ordered list of sources: ("in", j) or (i, j)
    forward_in: dict[CellCoord, tuple[tuple, ...]]
    residual_in: dict[CellCoord, tuple[CellCoord, ...]]
    merge_branches: tuple[int, ...]

    def forward_edge_count(self) -> int:
        return sum(len(v) for v in self.forward_in.values())

    def residual_edge_count(self) -> int:
        return sum(len(v) for v in self.residual_in.values())

    def without_residual_edges(self) -> "FabricGraph":
        empty = {c: () for c in self.cells}
        return replace(self, residual_in=empty)


def build_graph(config: FabricConfig) -> FabricGraph:
    plan = channel_plan(config)
    n, w = config.depth, config.width
    cells = tuple(CellCoord(i, j) for i in range(1, n + 1) for j in range(1, w + 1))
    forward_in: dict[CellCoord, tuple[tuple, ...]] = {}
    residual_in: dict[CellCoord, tuple[CellCoord, ...]] = {}
    for cell in cells:
        i, j = cell.i, cell.j
        if i == 1:
            forward_in[cell] = (("in", j),)
        else:
            forward_in[cell] = tuple(
                (i - 1, jq) for jq in (j - 1, j, j + 1) if 1 <= jq <= w
            )
        residual_in[cell] = tuple(
            CellCoord(ih, j)
            for ih in range(1, i - 1)
            if plan[(ih, j)] == plan[(i, j)]
        )
    return FabricGraph(
        config=config,
        cells=cells,
        forward_in=forward_in,
        residual_in=residual_in,
        merge_branches=tuple(range(1, w + 1)),
    )


def receptive_field_sizes(config: FabricConfig, rule: str = "configured",
                          kernel: int = 3) -> tuple[int, ...]:
    """Unique receptive-field extents over (dilation branch) x (scale branch).

    rule="configured" uses the configured dilation rates in the standard
    extent formula (k-1)*d+1; rule="consecutive" replaces them with 1..len
    (i.e. odd extents 3,5,7,...), an alternate enumeration some architecture
    summaries use.
    """
    if rule == "configured":
        extents = [(kernel - 1) * d + 1 for d in config.dilations]
    elif rule == "consecutive":
        extents = [(kernel - 1) * r + 1 for r in range(1, len(config.dilations) + 1)]
    else:
        raise ValueError(f"unknown receptive-field rule {rule!r}")
    sizes = {e * 2 ** (j - 1) for e in extents for j in range(1, config.width + 1)}
    return tuple(sorted(sizes))


def equalize_sizes(inputs: Sequence[Tensor5], target_spatial) -> list[Tensor5]:
    """Bring every input to the target extents by high-edge pad or crop (at most 1)."""
    return [pad_crop_high(t, target_spatial) for t in inputs]


def weighted_merge(inputs: Sequence[Tensor5], gates: Sequence) -> Tensor5:
    """Sum of inputs, each scaled by the sigmoid of its scalar gate weight."""
    if len(inputs) != len(gates):
        raise ValueError(f"{len(inputs)} inputs but {len(gates)} gate weights")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ShapeMismatchError("weighted_merge (size equalisation missing?)",
                                     shape, t.shape)
    out = None
    for t, g in zip(inputs, gates):
        gt = g.value if isinstance(g, Parameter) else g
        term = mul(t, sigmoid(gt))
        out = term if out is None else add(out, term)
    return out


class Aspp3d:
    """Parallel 3x3x3 convolutions at several dilation rates, fused by a 1x1x1 conv."""

    def __init__(self, builder: ParamBuilder, name: str, in_channels: int,
                 out_channels: int, dilations: Sequence[int]):
        scope = builder.child(name)
        self.dilations = tuple(dilations)
        self.branches = []
        for d in self.dilations:
            spec = Conv3dSpec(in_channels, out_channels,
                              dilation=(d, d, d), padding=(d, d, d), has_bias=False)
            self.branches.append(ConvNormAct(scope, f"rate{d}", spec))
        fuse_spec = Conv3dSpec(out_channels * len(self.branches), out_channels,
                               kernel=(1, 1, 1), has_bias=True)
        self.fuse = Conv3d(scope, "fuse", fuse_spec)

    def __call__(self, x: Tensor5, ctx: ForwardContext) -> Tensor5:
        from .tensor import concat_channels

        outs = [b(x, ctx) for b in self.branches]
        cat = outs[0] if len(outs) == 1 else concat_channels(outs)
        return self.fuse(cat)


class _IdentityAdapter:
    has_params = False

    def __call__(self, x: Tensor5, ctx: ForwardContext) -> Tensor5:
        return x


class _ChannelAdapter:
    has_params = True

    def __init__(self, builder, name, cin, cout):
        self.conv = Conv3d(builder, name, Conv3dSpec(cin, cout, kernel=(1, 1, 1)))

    def __call__(self, x, ctx):
        return self.conv(x)


class _DownAdapter:
    has_params = True

    def __init__(self, builder, name, cin, cout):
        self.conv = Conv3d(builder, name, Conv3dSpec(cin, cout, stride=(2, 2, 2),
                                                     padding=(1, 1, 1)))

    def __call__(self, x, ctx):
        return self.conv(x)


class _UpAdapter:
    has_params = True

    def __init__(self, builder, name, cin, cout):
        self.conv = Conv3d(builder, name, Conv3dSpec(cin, cout, kernel=(1, 1, 1)))

    def __call__(self, x, ctx):
        return self.conv(upsample_trilinear(x, 2))


class FabricCell:
    """One grid cell: adapt each incoming map, equalise, gated-merge, extract."""

    def __init__(self, builder: ParamBuilder, coord: CellCoord, graph: FabricGraph,
                 plan: ChannelPlan):
        config = graph.config
        self.coord = coord
        self.channels = plan[coord]
        scope = builder.child(f"cell_{coord.i}_{coord.j}")
        gate_scope = scope.child("gates", group=ParamGroup.WRS_FABRIC)
        self.adapters = []
        self.gates = []
        for src in graph.forward_in[coord]:
            if src[0] == "in":
                src_ch = config.channels
                src_j = coord.j
                tag = "in"
            else:
                si, sj = src
                src_ch = plan[(si, sj)]
                src_j = sj
                tag = f"{si}_{sj}"
            if src_j == coord.j:
                if src_ch == self.channels:
                    self.adapters.append(_IdentityAdapter())
                else:
                    self.adapters.append(_ChannelAdapter(scope, f"adapt_{tag}", src_ch, self.channels))
            elif src_j == coord.j - 1:
                self.adapters.append(_DownAdapter(scope, f"adapt_{tag}", src_ch, self.channels))
            elif src_j == coord.j + 1:
                self.adapters.append(_UpAdapter(scope, f"adapt_{tag}", src_ch, self.channels))
            else:
                raise ValueError(f"edge {src} -> {coord} spans more than one branch")
            self.gates.append(gate_scope.uniform_scalar(f"gate_{tag}", -0.03, 0.03))
        self.aspp = Aspp3d(scope, "aspp", self.channels, self.channels, config.dilations)

    def __call__(self, inputs: Sequence[Tensor5], target_spatial,
                 residuals: Sequence[Tensor5], ctx: ForwardContext) -> Tensor5:
        adapted = [a(x, ctx) for a, x in zip(self.adapters, inputs)]
        equal = equalize_sizes(adapted, target_spatial)
        fused = weighted_merge(equal, self.gates)
        y = self.aspp(fused, ctx)
        for r in residuals:
            y = add(y, r)
        if y.shape[1] != self.channels:
            raise ShapeMismatchError("fabric cell output channels", y.shape,
                                     (None, self.channels))
        return y


class ResidualFabric:
    """Parameters and forward pass for the full cell grid."""

    def __init__(self, builder: ParamBuilder, config: FabricConfig):
        self.config = config
        self.graph = build_graph(config)
        self.plan = channel_plan(config)
        c = config.channels
        self.split_convs = [
            Conv3d(builder, f"split.to_branch{j}",
                   Conv3dSpec(c, c, stride=(2, 2, 2), padding=(1, 1, 1)))
            for j in range(2, config.width + 1)
        ]
        self.cells = {
            coord: FabricCell(builder, coord, self.graph, self.plan)
            for coord in self.graph.cells
        }
        merge_scope = builder.child("merge", group=ParamGroup.WRS_FABRIC)
        self.merge_gates = [
            merge_scope.uniform_scalar(f"gate_{j}", -0.03, 0.03)
            for j in self.graph.merge_branches
        ]
        self.merge_proj = Conv3d(builder, "merge.proj",
                                 Conv3dSpec(c, c, kernel=(1, 1, 1)))

    def __call__(self, x: Tensor5, ctx: ForwardContext,
                 graph: Optional[FabricGraph] = None) -> Tensor5:
        graph = graph or self.graph
        config = self.config
        min_ext = config.min_input_extent()
        for ax, e in enumerate(x.shape[2:]):
            if e < min_ext:
                raise ExtentError(
                    f"fabric input extent {e} on axis {ax} is below the minimum "
                    f"{min_ext} (= 2^(width-1) * 3) needed by the deepest branch",
                    axis=ax,
                )
        if x.shape[1] != config.channels:
            raise ShapeMismatchError("fabric input channels", x.shape, (None, config.channels))

        branch_inputs = {1: x}
        for j, conv in zip(range(2, config.width + 1), self.split_convs):
            branch_inputs[j] = conv(branch_inputs[j - 1])
        extents = {j: branch_inputs[j].shape[2:] for j in branch_inputs}

        outs: dict[tuple[int, int], Tensor5] = {}
        for coord in graph.cells:
            i, j = coord.i, coord.j
            raw = [
                branch_inputs[j] if src[0] == "in" else outs[src]
                for src in graph.forward_in[coord]
            ]
            residuals = [outs[(r.i, r.j)] for r in graph.residual_in[coord]]
            y = self.cells[coord](raw, extents[j], residuals, ctx)
            outs[(i, j)] = y
            if ctx.capture is not None and (i, j) in ctx.capture:
                ctx.capture[(i, j)] = y.data.copy()

        merged = []
        for j in graph.merge_branches:
            t = outs[(config.depth, j)]
            for k in range(j - 1, 0, -1):
                t = upsample_trilinear(t, 2)
                t = pad_crop_high(t, extents[k])
            merged.append(t)
        fused = weighted_merge(merged, self.merge_gates)
        return self.merge_proj(fused)
