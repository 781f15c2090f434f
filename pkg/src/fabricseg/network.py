"""Full segmentation network: encoder, fabric, decoder, softmax head.

The encoder is a stack of residual units each followed by max-pooling; the
fabric runs at the deepest scale; the decoder mirrors the encoder with
trilinear upsampling, re-equalisation against the encoder extents, and a
gated join with a semantic-gap shortcut convolution from the matching encoder
block.  Every parameter lives in exactly one freezable group so the staged
training schedule can unfreeze the gate weights late.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .fabric import CellCoord, FabricConfig, ResidualFabric
from .layers import (
    Conv3d,
    Conv3dSpec,
    ExtentError,
    ForwardContext,
    ParamBuilder,
    PoolSpec,
    ResidualUnit,
    maxpool3d,
    pad_crop_high,
    upsample_trilinear,
)
from .fabric import weighted_merge
from .tensor import ParamGroup, Parameter, Tensor5, softmax_channels


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    encoder_channels: tuple[int, ...] = (32, 64)
    fabric: FabricConfig = field(default_factory=FabricConfig)
    num_classes: int = 2
    dropout_rate: float = 0.5
    pool_rate: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if not self.encoder_channels:
            raise ValueError("encoder_channels must be non-empty")
        if self.fabric.channels != self.encoder_channels[-1]:
            raise ValueError(
                f"fabric channels ({self.fabric.channels}) must equal the last "
                f"encoder channel count ({self.encoder_channels[-1]})"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.pool_rate < 2:
            raise ValueError(f"pool_rate must be >= 2, got {self.pool_rate}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def min_input_extent(self) -> int:
        return self.pool_rate ** len(self.encoder_channels) * self.fabric.min_input_extent()


class Network:
    """Assembled graph plus the named, grouped parameter registry."""

    def __init__(self, config: NetworkConfig, seed: int):
        self.config = config
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        root = ParamBuilder(self.params, rng, ParamGroup.ENCODER_DECODER)

        enc_ch = config.encoder_channels
        self.encoder_units = []
        prev = config.in_channels
        for idx, ch in enumerate(enc_ch, start=1):
            self.encoder_units.append(ResidualUnit(root, f"encoder.block{idx}", prev, ch))
            prev = ch

        fabric_builder = root.child("fabric", group=ParamGroup.FABRIC)
        self.fabric = ResidualFabric(fabric_builder, config.fabric)

        dec_ch = tuple(reversed(enc_ch))
        self.decoder_units = []
        self.shortcut_convs = []
        self.join_gates = []
        prev = config.fabric.channels
        for idx, ch in enumerate(dec_ch, start=1):
            self.decoder_units.append(ResidualUnit(root, f"decoder.stage{idx}", prev, ch))
            self.shortcut_convs.append(
                Conv3d(root, f"decoder.stage{idx}.shortcut",
                       Conv3dSpec(ch, ch, padding=(1, 1, 1)))
            )
            gate_scope = root.child(f"decoder.stage{idx}", group=ParamGroup.WRS_OUTER)
            self.join_gates.append((
                gate_scope.uniform_scalar("gate_main", -0.03, 0.03),
                gate_scope.uniform_scalar("gate_shortcut", -0.03, 0.03),
            ))
            prev = ch

        head_builder = root.child("head", group=ParamGroup.HEAD)
        self.head = Conv3d(head_builder, "project",
                           Conv3dSpec(dec_ch[-1], config.num_classes, kernel=(1, 1, 1)),
                           weight_std=0.01)

    # ------------------------------------------------------------------ groups
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(int(np.prod(p.value.shape)) for p in self.params.values())

    def groups(self) -> dict[ParamGroup, list[Parameter]]:
        out: dict[ParamGroup, list[Parameter]] = {g: [] for g in ParamGroup}
        for p in self.params.values():
            out[p.group].append(p)
        return out

    def set_unfrozen_groups(self, groups):
        groups = set(groups)
        for p in self.params.values():
            p.value.requires_grad = p.trainable and p.group in groups

    def zero_grads(self):
        for p in self.params.values():
            p.value.zero_grad()

    # ----------------------------------------------------------------- forward
    def forward(self, x: Tensor5, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                capture: Optional[dict] = None) -> Tensor5:
        """Probability volume with num_classes channels and the input's extents."""
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        min_ext = cfg.min_input_extent()
        for ax, e in enumerate(x.shape[2:]):
            if e < min_ext:
                raise ExtentError(
                    f"input extent {e} on axis {ax} is below this configuration's "
                    f"minimum of {min_ext}",
                    axis=ax,
                )
        ctx = ForwardContext(training=training, rng=rng,
                             dropout_rate=cfg.dropout_rate, capture=capture)
        pool = PoolSpec(cfg.pool_rate)

        enc_feats = []
        h = x
        for unit in self.encoder_units:
            f = unit(h, ctx)
            enc_feats.append(f)
            h = maxpool3d(f, pool)

        h = self.fabric(h, ctx)

        for idx, unit in enumerate(self.decoder_units):
            skip_feat = enc_feats[-(idx + 1)]
            h = upsample_trilinear(h, cfg.pool_rate)
            h = pad_crop_high(h, skip_feat.shape[2:])
            h = unit(h, ctx)
            s = self.shortcut_convs[idx](skip_feat)
            g_main, g_short = self.join_gates[idx]
            h = weighted_merge([h, s], [g_main, g_short])

        logits = self.head(h)
        return softmax_channels(logits)


def build(config: NetworkConfig, seed: int) -> Network:
    return Network(config, seed)


def replace_head(net: Network, new_num_classes: int, seed: int) -> Network:
    """New network with a re-initialised head; every other parameter copied bitwise."""
    if new_num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {new_num_classes}")
    new_cfg = replace(net.config, num_classes=new_num_classes)
    out = Network(new_cfg, seed)
    for name, p in net.params.items():
        if p.group is ParamGroup.HEAD:
            continue
        out.params[name].value.data[...] = p.value.data
    return out


def export_feature_maps(net: Network, x: Tensor5,
                        coords: Sequence) -> dict[tuple[int, int], np.ndarray]:
    """Inference-mode cell outputs for batch item 0, keyed by (column, branch)."""
    cfg = net.config.fabric
    wanted = []
    for c in coords:
        i, j = (c.i, c.j) if isinstance(c, CellCoord) else (int(c[0]), int(c[1]))
        if not (1 <= i <= cfg.depth and 1 <= j <= cfg.width):
            raise ValueError(f"cell ({i},{j}) outside the {cfg.depth}x{cfg.width} fabric grid")
        wanted.append((i, j))
    capture = {c: None for c in wanted}
    net.forward(x, training=False, capture=capture)
    return {c: capture[c][0] for c in wanted}
