"""Network assembly: parameter accounting, forward contracts, head transfer."""

import numpy as np
import pytest

from conftest import array_hash, param_hashes, tiny_config
from fabricseg.fabric import FabricConfig
from fabricseg.layers import ExtentError
from fabricseg.network import NetworkConfig, build, export_feature_maps, replace_head
from fabricseg.tensor import ParamGroup, Tensor5


def hand_count_parameters(in_ch, enc_channels, width, depth, c_fab, n_dil, num_classes):
    """Independent layer-by-layer arithmetic for the total parameter count."""

    def unit(cin, cout):
        n = cout * cin * 27 + 2 * cout      # f1 conv + instance norm
        n += cout * cout * 27 + 2 * cout    # f2 conv + instance norm
        if cin != cout:
            n += cout * cin                 # 1x1x1 skip projection, no bias
        return n

    def chan(i, j):
        ii = i if i <= depth // 2 else depth + 1 - i
        return min(c_fab * 2 ** (ii - 1), c_fab * 2 ** (j - 1))

    total = 0
    prev = in_ch
    for ch in enc_channels:                       # encoder blocks
        total += unit(prev, ch)
        prev = ch

    total += (width - 1) * (c_fab * c_fab * 27 + c_fab)   # branch-split convs

    for i in range(1, depth + 1):                 # cells
        for j in range(1, width + 1):
            c_dst = chan(i, j)
            if i == 1:
                edges = [("in", j)]
            else:
                edges = [(i - 1, jq) for jq in (j - 1, j, j + 1) if 1 <= jq <= width]
            for src in edges:
                c_src = c_fab if src[0] == "in" else chan(src[0], src[1])
                jq = j if src[0] == "in" else src[1]
                if jq == j:
                    if c_src != c_dst:
                        total += c_src * c_dst + c_dst       # 1x1x1 channel match
                elif jq == j - 1:
                    total += c_src * c_dst * 27 + c_dst      # stride-2 conv
                else:
                    total += c_src * c_dst + c_dst           # 1x1x1 after upsample
                total += 1                                   # gate scalar
            total += n_dil * (c_dst * c_dst * 27 + 2 * c_dst)    # dilation branches
            total += n_dil * c_dst * c_dst + c_dst               # fuse conv

    total += width                                 # merge gate scalars
    total += c_fab * c_fab + c_fab                 # merge projection

    prev = c_fab
    for ch in reversed(enc_channels):              # decoder stages
        total += unit(prev, ch)
        total += ch * ch * 27 + ch                 # semantic-gap shortcut conv
        total += 2                                 # join gates
        prev = ch

    total += num_classes * prev + num_classes     # head
    return total


def test_parameter_count_matches_hand_oracle_reference_config():
    cfg = NetworkConfig(in_channels=1, encoder_channels=(32, 64),
                        fabric=FabricConfig(width=3, depth=4, channels=64),
                        num_classes=6)
    net = build(cfg, seed=0)
    expected = hand_count_parameters(1, (32, 64), 3, 4, 64, 3, 6)
    assert net.parameter_count() == expected


def test_parameter_count_matches_hand_oracle_tiny_config():
    cfg = tiny_config(num_classes=3)
    net = build(cfg, seed=1)
    expected = hand_count_parameters(1, (4, 8), 2, 2, 8, 3, 3)
    assert net.parameter_count() == expected


def test_builds_from_same_seed_are_bitwise_identical():
    cfg = tiny_config()
    a = build(cfg, seed=7)
    b = build(cfg, seed=7)
    assert param_hashes(a) == param_hashes(b)


def test_group_partition_covers_all_parameters_once():
    net = build(tiny_config(), seed=0)
    by_group = net.groups()
    names = [p.name for ps in by_group.values() for p in ps]
    assert sorted(names) == sorted(net.params.keys())
    assert len(names) == len(set(names))
    for g in (ParamGroup.ENCODER_DECODER, ParamGroup.FABRIC, ParamGroup.WRS_FABRIC,
              ParamGroup.WRS_OUTER, ParamGroup.HEAD):
        assert by_group[g], f"group {g} is empty"


def test_forward_shape_contract(rng, tiny_net):
    x = Tensor5(rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32))
    out = tiny_net.forward(x)
    assert out.shape == (1, 2, 24, 24, 24)


def test_forward_odd_extents(rng, tiny_net):
    x = Tensor5(rng.normal(size=(1, 1, 25, 27, 31)).astype(np.float32))
    out = tiny_net.forward(x)
    assert out.shape == (1, 2, 25, 27, 31)
    sums = out.data.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-5


def test_forward_inference_deterministic(rng):
    net = build(tiny_config(dropout=0.5), seed=0)
    x = Tensor5(rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32))
    a = net.forward(x, training=False)
    b = net.forward(x, training=False)
    assert np.array_equal(a.data, b.data)


def test_forward_rejects_small_input(rng, tiny_net):
    x = Tensor5(rng.normal(size=(1, 1, 23, 24, 24)).astype(np.float32))
    with pytest.raises(ExtentError, match="minimum of 24"):
        tiny_net.forward(x)


def test_min_input_extent_scales_with_width():
    cfg_w3 = NetworkConfig(in_channels=1, encoder_channels=(4, 8),
                           fabric=FabricConfig(width=3, depth=2, channels=8),
                           num_classes=2)
    assert cfg_w3.min_input_extent() == 48
    assert tiny_config().min_input_extent() == 24


def test_config_validation():
    with pytest.raises(ValueError, match="fabric channels"):
        NetworkConfig(encoder_channels=(4, 8),
                      fabric=FabricConfig(width=2, depth=2, channels=16))
    with pytest.raises(ValueError, match="num_classes"):
        NetworkConfig(encoder_channels=(4, 8),
                      fabric=FabricConfig(width=2, depth=2, channels=8), num_classes=1)


def test_replace_head_preserves_non_head_bitwise():
    net = build(tiny_config(num_classes=6), seed=0)
    new = replace_head(net, 2, seed=99)
    old_hashes = param_hashes(net)
    new_hashes = param_hashes(new)
    for name, p in net.params.items():
        if p.group is ParamGroup.HEAD:
            continue
        assert new_hashes[name] == old_hashes[name]
    assert new.config.num_classes == 2


def test_replace_head_forward_contract(rng):
    net = build(tiny_config(num_classes=6), seed=0)
    new = replace_head(net, 3, seed=1)
    x = Tensor5(rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32))
    out = new.forward(x)
    assert out.shape == (1, 3, 24, 24, 24)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-5


def test_replace_head_same_count_still_reinitialises():
    net = build(tiny_config(num_classes=4), seed=0)
    new = replace_head(net, 4, seed=12345)
    old_head = {n: array_hash(p.value.data) for n, p in net.params.items()
                if p.group is ParamGroup.HEAD}
    new_head = {n: array_hash(p.value.data) for n, p in new.params.items()
                if p.group is ParamGroup.HEAD}
    assert any(old_head[n] != new_head[n] for n in old_head if "weight" in n)


def test_replace_head_rejects_single_class():
    net = build(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        replace_head(net, 1, seed=0)


def test_export_feature_maps_shapes(rng, tiny_net):
    x = Tensor5(rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32))
    maps = export_feature_maps(tiny_net, x, [(1, 1), (2, 2)])
    # cells run at input/4 for branch 1 and input/8 for branch 2
    assert maps[(1, 1)].shape == (8, 6, 6, 6)
    assert maps[(2, 2)].shape == (8, 3, 3, 3)


def test_export_feature_maps_deterministic(rng, tiny_net):
    x = Tensor5(rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32))
    a = export_feature_maps(tiny_net, x, [(1, 1)])
    b = export_feature_maps(tiny_net, x, [(1, 1)])
    assert np.array_equal(a[(1, 1)], b[(1, 1)])


def test_export_feature_maps_zero_input_constant(tiny_net):
    x = Tensor5(np.zeros((1, 1, 24, 24, 24), dtype=np.float32))
    maps = export_feature_maps(tiny_net, x, [(1, 1)])
    arr = maps[(1, 1)]
    spread = arr.max(axis=(1, 2, 3)) - arr.min(axis=(1, 2, 3))
    assert np.abs(spread).max() < 1e-4


def test_export_feature_maps_rejects_bad_coord(rng, tiny_net):
    x = Tensor5(rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32))
    with pytest.raises(ValueError, match="outside"):
        export_feature_maps(tiny_net, x, [(9, 9)])


def test_size_invariance_random_shapes(rng, tiny_net):
    shapes = rng.integers(24, 41, size=(6, 3))
    for shape in shapes:
        shape = tuple(int(v) for v in shape)
        x = Tensor5(rng.normal(size=(1, 1) + shape).astype(np.float32))
        out = tiny_net.forward(x)
        assert out.shape == (1, 2) + shape
