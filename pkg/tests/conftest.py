import hashlib

import numpy as np
import pytest

from fabricseg.fabric import FabricConfig
from fabricseg.network import NetworkConfig, build


def array_hash(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def param_hashes(net, group=None) -> dict:
    return {
        name: array_hash(p.value.data)
        for name, p in net.params.items()
        if group is None or p.group is group
    }


def tiny_config(num_classes=2, dropout=0.0) -> NetworkConfig:
    return NetworkConfig(
        in_channels=1,
        encoder_channels=(4, 8),
        fabric=FabricConfig(width=2, depth=2, channels=8),
        num_classes=num_classes,
        dropout_rate=dropout,
    )


def small_config(num_classes=3, dropout=0.0) -> NetworkConfig:
    return NetworkConfig(
        in_channels=1,
        encoder_channels=(8, 16),
        fabric=FabricConfig(width=2, depth=2, channels=16),
        num_classes=num_classes,
        dropout_rate=dropout,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_net():
    return build(tiny_config(), seed=0)
