"""Portable file formats: volumes, checkpoints, dataset bundle manifests.

All formats are a UTF-8 text header (fixed field order) followed by a raw
little-endian payload, so they are platform-independent and round-trip
byte-identically.  Writes go to a temp file renamed into place.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, DatasetBundle, SamplePair
from .fabric import FabricConfig
from .network import Network, NetworkConfig, build, replace_head
from .tensor import ParamGroup

VOLUME_MAGIC = "VOLUME1"
CKPT_MAGIC = "FSEGCKPT1"
BUNDLE_MAGIC = "BUNDLE1"
CKPT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}


class VolumeFormatError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


def _atomic_write(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _split_header(blob: bytes, magic: str, err):
    """Header lines up to the PAYLOAD marker, plus the raw payload bytes."""
    marker = b"\nPAYLOAD "
    pos = blob.find(marker)
    if pos < 0:
        raise err(f"missing PAYLOAD marker (not a {magic} file?)")
    nl = blob.find(b"\n", pos + 1)
    if nl < 0:
        raise err("truncated header")
    header_lines = blob[:pos].decode("utf-8").split("\n")
    declared = int(blob[pos + len(marker):nl].decode("ascii"))
    payload = blob[nl + 1:]
    if not header_lines or header_lines[0] != magic:
        raise err(f"bad magic {header_lines[0]!r}, expected {magic}")
    if len(payload) != declared:
        raise err(f"payload is {len(payload)} bytes, header declares {declared}")
    return header_lines[1:], payload


def _parse_kv(lines, err) -> list[tuple[str, str]]:
    out = []
    for line in lines:
        if not line:
            continue
        if ":" not in line:
            raise err(f"malformed header line {line!r}")
        key, val = line.split(":", 1)
        out.append((key.strip(), val.strip()))
    return out


# --------------------------------------------------------------------- volumes

@dataclass
class VolumeFile:
    """(channels, depth, height, width) payload with spacing and class names."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    class_names: Optional[list[str]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise VolumeFormatError(f"volume data must be (C,D,H,W), got {self.data.shape}")
        if self.data.dtype not in _DTYPE_NAMES:
            raise VolumeFormatError(f"unsupported dtype {self.data.dtype} (need float32 or uint8)")
        self.spacing = tuple(float(s) for s in self.spacing)


def save_volume(path, vol: VolumeFile):
    c, d, h, w = vol.data.shape
    dtype_name = _DTYPE_NAMES[vol.data.dtype]
    lines = [
        VOLUME_MAGIC,
        f"dims: {d} {h} {w}",
        f"channels: {c}",
        f"dtype: {dtype_name}",
        "spacing_mm: " + " ".join(repr(s) for s in vol.spacing),
    ]
    if vol.class_names is not None:
        lines.append("class_names: " + ",".join(vol.class_names))
    raw = np.ascontiguousarray(vol.data).astype(_DTYPES[dtype_name], copy=False).tobytes()
    header = "\n".join(lines) + f"\nPAYLOAD {len(raw)}\n"
    _atomic_write(path, header.encode("utf-8") + raw)


def load_volume(path) -> VolumeFile:
    blob = Path(path).read_bytes()
    lines, payload = _split_header(blob, VOLUME_MAGIC, VolumeFormatError)
    fields = dict(_parse_kv(lines, VolumeFormatError))
    try:
        d, h, w = (int(v) for v in fields["dims"].split())
        channels = int(fields["channels"])
        dtype_name = fields["dtype"]
        spacing = tuple(float(v) for v in fields["spacing_mm"].split())
    except (KeyError, ValueError) as e:
        raise VolumeFormatError(f"bad volume header: {e}") from None
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    expected = channels * d * h * w * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload {len(payload)} bytes does not match dims {channels}x{d}x{h}x{w} "
            f"({expected} bytes)"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(channels, d, h, w)
    if dtype_name == "f32":
        data = data.astype(np.float32)
    else:
        data = data.astype(np.uint8)
    class_names = fields["class_names"].split(",") if "class_names" in fields else None
    return VolumeFile(data=data, spacing=spacing, class_names=class_names)


# ------------------------------------------------------------------ checkpoints

def _config_lines(cfg: NetworkConfig, seed: int) -> list[str]:
    return [
        f"format_version: {CKPT_VERSION}",
        f"seed: {seed}",
        f"config.in_channels: {cfg.in_channels}",
        "config.encoder_channels: " + " ".join(str(c) for c in cfg.encoder_channels),
        f"config.num_classes: {cfg.num_classes}",
        f"config.dropout_rate: {cfg.dropout_rate!r}",
        f"config.pool_rate: {cfg.pool_rate}",
        f"config.fabric.width: {cfg.fabric.width}",
        f"config.fabric.depth: {cfg.fabric.depth}",
        f"config.fabric.channels: {cfg.fabric.channels}",
        "config.fabric.dilations: " + " ".join(str(d) for d in cfg.fabric.dilations),
    ]


def _config_from_fields(fields: dict) -> NetworkConfig:
    fabric = FabricConfig(
        width=int(fields["config.fabric.width"]),
        depth=int(fields["config.fabric.depth"]),
        channels=int(fields["config.fabric.channels"]),
        dilations=tuple(int(v) for v in fields["config.fabric.dilations"].split()),
    )
    return NetworkConfig(
        in_channels=int(fields["config.in_channels"]),
        encoder_channels=tuple(int(v) for v in fields["config.encoder_channels"].split()),
        fabric=fabric,
        num_classes=int(fields["config.num_classes"]),
        dropout_rate=float(fields["config.dropout_rate"]),
        pool_rate=int(fields["config.pool_rate"]),
    )


def save_checkpoint(path, net: Network, train_state=None):
    """Write manifest + parameter payload (+ optimiser/rng state when given)."""
    lines = [CKPT_MAGIC] + _config_lines(net.config, net.seed)
    buffers: list[bytes] = []
    offset = 0
    for name, p in net.params.items():
        raw = np.ascontiguousarray(p.value.data).astype("<f4", copy=False).tobytes()
        shape = " ".join(str(s) for s in p.value.shape)
        lines.append(f"param: {name}|{p.group.name}|{shape}|{offset}")
        buffers.append(raw)
        offset += len(raw)
    if train_state is not None:
        lines.append(f"train.epoch: {train_state.epoch}")
        lines.append(f"train.global_step: {train_state.global_step}")
        lines.append(f"train.best_dsc: {train_state.best_dsc!r}")
        lines.append(f"train.best_epoch: {train_state.best_epoch}")
        if train_state.rng_state is not None:
            lines.append("train.rng_state: " + json.dumps(train_state.rng_state, sort_keys=True))
        if train_state.adam_state is not None:
            adam = train_state.adam_state
            lines.append("opt_t: " + json.dumps(adam["t"], sort_keys=True))
            for kind in ("m", "v"):
                for name in net.params:
                    if name not in adam[kind]:
                        continue
                    raw = np.ascontiguousarray(adam[kind][name]).astype("<f4", copy=False).tobytes()
                    lines.append(f"optbuf: {name}|{kind}|{offset}")
                    buffers.append(raw)
                    offset += len(raw)
    payload = b"".join(buffers)
    header = "\n".join(lines) + f"\nPAYLOAD {len(payload)}\n"
    _atomic_write(path, header.encode("utf-8") + payload)


def _read_f32(payload: bytes, offset: int, shape) -> np.ndarray:
    count = int(np.prod(shape))
    end = offset + 4 * count
    if end > len(payload):
        raise CheckpointFormatError(f"buffer at offset {offset} runs past the payload")
    return np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path, into: Optional[Network] = None,
                    replace_head_classes: Optional[int] = None, head_seed: int = 0):
    """Load a checkpoint; returns (network, train_state_or_None).

    With `into`, the stored parameters are loaded into that network, whose
    config must match the stored one (num_classes may differ only when
    `replace_head_classes` is given).  With `replace_head_classes`, the head is
    re-initialised for the new class count after the non-head load.
    """
    from .training import TrainState

    blob = Path(path).read_bytes()
    lines, payload = _split_header(blob, CKPT_MAGIC, CheckpointFormatError)
    kvs = _parse_kv(lines, CheckpointFormatError)
    fields = {}
    params = []
    optbufs = []
    for key, val in kvs:
        if key == "param":
            name, group, shape, offset = val.split("|")
            params.append((name, group, tuple(int(s) for s in shape.split()), int(offset)))
        elif key == "optbuf":
            name, kind, offset = val.split("|")
            optbufs.append((name, kind, int(offset)))
        else:
            fields[key] = val
    version = int(fields.get("format_version", -1))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint format version {version} not supported (expected {CKPT_VERSION})"
        )
    cfg = _config_from_fields(fields)
    stored_seed = int(fields.get("seed", 0))

    if into is not None:
        diffs = []
        for attr in ("in_channels", "encoder_channels", "dropout_rate", "pool_rate"):
            if getattr(into.config, attr) != getattr(cfg, attr):
                diffs.append(attr)
        if into.config.fabric != cfg.fabric:
            diffs.append("fabric")
        if into.config.num_classes != cfg.num_classes and replace_head_classes is None:
            diffs.append("num_classes")
        if diffs:
            raise CheckpointFormatError(
                "checkpoint config does not match the target network; differing fields: "
                + ", ".join(sorted(diffs))
            )
        net = into
    else:
        net = build(cfg, seed=stored_seed)

    loading_head = replace_head_classes is None and (into is None or
                                                     into.config.num_classes == cfg.num_classes)
    for name, group, shape, offset in params:
        if name not in net.params:
            if not loading_head and group == ParamGroup.HEAD.name:
                continue
            raise CheckpointFormatError(f"checkpoint parameter {name!r} unknown to the network")
        p = net.params[name]
        if not loading_head and p.group is ParamGroup.HEAD:
            continue
        if tuple(p.value.shape) != shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name}: checkpoint {shape}, network {tuple(p.value.shape)}"
            )
        if p.group.name != group:
            raise CheckpointFormatError(f"group mismatch for {name}: {group} vs {p.group.name}")
        p.value.data[...] = _read_f32(payload, offset, shape)

    if replace_head_classes is not None:
        net = replace_head(net, replace_head_classes, seed=head_seed)

    train_state = None
    if "train.epoch" in fields:
        train_state = TrainState(
            epoch=int(fields["train.epoch"]),
            global_step=int(fields["train.global_step"]),
            best_dsc=float(fields["train.best_dsc"]),
            best_epoch=int(fields["train.best_epoch"]),
        )
        if "train.rng_state" in fields:
            train_state.rng_state = json.loads(fields["train.rng_state"])
        if "opt_t" in fields:
            shapes = {name: shape for name, _, shape, _ in params}
            adam = {"m": {}, "v": {}, "t": json.loads(fields["opt_t"])}
            for name, kind, offset in optbufs:
                adam[kind][name] = _read_f32(payload, offset, shapes[name])
            train_state.adam_state = adam
    return net, train_state


# ----------------------------------------------------------------- bundles

def save_bundle(out_dir, bundle: DatasetBundle):
    """Write every pair as two volume files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [BUNDLE_MAGIC]
    if bundle.seed is not None:
        lines.append(f"seed: {bundle.seed}")
    for ds in bundle.datasets:
        spacing0 = ds.pairs[0].spacing if ds.pairs else (1.0, 1.0, 1.0)
        lines.append(
            f"dataset: {ds.name}|" + ",".join(ds.class_names) + "|"
            + " ".join(repr(s) for s in spacing0)
        )
    for ds in bundle.datasets:
        sub = out / ds.name
        sub.mkdir(exist_ok=True)
        for idx, pair in enumerate(ds.pairs):
            img_rel = f"{ds.name}/ex{idx}_img.vol"
            lab_rel = f"{ds.name}/ex{idx}_lab.vol"
            save_volume(out / img_rel, VolumeFile(pair.image[None], spacing=pair.spacing))
            save_volume(out / lab_rel, VolumeFile(pair.labels.astype(np.uint8)[None],
                                                  spacing=pair.spacing,
                                                  class_names=ds.class_names))
            split = "train" if idx in set(ds.train_idx) else (
                "val" if idx in set(ds.val_idx) else "none")
            lines.append(f"example: {ds.name}|{split}|{img_rel}|{lab_rel}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bundle(in_dir) -> DatasetBundle:
    root = Path(in_dir)
    manifest = root / "manifest.txt"
    text = manifest.read_text(encoding="utf-8").rstrip("\n").split("\n")
    if not text or text[0] != BUNDLE_MAGIC:
        raise VolumeFormatError(f"{manifest} is not a bundle manifest")
    seed = None
    ds_meta: dict[str, tuple[list[str], tuple]] = {}
    ds_order: list[str] = []
    examples: dict[str, list[tuple[str, str, str]]] = {}
    for line in text[1:]:
        if not line:
            continue
        key, val = line.split(":", 1)
        key = key.strip()
        val = val.strip()
        if key == "seed":
            seed = int(val)
        elif key == "dataset":
            name, classes, spacing = val.split("|")
            ds_meta[name] = (classes.split(","), tuple(float(s) for s in spacing.split()))
            ds_order.append(name)
            examples[name] = []
        elif key == "example":
            name, split, img, lab = val.split("|")
            examples[name].append((split, img, lab))
        else:
            raise VolumeFormatError(f"unknown manifest line {line!r}")
    datasets = []
    for name in ds_order:
        class_names, spacing = ds_meta[name]
        pairs = []
        train_idx, val_idx = [], []
        for idx, (split, img_rel, lab_rel) in enumerate(examples[name]):
            img = load_volume(root / img_rel)
            lab = load_volume(root / lab_rel)
            pairs.append(SamplePair(img.data[0], lab.data[0].astype(np.uint8),
                                    spacing=img.spacing, name=f"{name}/ex{idx}"))
            if split == "train":
                train_idx.append(idx)
            elif split == "val":
                val_idx.append(idx)
        datasets.append(Dataset(name=name, pairs=pairs, class_names=class_names,
                                train_idx=train_idx, val_idx=val_idx))
    return DatasetBundle(datasets=datasets, seed=seed)
