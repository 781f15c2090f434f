"""Command-line surface: gen-data, train, infer, eval, analyze, gradcheck,
export-features, augment-preview.

Config files are plain-text `key: value` blocks ('#' starts a comment); the
full key schema is documented in the README.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .augment import ALL_TRANSFORMS, AugmentSpec, apply_random
from .fabric import FabricConfig, channel_plan, receptive_field_sizes
from .metrics import evaluate_pairs
from .network import NetworkConfig, build, export_feature_maps
from .synthdata import SyntheticSpec, generate
from .tensor import Tensor5
from .training import AdamConfig, StageSchedule, train
from .volio import (
    VolumeFile,
    load_bundle,
    load_checkpoint,
    load_volume,
    save_bundle,
    save_checkpoint,
    save_volume,
)


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"{path}: malformed line {raw!r} (expected 'key: value')")
        key, val = line.split(":", 1)
        out[key.strip()] = val.strip()
    return out


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def network_config_from_kv(kv: dict[str, str], default_classes: int = 2) -> NetworkConfig:
    fabric = FabricConfig(
        width=int(kv.get("fabric_width", 3)),
        depth=int(kv.get("fabric_depth", 4)),
        channels=int(kv.get("fabric_channels", 64)),
        dilations=_ints(kv.get("dilations", "1 2 4")),
    )
    return NetworkConfig(
        in_channels=int(kv.get("in_channels", 1)),
        encoder_channels=_ints(kv.get("encoder_channels", "32 64")),
        fabric=fabric,
        num_classes=int(kv.get("num_classes", default_classes)),
        dropout_rate=float(kv.get("dropout_rate", 0.5)),
        pool_rate=int(kv.get("pool_rate", 2)),
    )


def augment_spec_from_kv(kv: dict[str, str]) -> AugmentSpec:
    enabled = tuple(kv.get("enabled", " ".join(ALL_TRANSFORMS)).replace(",", " ").split())
    return AugmentSpec(
        max_translation=float(kv.get("max_translation", 8.0)),
        max_rotation=float(kv.get("max_rotation", 10.0)),
        affine_jitter=float(kv.get("affine_jitter", 0.1)),
        elastic_alpha=float(kv.get("elastic_alpha", 10.0)),
        elastic_sigma=float(kv.get("elastic_sigma", 8.0)),
        enabled=enabled,
    )


def synthetic_spec_from_kv(kv: dict[str, str]) -> SyntheticSpec:
    ranges = []
    for chunk in kv.get("resolutions", "24-32 33-40 41-48").replace(",", " ").split():
        lo, hi = chunk.split("-")
        ranges.append((int(lo), int(hi)))
    return SyntheticSpec(
        resolution_ranges=tuple(ranges),
        n_examples=int(kv.get("n_examples", 20)),
        num_classes=int(kv.get("num_classes", 3)),
        shapes=tuple(kv.get("shapes", "ellipsoid box shell").replace(",", " ").split()),
        noise=float(kv.get("noise", 0.05)),
        seed=int(kv.get("seed", 0)),
        val_fraction=float(kv.get("val_fraction", 0.25)),
    )


def cmd_gen_data(args) -> int:
    spec = synthetic_spec_from_kv(parse_kv_file(args.spec))
    bundle = generate(spec)
    save_bundle(args.out, bundle)
    n = sum(len(ds.pairs) for ds in bundle.datasets)
    print(f"wrote {len(bundle.datasets)} datasets ({n} examples) to {args.out}")
    return 0


def cmd_train(args) -> int:
    kv = parse_kv_file(args.config) if args.config else {}
    bundle = load_bundle(args.bundle)
    seed = args.seed if args.seed is not None else int(kv.get("seed", 0))

    if args.init:
        net, _ = load_checkpoint(args.init, replace_head_classes=args.replace_head,
                                 head_seed=seed)
    else:
        net = build(network_config_from_kv(kv, default_classes=bundle.num_classes), seed)

    schedule = StageSchedule(
        stage1_epochs=int(kv.get("stage1_epochs", 20)),
        stage2_epochs=int(kv.get("stage2_epochs", 20)),
        max_epochs=int(kv.get("max_epochs", 100)),
        patience=int(kv["patience"]) if "patience" in kv else None,
        stop_at_dsc=float(kv["stop_at_dsc"]) if "stop_at_dsc" in kv else None,
    )
    adam_cfg = AdamConfig(
        lr=float(kv.get("lr", 1e-3)),
        beta1=float(kv.get("beta1", 0.9)),
        beta2=float(kv.get("beta2", 0.999)),
        eps=float(kv.get("eps", 1e-8)),
    )
    augment_spec = augment_spec_from_kv(kv) if kv.get("augment", "off") == "on" else None
    target_class = int(kv["target_class"]) if "target_class" in kv else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_epoch(record, net_, state_):
        (out / "metrics.csv.tmp").write_text(state_.metrics_csv(bundle.num_classes),
                                             encoding="utf-8")
        (out / "metrics.csv.tmp").replace(out / "metrics.csv")
        if state_.best_epoch == record.epoch:
            save_checkpoint(out / "best.ckpt", net_, train_state=state_)
        save_checkpoint(out / "last.ckpt", net_, train_state=state_)
        dscs = " ".join(f"{v:.4f}" for v in record.class_dsc)
        print(f"epoch {record.epoch} stage {record.stage} "
              f"loss {record.mean_loss:.4f} val-dsc {dscs}", flush=True)

    state = train(net, bundle, schedule, adam_cfg, augment_spec=augment_spec,
                  seed=seed, target_class=target_class, on_epoch=on_epoch)
    print(f"best val DSC {state.best_dsc:.4f} at epoch {state.best_epoch}")
    return 0


def cmd_infer(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    vol = load_volume(args.input)
    x = Tensor5(vol.data[None].astype(np.float32))
    prob = net.forward(x, training=False)
    if args.probs:
        out = VolumeFile(prob.data[0].astype(np.float32), spacing=vol.spacing)
    else:
        labels = prob.data[0].argmax(axis=0).astype(np.uint8)
        out = VolumeFile(labels[None], spacing=vol.spacing)
    save_volume(args.output, out)
    print(f"wrote {args.output}")
    return 0


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    bundle = load_bundle(args.bundle)
    lines = ["dataset,class,class_name,n_cases,dsc_mean,dsc_median,msd_mean,msd_median"]
    for ds in bundle.datasets:
        pairs = ds.val_pairs() if args.split == "val" else ds.train_pairs()
        if not pairs:
            continue
        table = evaluate_pairs(net, pairs, ds.num_classes)
        for k in sorted(table):
            row = table[k]
            lines.append(
                f"{ds.name},{k},{ds.class_names[k]},{row['n_cases']},"
                f"{row['dsc_mean']:.6f},{row['dsc_median']:.6f},"
                f"{row['msd_mean']:.6f},{row['msd_median']:.6f}"
            )
    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_analyze(args) -> int:
    kv = parse_kv_file(args.config) if args.config else {}
    cfg = network_config_from_kv(kv)
    net = build(cfg, seed=int(kv.get("seed", 0)))
    fab = cfg.fabric
    print("network configuration")
    print(f"  in channels: {cfg.in_channels}")
    print("  encoder channels: " + " ".join(str(c) for c in cfg.encoder_channels))
    print(f"  fabric: width={fab.width} depth={fab.depth} channels={fab.channels} "
          f"dilations={','.join(str(d) for d in fab.dilations)}")
    print(f"  classes: {cfg.num_classes}")
    print(f"  minimum input extent: {cfg.min_input_extent()}")
    print(f"parameter count: {net.parameter_count()}")
    print("channel plan:")
    for i, row in channel_plan(fab).rows():
        print(f"  i={i}: " + " ".join(str(c) for c in row))
    rf_cfg = receptive_field_sizes(fab, "configured")
    rf_alt = receptive_field_sizes(fab, "consecutive")
    print("receptive field sizes (configured dilations): "
          + " ".join(str(v) for v in rf_cfg))
    print("receptive field sizes (consecutive rates): "
          + " ".join(str(v) for v in rf_alt))
    graph = net.fabric.graph
    print("fabric edges:")
    print(f"  gated forward edges: {graph.forward_edge_count()}")
    print(f"  gated merge edges: {len(graph.merge_branches)}")
    print(f"  residual edges: {graph.residual_edge_count()}")
    for cell in graph.cells:
        for src in graph.forward_in[cell]:
            tag = "in" if src[0] == "in" else f"({src[0]},{src[1]})"
            print(f"  edge {tag} -> ({cell.i},{cell.j})")
    for cell in graph.cells:
        for src in graph.residual_in[cell]:
            print(f"  residual ({src.i},{src.j}) -> ({cell.i},{cell.j})")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck_suite

    results, ok = run_gradcheck_suite(full=args.full, seed=args.seed)
    for rep, tol in results:
        print(rep.line(tol))
    print("gradcheck " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_export_features(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    vol = load_volume(args.input)
    x = Tensor5(vol.data[None].astype(np.float32))
    coords = []
    for chunk in args.cells.split():
        i, j = chunk.split(",")
        coords.append((int(i), int(j)))
    maps = export_feature_maps(net, x, coords)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (i, j), arr in maps.items():
        path = out / f"cell_{i}_{j}.vol"
        save_volume(path, VolumeFile(arr.astype(np.float32), spacing=vol.spacing))
        print(f"wrote {path} (channels={arr.shape[0]}, extents={arr.shape[1:]})")
    return 0


def cmd_augment_preview(args) -> int:
    img = load_volume(args.input)
    lab = load_volume(args.labels)
    spec = augment_spec_from_kv(parse_kv_file(args.spec)) if args.spec else AugmentSpec()
    from .data import SamplePair

    pair = SamplePair(img.data[0], lab.data[0].astype(np.uint8), spacing=img.spacing)
    rng = np.random.default_rng(args.seed)
    out_pair = apply_random(pair, spec, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "image_before.vol", VolumeFile(pair.image[None], spacing=pair.spacing))
    save_volume(out / "labels_before.vol",
                VolumeFile(pair.labels.astype(np.uint8)[None], spacing=pair.spacing))
    save_volume(out / "image_after.vol", VolumeFile(out_pair.image[None], spacing=pair.spacing))
    save_volume(out / "labels_after.vol",
                VolumeFile(out_pair.labels.astype(np.uint8)[None], spacing=pair.spacing))
    print(f"wrote before/after volumes to {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fabricseg",
        description="Size-invariant 3D fabric segmentation: training, inference and analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-resolution bundle")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a bundle with the staged schedule")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to initialise from")
    p.add_argument("--replace-head", type=int, dest="replace_head",
                   help="re-initialise the head for this class count when loading --init")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--probs", action="store_true", help="write class probabilities instead of labels")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="print channel plan, receptive fields, edges, counts")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--full", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-features", help="write cell activation volumes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--cells", required=True, help="space-separated i,j pairs, e.g. '1,1 2,1'")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("augment-preview", help="write before/after augmentation volumes")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
