"""Staged training: Adam over freezable groups, round-robin multi-dataset
sampling, per-epoch validation Dice and best-checkpoint tracking.

The schedule trains in three stages: gate weights everywhere frozen first,
then the fabric's gates join, then the outer (encoder-decoder shortcut)
gates.  Batch size is one volume: examples of different resolutions cannot be
stacked, which is also why normalisation is per-instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DatasetBundle, SamplePair, one_hot_labels
from .metrics import dsc
from .network import Network
from .tensor import GradTape, ParamGroup, Tensor5, cross_entropy


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries the offending example and norms."""


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction; per-parameter step counters so groups that
    unfreeze mid-run start their moment estimates cleanly."""

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params):
        cfg = self.cfg
        for p in params:
            if not p.value.requires_grad or p.value.grad is None:
                continue
            g = p.value.grad
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value.data)
                self.v[p.name] = np.zeros_like(p.value.data)
                self.t[p.name] = 0
            self.t[p.name] += 1
            t = self.t[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            p.value.data -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(
                p.value.data.dtype, copy=False
            )

    def state_dict(self) -> dict:
        return {
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "t": dict(self.t),
        }

    def load_state_dict(self, state: dict):
        self.m = {k: np.asarray(v, dtype=np.float32).copy() for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float32).copy() for k, v in state["v"].items()}
        self.t = {k: int(v) for k, v in state["t"].items()}


STAGE_GROUPS = {
    1: frozenset({ParamGroup.ENCODER_DECODER, ParamGroup.FABRIC, ParamGroup.HEAD}),
    2: frozenset({ParamGroup.ENCODER_DECODER, ParamGroup.FABRIC, ParamGroup.HEAD,
                  ParamGroup.WRS_FABRIC}),
    3: frozenset(set(ParamGroup)),
}


@dataclass
class StageSchedule:
    """Stage lengths and the strictly growing unfrozen-group sets."""

    stage1_epochs: int = 20
    stage2_epochs: int = 20
    max_epochs: int = 100
    patience: Optional[int] = None
    stop_at_dsc: Optional[float] = None

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("stage lengths must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def stage_for_epoch(self, epoch: int) -> int:
        if epoch <= self.stage1_epochs:
            return 1
        if epoch <= self.stage1_epochs + self.stage2_epochs:
            return 2
        return 3

    def unfrozen_groups(self, stage: int) -> frozenset:
        return STAGE_GROUPS[stage]


def round_robin_sample(bundle: DatasetBundle, step: int,
                       rng: np.random.Generator) -> tuple[int, SamplePair]:
    """Datasets enumerated by step; one uniform training example from the chosen one."""
    n = len(bundle.datasets)
    if n == 0:
        raise ValueError("bundle has no datasets")
    ds_idx = step % n
    ds = bundle.datasets[ds_idx]
    if not ds.train_idx:
        raise ValueError(f"dataset {ds.name!r} has an empty training split")
    pick = int(rng.integers(0, len(ds.train_idx)))
    return ds_idx, ds.pairs[ds.train_idx[pick]]


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    mean_loss: float
    class_dsc: list[float]          # foreground classes 1..K-1, pooled over val pairs
    dataset_dsc: list[float]        # per-dataset mean foreground DSC
    selection_dsc: float            # metric used for best-checkpoint selection


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    best_dsc: float = -1.0
    best_epoch: int = 0
    best_params: Optional[dict[str, np.ndarray]] = None
    metrics: list[EpochRecord] = field(default_factory=list)
    adam_state: Optional[dict] = None
    rng_state: Optional[dict] = None

    def metrics_csv(self, num_classes: int) -> str:
        header = ["epoch", "stage", "mean_loss"] + [
            f"dsc_class{k}" for k in range(1, num_classes)
        ]
        lines = [",".join(header)]
        for r in self.metrics:
            row = [str(r.epoch), str(r.stage), f"{r.mean_loss:.6f}"]
            row += [f"{v:.6f}" for v in r.class_dsc]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _param_norm_table(net: Network) -> str:
    lines = []
    for p in net.parameters():
        arr = p.value.data
        lines.append(f"  {p.name}: |w|_2={float(np.linalg.norm(arr)):.4g} "
                     f"max|w|={float(np.abs(arr).max()):.4g}")
    return "\n".join(lines)


def validation_scores(net: Network, bundle: DatasetBundle) -> tuple[list[float], list[float]]:
    """Pooled per-class DSC and per-dataset mean foreground DSC over val splits."""
    num_classes = bundle.num_classes
    pooled: dict[int, list[float]] = {k: [] for k in range(1, num_classes)}
    per_dataset = []
    for ds in bundle.datasets:
        ds_scores = []
        for pair in ds.val_pairs():
            x = Tensor5(pair.image[None, None].astype(np.float32))
            pred = net.forward(x, training=False).data[0].argmax(axis=0)
            for k in range(1, ds.num_classes):
                ds_scores.append(dsc(pred, pair.labels, k))
                pooled[k].append(ds_scores[-1])
        per_dataset.append(float(np.mean(ds_scores)) if ds_scores else float("nan"))
    class_dsc = [float(np.mean(pooled[k])) if pooled[k] else float("nan")
                 for k in range(1, num_classes)]
    return class_dsc, per_dataset


def train(net: Network, bundle: DatasetBundle, schedule: StageSchedule,
          adam_cfg: Optional[AdamConfig] = None, augment_spec=None,
          seed: int = 0, target_class: Optional[int] = None,
          state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[EpochRecord, Network, TrainState], None]] = None,
          ) -> TrainState:
    """Run the staged schedule; returns the state with metrics and best parameters.

    One epoch takes (sum of train-split sizes) steps, each: round-robin sample,
    optional augmentation, forward in training mode, cross-entropy, backward,
    Adam update restricted to the stage's unfrozen groups.  on_epoch may return
    True to stop training after that epoch.
    """
    from .augment import apply_random  # local import keeps module load light

    adam_cfg = adam_cfg or AdamConfig()
    adam = Adam(adam_cfg)
    state = state or TrainState()
    if state.adam_state is not None:
        adam.load_state_dict(state.adam_state)
    rng = np.random.default_rng(seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    num_classes = bundle.num_classes
    if net.config.num_classes < num_classes:
        raise ValueError(
            f"network has {net.config.num_classes} classes but bundle labels need {num_classes}"
        )
    steps_per_epoch = sum(len(ds.train_idx) for ds in bundle.datasets)
    if steps_per_epoch == 0:
        raise ValueError("bundle has no training examples")

    epochs_since_best = 0
    while state.epoch < schedule.max_epochs:
        epoch = state.epoch + 1
        stage = schedule.stage_for_epoch(epoch)
        net.set_unfrozen_groups(schedule.unfrozen_groups(stage))
        losses = []
        for _ in range(steps_per_epoch):
            ds_idx, pair = round_robin_sample(bundle, state.global_step, rng)
            if augment_spec is not None:
                pair = apply_random(pair, augment_spec, rng)
            x = Tensor5(pair.image[None, None].astype(np.float32))
            target = Tensor5(one_hot_labels(pair.labels, net.config.num_classes))
            net.zero_grads()
            with GradTape() as tape:
                prob = net.forward(x, training=True, rng=rng)
                loss = cross_entropy(prob, target)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at step {state.global_step} "
                    f"on example {pair.name or ds_idx}\nparameter norms:\n"
                    + _param_norm_table(net)
                )
            tape.backward(loss)
            adam.step(net.parameters())
            for p in net.parameters():
                if p.value.requires_grad and not np.all(np.isfinite(p.value.data)):
                    raise TrainingDiverged(
                        f"non-finite values in {p.name} after update at step "
                        f"{state.global_step}\nparameter norms:\n" + _param_norm_table(net)
                    )
            state.global_step += 1
            losses.append(loss_val)

        class_dsc, dataset_dsc = validation_scores(net, bundle)
        if target_class is not None:
            selection = class_dsc[target_class - 1]
        else:
            finite = [v for v in class_dsc if math.isfinite(v)]
            selection = float(np.mean(finite)) if finite else float("nan")
        record = EpochRecord(epoch=epoch, stage=stage,
                             mean_loss=float(np.mean(losses)),
                             class_dsc=class_dsc, dataset_dsc=dataset_dsc,
                             selection_dsc=selection)
        state.metrics.append(record)
        state.epoch = epoch
        state.adam_state = adam.state_dict()
        state.rng_state = rng.bit_generator.state

        if math.isfinite(selection) and selection > state.best_dsc:
            state.best_dsc = selection
            state.best_epoch = epoch
            state.best_params = {name: p.value.data.copy() for name, p in net.params.items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1

        if on_epoch is not None:
            if on_epoch(record, net, state):
                break

        if schedule.stop_at_dsc is not None:
            finite_ds = [v for v in dataset_dsc if math.isfinite(v)]
            if finite_ds and min(finite_ds) >= schedule.stop_at_dsc:
                break
        if schedule.patience is not None and epochs_since_best > schedule.patience:
            break
    return state


def restore_best(net: Network, state: TrainState):
    if state.best_params is None:
        raise ValueError("no best parameters recorded")
    for name, arr in state.best_params.items():
        net.params[name].value.data[...] = arr
