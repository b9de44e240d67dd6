"""Optimizer, learning-rate schedule, staged training loop and augmentation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import EpochOutOfRange, InvalidConfig, ShapeMismatch
from .metrics import compute_metrics
from .nets import NetworkSpec, build_network
from .search import SupernetConv, manual_shift_config, total_confidence_loss
from .sparse import SparseTensor, concat_batches, voxelize
from .synthetic import Scene

ROLES = ("pretrain", "binary-train", "supernet-search")
FULL_MAX_EPOCHS = 128
FULL_LR_STEPS = (60, 100)


@dataclass
class StageConfig:
    precision: str = "real"
    role: str = "pretrain"
    max_epochs: int = FULL_MAX_EPOCHS
    lr0: float = 1e-3
    lr_steps: tuple = FULL_LR_STEPS
    lr_factor: float = 0.1
    weight_decay: float = 0.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    confidence_weight: float = 0.0
    # step size of the architecture parameters during supernet search
    arch_lr: float = 0.1

    def __post_init__(self):
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if self.precision not in ("real", "binary"):
            raise InvalidConfig(f"unknown precision {self.precision!r}")
        if self.role not in ROLES:
            raise InvalidConfig(f"unknown role {self.role!r}")
        if self.optimizer != "adam":
            raise InvalidConfig("only the adam optimizer is supported")
        if self.max_epochs < 1 or self.lr0 <= 0 or self.arch_lr <= 0:
            raise InvalidConfig("max_epochs, lr0 and arch_lr must be positive")
        if self.confidence_weight < 0:
            raise InvalidConfig("confidence_weight must be non-negative")
        steps = self.lr_steps
        if any(b <= a for a, b in zip(steps, steps[1:])) or any(s < 0 or s >= self.max_epochs for s in steps):
            raise InvalidConfig(f"lr_steps {list(steps)} must increase strictly and stay below {self.max_epochs}")


@dataclass
class TrainConfig:
    stages: list
    seed: int = 0
    batch_size: int = 4

    def __post_init__(self):
        if not self.stages:
            raise InvalidConfig("at least one stage is required")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be positive")


def lr_at(epoch: int, stage: StageConfig) -> float:
    if not 0 <= epoch < stage.max_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {stage.max_epochs})")
    return stage.lr0 * stage.lr_factor ** sum(1 for s in stage.lr_steps if s <= epoch)


def scaled_schedule(max_epochs: int, epoch_scale: float = 1.0) -> tuple[int, tuple]:
    """Epoch budget and LR steps keeping the 60/128 and 100/128 step positions."""
    total = max(1, int(round(max_epochs * epoch_scale)))
    steps = []
    for s in FULL_LR_STEPS:
        e = int(round(s * total / FULL_MAX_EPOCHS))
        if 0 < e < total and (not steps or e > steps[-1]):
            steps.append(e)
    return total, tuple(steps)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def adam_step(params, grads, states, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> list:
    """One bias-corrected Adam update; ``states`` are updated in place."""
    out = []
    for p, g, s in zip(params, grads, states, strict=True):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        if weight_decay:
            g = g + weight_decay * p
        if s.m is None:
            s.m, s.v = np.zeros_like(p), np.zeros_like(p)
        s.t += 1
        s.m = beta1 * s.m + (1 - beta1) * g
        s.v = beta2 * s.v + (1 - beta2) * g * g
        m_hat = s.m / (1 - beta1**s.t)
        v_hat = s.v / (1 - beta2**s.t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class Adam:
    """Adam over :class:`Parameter` objects; frozen or gradient-free ones are skipped."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.hyper = dict(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        self.state = {id(p): AdamState() for p in self.params}

    def step(self, lr: float, params=None):
        chosen = [p for p in (self.params if params is None else params) if not p.frozen and p.grad is not None]
        if not chosen:
            return
        new = adam_step(
            [p.value for p in chosen], [p.grad for p in chosen], [self.state[id(p)] for p in chosen], lr, **self.hyper
        )
        for p, v in zip(chosen, new):
            p.value = v


def cross_entropy_loss(logits, labels, ignore_label: int = -100):
    return ad.cross_entropy(logits, labels, ignore_label)


# -- augmentation ------------------------------------------------------------


@dataclass
class AffineConfig:
    rotation: float = math.pi  # max |angle| about the z (gravity) axis
    scale: tuple = (0.9, 1.1)
    translation: float = 0.5  # max |offset| per axis, metres

    @classmethod
    def identity(cls) -> "AffineConfig":
        return cls(0.0, (1.0, 1.0), 0.0)


@dataclass
class AffineTransform:
    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.offset

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.offset)

    @classmethod
    def sample(cls, rng, config: AffineConfig) -> "AffineTransform":
        theta = rng.uniform(-config.rotation, config.rotation)
        s = rng.uniform(*config.scale)
        c, si = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -si, 0.0], [si, c, 0.0], [0.0, 0.0, 1.0]])
        t = rng.uniform(-config.translation, config.translation, size=3)
        return cls(s * rot, t)


def random_affine(points, rng, config: AffineConfig | None = None) -> np.ndarray:
    """Randomly rotated, scaled and translated copy of ``points``."""
    return AffineTransform.sample(rng, config or AffineConfig()).apply(points)


# -- data --------------------------------------------------------------------


class Sample(NamedTuple):
    tensor: SparseTensor
    labels: np.ndarray  # one label per site


def scene_sample(scene: Scene, resolution: float, rng=None, augment: AffineConfig | None = None) -> Sample:
    points = scene.points
    if augment is not None:
        points = random_affine(points, rng, augment)
    vox = voxelize(points, resolution, labels=scene.labels)
    return Sample(vox.tensor, vox.labels)


class Dataset:
    """Scenes or ready samples; scenes are voxelized once unless augmented."""

    def __init__(self, items, resolution: float = 0.05, augment: AffineConfig | None = None):
        self.items = list(items)
        self.resolution = resolution
        self.augment = augment
        self._cache: dict = {}

    def __len__(self):
        return len(self.items)

    def get(self, i: int, rng=None) -> Sample:
        item = self.items[i]
        if isinstance(item, Sample):
            return item
        if not isinstance(item, Scene):
            item = Sample(*item) if isinstance(item[0], SparseTensor) else Scene(*item)
            if isinstance(item, Sample):
                return item
        if self.augment is not None:
            return scene_sample(item, self.resolution, rng, self.augment)
        if i not in self._cache:
            self._cache[i] = scene_sample(item, self.resolution)
        return self._cache[i]


def as_dataset(data, resolution: float = 0.05) -> Dataset:
    return data if isinstance(data, Dataset) else Dataset(data, resolution)


def split_dataset(items, val_fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Seeded train/validation split; at least one validation item when possible."""
    items = list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    n_val = int(round(val_fraction * len(items)))
    if val_fraction > 0 and len(items) > 1:
        n_val = max(1, n_val)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [items[i] for i in train], [items[i] for i in val]


def make_batch(samples) -> Sample:
    return Sample(concat_batches([s.tensor for s in samples]), np.concatenate([s.labels for s in samples]))


def evaluate(net, data, num_classes: int | None = None, ignore_label: int = -100):
    """Site-level metrics of ``net`` at its current precision."""
    data = as_dataset(data)
    num_classes = num_classes or net.spec.num_classes
    preds, labels = [], []
    for i in range(len(data)):
        s = data.get(i)
        preds.append(np.argmax(net.predict(s.tensor), axis=1))
        labels.append(s.labels)
    return compute_metrics(np.concatenate(preds), np.concatenate(labels), num_classes, ignore_label)


def dataset_loss(net, data, batch_size: int = 4, ignore_label: int = -100) -> float:
    """Mean training-mode loss over fixed-order batches, without any update.

    Batch norm uses batch statistics as during training; running statistics
    are restored afterwards.
    """
    data = as_dataset(data)
    saved = [(mod, attr, getattr(mod, attr).copy()) for _, mod, attr in net.named_buffers()]
    prev = net.training
    net.train()
    losses = []
    try:
        for start in range(0, len(data), batch_size):
            batch = make_batch([data.get(i) for i in range(start, min(start + batch_size, len(data)))])
            losses.append(float(ad.value(cross_entropy_loss(net(batch.tensor), batch.labels, ignore_label))))
    finally:
        for mod, attr, val in saved:
            setattr(mod, attr, val)
        net.train(prev)
    return float(np.mean(losses))


# -- training loop -----------------------------------------------------------


def arch_parameters(net) -> list:
    return [m.alpha for _, m in net.named_modules() if isinstance(m, SupernetConv)]


def run_stage(
    net,
    data,
    stage: StageConfig,
    seed: int = 0,
    val_data=None,
    history: list | None = None,
    batch_size: int = 4,
    stage_name: str | None = None,
    ignore_label: int = -100,
    log=None,
):
    """Minibatch Adam over whole scenes; returns ``(net, history)``.

    Binary stages keep training the latent weights left by the previous stage.
    In the ``supernet-search`` role, odd minibatches (1-based, counted over the
    whole stage) update weights with ``alpha`` frozen and even ones update
    ``alpha`` with weights frozen, adding ``confidence_weight`` times the
    summed confidence loss.
    """
    data = as_dataset(data)
    val = None if val_data is None else as_dataset(val_data, data.resolution)
    history = [] if history is None else history
    stage_name = stage_name or stage.role
    rng = np.random.default_rng(seed)
    net.set_binary(stage.precision == "binary")
    net.train()

    arch = arch_parameters(net)
    arch_ids = {id(p) for p in arch}
    weights = [p for p in net.parameters() if id(p) not in arch_ids]
    opt = Adam(net.parameters(), stage.beta1, stage.beta2, stage.eps, stage.weight_decay)
    searching = stage.role == "supernet-search" and bool(arch)
    saved_frozen = {id(p): p.frozen for p in net.parameters()}
    step = 0
    try:
        for epoch in range(stage.max_epochs):
            lr = lr_at(epoch, stage)
            order = rng.permutation(len(data))
            losses = []
            for start in range(0, len(order), batch_size):
                step += 1
                arch_step = searching and step % 2 == 0
                for p in weights:
                    p.frozen = saved_frozen[id(p)] or arch_step
                for p in arch:
                    p.frozen = saved_frozen[id(p)] or not arch_step
                batch = make_batch([data.get(int(i), rng) for i in order[start : start + batch_size]])
                net.zero_grad()
                with ad.Tape() as tape:
                    task = cross_entropy_loss(net(batch.tensor), batch.labels, ignore_label)
                    total = task
                    if arch_step and stage.confidence_weight > 0:
                        total = task + stage.confidence_weight * total_confidence_loss(net)
                    tape.backward(total)
                tape.release()
                if arch_step:
                    opt.step(stage.arch_lr, arch)
                else:
                    opt.step(lr, weights)
                losses.append(float(ad.value(task)))
            miou = evaluate(net, val, ignore_label=ignore_label).miou if val is not None and len(val) else float("nan")
            row = dict(epoch=epoch, stage=stage_name, lr=lr, train_loss=float(np.mean(losses)), val_miou=miou)
            history.append(row)
            if log is not None:
                log(f"[{stage_name}] epoch {epoch} lr {lr:g} loss {row['train_loss']:.4f} val_miou {miou:.4f}")
    finally:
        for p in net.parameters():
            p.frozen = saved_frozen[id(p)]
        net.zero_grad()
    net.eval()
    return net, history


HISTORY_FIELDS = ("epoch", "stage", "lr", "train_loss", "val_miou")


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], row["stage"], repr(float(row["lr"])), repr(float(row["train_loss"])), repr(float(row["val_miou"]))])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        dict(epoch=int(r["epoch"]), stage=r["stage"], lr=float(r["lr"]), train_loss=float(r["train_loss"]), val_miou=float(r["val_miou"]))
        for r in rows
    ]


# -- pipelines ---------------------------------------------------------------

PIPELINES = ("baseline", "manual", "search")


def default_confidence_weight(family: str) -> float:
    return 0.1 if family == "fcn" else 0.01


def default_manual_preset(family: str) -> str:
    return "nyu" if family == "fcn" else "scannet"


def pipeline_stages(
    pipeline: str,
    family: str = "unet",
    max_epochs: int = FULL_MAX_EPOCHS,
    epoch_scale: float = 1.0,
    confidence_weight: float | None = None,
    arch_lr: float = 0.1,
) -> list:
    """Stage list of a training pipeline with the default learning rates."""
    if pipeline not in PIPELINES:
        raise InvalidConfig(f"unknown pipeline {pipeline!r}")
    epochs, steps = scaled_schedule(max_epochs, epoch_scale)
    common = dict(max_epochs=epochs, lr_steps=steps)
    if pipeline in ("baseline", "manual"):
        return [
            StageConfig("real", "pretrain", lr0=1e-3, **common),
            StageConfig("binary", "binary-train", lr0=2e-4, **common),
        ]
    lam = default_confidence_weight(family) if confidence_weight is None else confidence_weight
    return [
        StageConfig("binary", "supernet-search", lr0=1e-3, confidence_weight=lam, arch_lr=arch_lr, **common),
        StageConfig("real", "pretrain", lr0=1e-3, **common),
        StageConfig("binary", "binary-train", lr0=2e-4, **common),
    ]


@dataclass
class PipelineResult:
    net: object
    history: list = field(default_factory=list)
    shift_config: object = None
    supernet: object = None


def train_pipeline(
    pipeline: str,
    spec: NetworkSpec,
    train_data,
    val_data=None,
    stages: list | None = None,
    seed: int = 0,
    batch_size: int = 4,
    manual_preset: str | None = None,
    log=None,
) -> PipelineResult:
    """Run the baseline (2 stages), manual (2 stages) or search (3 stages) pipeline."""
    stages = stages or pipeline_stages(pipeline, spec.family)
    expected = 3 if pipeline == "search" else 2
    if len(stages) != expected:
        raise InvalidConfig(f"the {pipeline} pipeline has {expected} stages, got {len(stages)}")
    history: list = []
    base = replace(spec, search_mode=False, shift_config=None, binary=False)

    def run(net, i):
        return run_stage(
            net, train_data, stages[i], seed + i, val_data, history, batch_size, f"{i + 1}-{stages[i].role}", log=log
        )[0]

    if pipeline == "baseline":
        net = build_network(base)
        for i in range(2):
            net = run(net, i)
        return PipelineResult(net, history)
    if pipeline == "manual":
        preset = manual_preset or default_manual_preset(spec.family)
        config = manual_shift_config(preset, spec.groups, spec.num_searchable())
        net = build_network(replace(base, shift_config=config))
        for i in range(2):
            net = run(net, i)
        return PipelineResult(net, history, config)
    supernet = build_network(replace(base, search_mode=True))
    supernet = run(supernet, 0)
    net, config = supernet.derived_copy()
    for i in (1, 2):
        net = run(net, i)
    return PipelineResult(net, history, config, supernet)
