"""Segmentation metrics, sign correspondence and OPs/storage accounting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .binarize import sign
from .conv import sfsc_forward
from .errors import LayerNotFound, LengthMismatch
from .module import cost_trace


@dataclass
class Metrics:
    miou: float
    macc: float
    acc: float
    per_class_iou: list

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_iou"] = [None if v is None or math.isnan(v) else v for v in self.per_class_iou]
        return json.dumps(d)


def confusion_matrix(pred, true, num_classes: int, ignore_label: int = -100) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions for {len(true)} labels")
    keep = true != ignore_label
    idx = true[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def compute_metrics(pred, true, num_classes: int, ignore_label: int = -100) -> Metrics:
    """IoU / accuracy from the confusion matrix (rows: truth, cols: prediction).

    Classes absent from both prediction and truth are left out of the mIoU
    mean (their IoU is reported as NaN); mAcc averages over classes present in
    the truth.
    """
    cm = confusion_matrix(pred, true, num_classes, ignore_label).astype(np.float64)
    tp = np.diag(cm)
    gt = cm.sum(axis=1)
    union = gt + cm.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        cls_acc = np.where(gt > 0, tp / gt, np.nan)
    total = cm.sum()
    if total == 0:
        return Metrics(0.0, 0.0, 0.0, iou.tolist())
    return Metrics(
        float(np.nanmean(iou)),
        float(np.nanmean(cls_acc)),
        float(tp.sum() / total),
        iou.tolist(),
    )


# -- sign correspondence ----------------------------------------------------


def _module(net, layer_id):
    mods = dict(net.named_modules())
    if layer_id not in mods:
        raise LayerNotFound(layer_id)
    return mods[layer_id]


def capture_layer(net, x, layer_id: str, inputs: bool = False):
    """Output (or input) features of ``layer_id`` during an inference forward."""
    mod = _module(net, layer_id)
    if not hasattr(mod, "capture"):
        raise LayerNotFound(f"{layer_id} is not a convolution layer")
    mod.capture = True
    try:
        net.predict(x)
    finally:
        mod.capture = False
    if inputs:
        x = mod.last_input
        out = x.replace_features(np.array(ad.value(x.features)))
    else:
        out = mod.last_output
    mod.last_input = mod.last_output = None
    return out


def agreement(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise LengthMismatch("activation shapes differ")
    return float(np.mean(sign(a) == sign(b)))


def sign_correspondence(real_net, binary_net, input, layer_id: str | None = None) -> float:
    """Fraction of entries of one layer's pre-activation output whose signs agree.

    Each network runs in its own current precision mode; ``layer_id`` defaults
    to the first binary layer of ``binary_net``.
    """
    if layer_id is None:
        layer_id = binary_net.first_binary_layer()
    a = capture_layer(real_net, input, layer_id)
    b = capture_layer(binary_net, input, layer_id)
    return agreement(a, b)


def layer_sign_correspondence(layer_input, weight, directions, kernel_size: int = 3) -> float:
    """Sign agreement of one shifted layer evaluated in real and binary mode."""
    real = ad.value(sfsc_forward(layer_input, weight, directions, False, kernel_size).features)
    binary = ad.value(sfsc_forward(layer_input, weight, directions, True, kernel_size).features)
    return agreement(real, binary)


# -- cost accounting ---------------------------------------------------------


@dataclass
class CostReport:
    bops: float
    flops: float
    ops: float
    params_real: int
    params_binary: int
    storage_m: float
    sites: int = 0

    @classmethod
    def from_counts(cls, bops, flops, params_real, params_binary, sites=0) -> "CostReport":
        bops, flops = float(bops), float(flops)
        return cls(
            bops,
            flops,
            bops / 64 + flops,
            int(params_real),
            int(params_binary),
            (params_real + params_binary / 32) / 1e6,
            int(sites),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def parameter_census(net) -> tuple[int, int]:
    """``(real, binary)`` parameter counts; binary only for binarized weights."""
    real = binary = 0
    for _, mod in net.named_modules():
        for attr, val in vars(mod).items():
            if not isinstance(val, Parameter):
                continue
            if net.binary and mod.binarizable and attr == "weight":
                binary += val.value.size
            else:
                real += val.value.size
    return real, binary


def count_cost(net, sample) -> CostReport:
    """Data-dependent BOPs/FLOPs of one inference pass plus storage."""
    with cost_trace() as log:
        net.predict(sample)
    bops = sum(ops for _, _, ops, binary in log if binary)
    flops = sum(ops for _, _, ops, binary in log if not binary)
    real, binary = parameter_census(net)
    return CostReport.from_counts(bops, flops, real, binary, sample.num_sites)


def cost_breakdown(net, sample) -> list:
    with cost_trace() as log:
        net.predict(sample)
    return list(log)


__all__ = [
    "Metrics",
    "CostReport",
    "compute_metrics",
    "confusion_matrix",
    "sign_correspondence",
    "layer_sign_correspondence",
    "count_cost",
    "parameter_census",
]
