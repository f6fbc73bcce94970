"""Occupancy scores, the four training-loss terms as evaluation functionals,
and the Look-Back protocol.

Loss functions take per-voxel class probabilities ``probs`` of shape
``(..., C)``, integer labels ``gt`` of shape ``(...)`` and a boolean ``mask``
of the same shape; only masked voxels contribute.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .gaussians import CLASS_NAMES, EMPTY_CLASS, NUM_CLASSES

VALID_CLASSES = tuple(range(1, NUM_CLASSES))
PROB_FLOOR = 1e-12


@dataclass
class ScoreReport:
    iou: float
    per_class_iou: dict  # class name -> IoU, or None when the class is absent from both grids
    miou: float
    voxel_count: int

    def to_dict(self) -> dict:
        return {"iou": self.iou, "miou": self.miou, "per_class": dict(self.per_class_iou), "voxels": self.voxel_count}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(d["iou"], dict(d["per_class"]), d["miou"], d["voxels"])


@dataclass
class LossConfig:
    lambda1: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.lambda1, self.focal_alpha, self.focal_gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def _labels(x) -> np.ndarray:
    return x.labels if hasattr(x, "labels") else np.asarray(x)


def score(pred, gt, mask=None) -> ScoreReport:
    """IoU (occupied vs empty) and per-class one-vs-rest IoU over masked voxels.

    ``pred`` and ``gt`` are :class:`VoxelGrid` objects or label arrays.  mIoU
    averages the valid classes present in either grid under the mask; with
    nothing to compare (no occupancy, no class) the score is 1.0.
    """
    p = _labels(pred)
    g = _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"geometry mismatch: {p.shape} vs {g.shape}")
    if hasattr(pred, "geometry") and hasattr(gt, "geometry") and not pred.geometry.matches(gt.geometry):
        raise ValueError("geometry mismatch between prediction and ground truth")
    mask = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != p.shape:
        raise ValueError(f"mask shape {mask.shape} does not match grid {p.shape}")
    p = p[mask].astype(np.int64)
    g = g[mask].astype(np.int64)

    conf = np.bincount(g * NUM_CLASSES + p, minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES, NUM_CLASSES)
    occ_tp = conf[1:, 1:].sum()
    occ_union = occ_tp + conf[0, 1:].sum() + conf[1:, 0].sum()
    iou = float(occ_tp / occ_union) if occ_union else 1.0

    per_class = {}
    values = []
    for c in VALID_CLASSES:
        tp = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - tp
        if union == 0:
            per_class[CLASS_NAMES[c]] = None
            continue
        v = float(tp / union)
        per_class[CLASS_NAMES[c]] = v
        values.append(v)
    miou = float(np.mean(values)) if values else 1.0
    return ScoreReport(iou, per_class, miou, int(mask.sum()))


def _flatten(probs, gt, mask):
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[-1]
    probs = probs.reshape(-1, c)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    mask = np.ones(len(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if len(probs) != len(gt) or len(mask) != len(gt):
        raise ValueError("probs, gt and mask must cover the same voxels")
    return probs, gt, mask


def focal_loss(probs, gt, mask=None, alpha: float = 0.25, gamma: float = 2.0):
    """Mean of ``-alpha (1 - p_y)^gamma log p_y`` over masked voxels.

    Returns ``(loss, grad)`` with ``grad`` the derivative with respect to the
    logits that produced ``probs`` through a softmax (zero on unmasked voxels),
    shaped like ``probs``.
    """
    shape = np.shape(probs)
    p, y, m = _flatten(probs, gt, mask)
    n = int(m.sum())
    grad = np.zeros_like(p)
    if n == 0:
        return 0.0, grad.reshape(shape)
    rows = np.flatnonzero(m)
    py = p[rows, y[rows]]
    py_safe = np.maximum(py, PROB_FLOOR)
    one_minus = 1.0 - py
    loss = float(np.sum(-alpha * one_minus**gamma * np.log(py_safe)) / n)
    # d/dp_y of -alpha (1-p)^g log p
    dldp = -alpha * one_minus**gamma / py_safe
    if gamma > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            first = alpha * gamma * one_minus ** (gamma - 1.0) * np.log(py_safe)
        dldp = dldp + np.where(one_minus > 0, first, 0.0)
    # through the softmax: dp_y/dz_j = p_y (delta_jy - p_j)
    local = -(dldp * py)[:, None] * p[rows]
    local[np.arange(len(rows)), y[rows]] += dldp * py
    grad[rows] = local / n
    return loss, grad.reshape(shape)


def lovasz_grad(sorted_fg: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss at a sorted order."""
    gts = sorted_fg.sum()
    intersection = gts - np.cumsum(sorted_fg)
    union = gts + np.cumsum(1.0 - sorted_fg)
    jaccard = 1.0 - intersection / union
    if len(sorted_fg) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, gt, mask=None) -> float:
    """Multi-class Lovász-softmax averaged over classes present in ``gt``."""
    p, y, m = _flatten(probs, gt, mask)
    p, y = p[m], y[m]
    losses = []
    for c in range(p.shape[1]):
        fg = (y == c).astype(np.float64)
        if fg.sum() == 0:
            continue
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        losses.append(float(np.dot(errors[order], lovasz_grad(fg[order]))))
    return float(np.mean(losses)) if losses else 0.0


def _scal_terms(prob_c: np.ndarray, target: np.ndarray) -> list:
    terms = []
    nominator = np.sum(prob_c * target)
    if prob_c.sum() > 0:
        terms.append(nominator / prob_c.sum())
    if target.sum() > 0:
        terms.append(nominator / target.sum())
    negatives = 1.0 - target
    if negatives.sum() > 0:
        terms.append(np.sum((1.0 - prob_c) * negatives) / negatives.sum())
    return [-math.log(max(t, PROB_FLOOR)) for t in terms]


def scal_loss(probs, gt, mask=None, mode: str = "sem") -> float:
    """Scene-class affinity loss: soft precision, recall and specificity per class.

    ``mode="geo"`` scores the single occupied-vs-empty class; ``mode="sem"``
    scores each valid (non-empty) class present in ``gt``.
    """
    p, y, m = _flatten(probs, gt, mask)
    p, y = p[m], y[m]
    if mode == "geo":
        classes = [(1.0 - p[:, EMPTY_CLASS], (y != EMPTY_CLASS).astype(np.float64))]
    elif mode == "sem":
        classes = [(p[:, c], (y == c).astype(np.float64)) for c in range(p.shape[1]) if c != EMPTY_CLASS]
    else:
        raise ValueError(f"unknown scal mode {mode!r}")
    per_class = [sum(_scal_terms(pc, t)) for pc, t in classes if t.sum() > 0]
    return float(np.mean(per_class)) if per_class else 0.0


def total_loss(probs, gt, mask=None, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    focal, _ = focal_loss(probs, gt, mask, cfg.focal_alpha, cfg.focal_gamma)
    return (
        cfg.lambda1 * focal
        + lovasz_softmax(probs, gt, mask)
        + scal_loss(probs, gt, mask, "geo")
        + scal_loss(probs, gt, mask, "sem")
    )


def lookback_frames(k: int) -> tuple:
    """Frame lists ``([0..k), [0..k, 0..k))`` of the Look-Back protocol."""
    first = list(range(k))
    return first, first + first


@dataclass
class LookBackResult:
    k: int
    first_frames: list
    lookback_frames: list
    first_time: ScoreReport
    look_back: ScoreReport
    mask_voxels: int = field(default=0)


def lookback_eval(pipeline_runner, scene, k: int, masks=None) -> LookBackResult:
    """Compare processing frames ``[0..k)`` once against twice, on fresh memories.

    ``pipeline_runner(scene, frames)`` returns the final global grid; both
    passes are scored against the ground truth under the union of the first
    ``k`` frames' visibility masks.
    """
    from .dataset import frame_masks, splice_masks

    if k > len(scene.frames):
        raise ValueError(f"k={k} exceeds the {len(scene.frames)} available frames")
    first, again = lookback_frames(k)
    masks = masks if masks is not None else frame_masks(scene)
    union_first = splice_masks([masks[i] for i in first])
    union_again = splice_masks([masks[i] for i in again])
    if not np.array_equal(union_first, union_again):
        raise AssertionError("Look-Back mask union differs from first pass")
    first_grid = pipeline_runner(scene, first)
    again_grid = pipeline_runner(scene, again)
    return LookBackResult(
        k,
        first,
        again,
        score(first_grid, scene.grid, union_first),
        score(again_grid, scene.grid, union_first),
        int(union_first.sum()),
    )
