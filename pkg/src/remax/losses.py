"""Set-prediction training losses with a false-positive / false-negative split.

Per stage the loss is ``w_mask_ce * mask_ce + w_dice * dice + w_class * class_ce
+ w_sem * semantic``. Matching happens once on the final stage (detached) and
the assignment is reused for every stage unless ``per_stage_matching`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .matching import Assignment, hungarian
from .relax import RelaxConfig, StageOutput, reclass_apply, reclass_weights
from .synthdata import VOID, GroundTruthSegment, PanopticSample
from .tensor import (ArrayLike, Tensor, add, as_tensor, exp, log_sigmoid, log_softmax, mul,
                     reduce, scale, sigmoid, softmax, stop_gradient, take)


@dataclass
class LossConfig:
    w_mask_ce: float = 1.0
    w_dice: float = 1.0
    w_class: float = 1.0
    w_sem: float = 0.5
    activation: str = "sigmoid"
    no_object_weight: float = 0.1
    per_stage_matching: bool = False

    def validate(self) -> None:
        for name in ("w_mask_ce", "w_dice", "w_class", "w_sem", "no_object_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name} must be >= 0")
        if self.activation not in ("sigmoid", "softmax"):
            raise ValueError("loss.activation must be 'sigmoid' or 'softmax'")


@dataclass
class Targets:
    """Ground truth on the model's pixel grid."""

    masks: np.ndarray       # (HW, K) float 0/1, one column per segment
    classes: np.ndarray     # (K,)
    is_thing: np.ndarray    # (K,) bool
    sem_labels: np.ndarray  # (HW,) class id or VOID
    S: np.ndarray           # (HW, N_C) binary

    @property
    def n_classes(self) -> int:
        return self.S.shape[1]

    @classmethod
    def from_segments(cls, segments: Sequence[GroundTruthSegment], n_classes: int,
                      sem_labels: np.ndarray | None = None) -> Targets:
        if not segments:
            raise ValueError("need at least one ground-truth segment")
        masks = np.stack([np.asarray(s.mask, dtype=np.float64).reshape(-1) for s in segments], axis=1)
        if (masks.sum(axis=0) == 0).any():
            raise ValueError("ground-truth segments must be non-empty")
        classes = np.array([s.class_id for s in segments], dtype=np.int64)
        if sem_labels is None:
            sem_labels = np.full(masks.shape[0], VOID, dtype=np.int64)
            for k, c in enumerate(classes):
                sem_labels[masks[:, k] > 0] = c
        sem_labels = np.asarray(sem_labels, dtype=np.int64).reshape(-1)
        S = np.zeros((masks.shape[0], n_classes))
        valid = sem_labels != VOID
        S[np.flatnonzero(valid), sem_labels[valid]] = 1.0
        return cls(masks, classes, np.array([s.is_thing for s in segments]), sem_labels, S)

    @classmethod
    def from_sample(cls, sample: PanopticSample) -> Targets:
        return cls.from_segments(sample.segments, sample.n_classes, sample.label_map.reshape(-1))


class MaskLoss(NamedTuple):
    ce: float
    dice: float
    fp: float
    fn: float


# mask terms -------------------------------------------------------------------------

def mask_terms(logits: Tensor, gt: np.ndarray, queries: np.ndarray, activation: str = "sigmoid") -> dict:
    """Mask losses for matched columns ``queries`` of ``logits`` against ``gt`` (HW, K).

    Sigmoid mode averages per-pair pixel means over the K pairs. Softmax mode
    is the Mask-ID cross-entropy: each pixel of a matched segment is a
    ``N_Q``-way classification, normalised by ``HW``; its loss counts as
    ``fn`` where the right query already wins the pixel and ``fp`` where a
    different query claims it.

    Returns tensors ``ce``, ``fp``, ``fn``, ``dice_loss`` and numpy per-pair
    ``fp_pairs``/``fn_pairs`` (sigmoid mode) for diagnostics.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt[:, None]
    if (gt.sum(axis=0) == 0).any():
        raise ValueError("empty ground-truth mask")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("ground-truth masks must be binary")
    hw, k = gt.shape
    queries = np.asarray(queries, dtype=np.int64)
    G = Tensor(gt)
    if activation == "sigmoid":
        x = take(logits, queries, axis=1)
        nlp = scale(log_sigmoid(x), -1.0)          # -log p
        nlq = scale(log_sigmoid(scale(x, -1.0)), -1.0)  # -log (1 - p)
        pos = mul(nlp, G)
        neg = mul(nlq, Tensor(1.0 - gt))
        norm = 1.0 / (hw * k)
        fn = scale(reduce("sum", pos), norm)
        fp = scale(reduce("sum", neg), norm)
        per_pixel = add(mul(G, nlp), mul(Tensor(1.0 - gt), nlq))
        ce = reduce("mean", per_pixel)
        prob = sigmoid(x)
        fp_pairs = neg.data.sum(axis=0) / hw
        fn_pairs = pos.data.sum(axis=0) / hw
    elif activation == "softmax":
        logp_all = log_softmax(logits, axis=1)
        logp = take(logp_all, queries, axis=1)
        winner = np.argmax(logits.data, axis=1)
        correct = (winner[:, None] == queries[None, :]).astype(np.float64)
        w_fn = gt * correct
        w_fp = gt * (1.0 - correct)
        fn = scale(reduce("sum", mul(logp, Tensor(w_fn))), -1.0 / hw)
        fp = scale(reduce("sum", mul(logp, Tensor(w_fp))), -1.0 / hw)
        ce = scale(reduce("sum", mul(logp, G)), -1.0 / hw)
        prob = exp(logp)
        fp_pairs = -(logp.data * w_fp).sum(axis=0) / hw
        fn_pairs = -(logp.data * w_fn).sum(axis=0) / hw
    else:
        raise ValueError(f"unknown activation {activation!r}")

    inter = reduce("sum", mul(prob, G), axis=0)
    denom = add(reduce("sum", prob, axis=0), Tensor(gt.sum(axis=0)))
    dice = scale(inter / denom, 2.0)
    dice_loss = reduce("mean", scale(add(dice, -1.0), -1.0))
    return {"ce": ce, "fp": fp, "fn": fn, "dice_loss": dice_loss, "dice": dice,
            "fp_pairs": fp_pairs, "fn_pairs": fn_pairs}


def mask_loss(logits: ArrayLike, gt_mask: np.ndarray, activation: str = "sigmoid",
              query: int | None = None) -> MaskLoss:
    """Scalar mask losses for one prediction/ground-truth pair.

    In sigmoid mode ``logits`` is the matched column (HW,). Softmax mode needs
    the full (HW, N_Q) logit matrix and the matched ``query``.
    """
    logits = as_tensor(logits)
    if activation == "sigmoid":
        logits = logits.reshape(-1, 1) if logits.ndim == 1 else logits
        query = 0 if query is None else query
    elif query is None:
        raise ValueError("softmax mode needs the matched query index")
    t = mask_terms(logits, np.asarray(gt_mask).reshape(-1), np.array([query]), activation)
    return MaskLoss(t["ce"].item(), float(t["dice"].data[0]), t["fp"].item(), t["fn"].item())


# class / semantic terms -----------------------------------------------------------

def class_terms(p: Tensor, targets: np.ndarray, row_weights: np.ndarray) -> Tensor:
    """``sum_q w_q * (-sum_c targets[q, c] * log softmax(p)[q, c]) / N_Q``."""
    logp = log_softmax(p, axis=1)
    weighted = np.asarray(targets, dtype=np.float64) * np.asarray(row_weights, dtype=np.float64)[:, None]
    return scale(reduce("sum", mul(logp, Tensor(weighted))), -1.0 / p.shape[0])


def class_loss(p_row: ArrayLike, target_row: ArrayLike) -> float:
    """Soft-target cross-entropy for one query; targets need not sum to one."""
    p = as_tensor(p_row).reshape(1, -1)
    y = np.asarray(target_row, dtype=np.float64).reshape(1, -1)
    if ((y < 0) | (y > 1)).any():
        raise ValueError("targets must lie in [0, 1]")
    return class_terms(p, y, np.ones(1)).item()


def semantic_loss(m_sem: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel softmax cross-entropy; VOID pixels are ignored."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_c = m_sem.shape[1]
    valid = labels != VOID
    if ((labels[valid] < 0) | (labels[valid] >= n_c)).any():
        raise ValueError("semantic label out of range")
    if labels.shape[0] != m_sem.shape[0]:
        raise ValueError("label count does not match pixel count")
    onehot = np.zeros(m_sem.shape)
    onehot[np.flatnonzero(valid), labels[valid]] = 1.0
    n_valid = max(int(valid.sum()), 1)
    return scale(reduce("sum", mul(log_softmax(m_sem, axis=1), Tensor(onehot))), -1.0 / n_valid)


# matching ------------------------------------------------------------------------

def _mask_probs(logits: np.ndarray, activation: str) -> np.ndarray:
    if activation == "softmax":
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    return sigmoid(logits).data


def matching_cost(stage: StageOutput, targets: Targets, cfg: LossConfig | None = None) -> np.ndarray:
    """``cost[q, g] = -P(class_g | q) + 1 - Dice(mask_q, mask_g)`` on detached values."""
    cfg = cfg or LossConfig()
    cls_prob = softmax(stage.p.detach(), axis=1).data
    prob = _mask_probs(stage.m_hat_pan.data, cfg.activation)
    G = targets.masks
    dice = 2.0 * (prob.T @ G) / (prob.sum(axis=0)[:, None] + G.sum(axis=0)[None, :])
    return -cls_prob[:, targets.classes] + (1.0 - dice)


# total ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    pq_style_mask: float
    mask_ce: float
    dice: float
    class_ce: float
    semantic: float
    fp_mask: float
    fn_mask: float
    per_stage: list[dict] = field(default_factory=list)
    weighted: dict = field(default_factory=dict)
    total_tensor: Tensor | None = None
    assignment: Assignment | None = None
    fp_pairs: np.ndarray | None = None  # final stage, per matched pair
    fn_pairs: np.ndarray | None = None

    @property
    def log10_fp_fn(self) -> float:
        return float(np.log10(max(self.fp_mask, 1e-12) / max(self.fn_mask, 1e-12)))


def class_targets(stage: StageOutput, targets: Targets, assignment: Assignment, eta: float,
                  reclass_source: str = "relaxed", no_object_weight: float = 0.1):
    """Soft class targets (N_Q, N_C + 1) and per-row weights.

    Matched rows get ReClass targets built from the stage's masks; unmatched
    rows get the hard no-object label at ``no_object_weight``.
    """
    n_q, n_slots = stage.p.shape
    n_c = n_slots - 1
    y = np.zeros((n_q, n_slots))
    y[:, n_c] = 1.0
    weights = np.full(n_q, no_object_weight)
    q, g = assignment.queries, assignment.gts
    y[q, n_c] = 0.0
    y[q, targets.classes[g]] = 1.0
    weights[q] = 1.0
    if eta > 0 and len(q):
        src = stage.m_hat_pan if (reclass_source == "relaxed" and stage.relaxed) else stage.m_pan
        y_m = reclass_weights(stop_gradient(src), targets.S).data
        y[q, :n_c] = reclass_apply(y[q, :n_c], y_m[q], eta).data
    return y, weights


def total_loss(stages: Sequence[StageOutput], targets: Targets, cfg: LossConfig | None = None,
               relax: RelaxConfig | None = None, assignment: Assignment | None = None) -> LossReport:
    """Deep-supervised loss over all stages.

    Passing ``assignment`` pins the matching (used by gradient checks, where
    the discrete decision must stay fixed).
    """
    if not stages:
        raise ValueError("need at least one stage")
    cfg = cfg or LossConfig()
    relax = relax or RelaxConfig()
    final = stages[-1]
    if assignment is None:
        assignment = hungarian(matching_cost(final, targets, cfg))
    y_hat, row_w = class_targets(final, targets, assignment, relax.eta, relax.reclass_source,
                                 cfg.no_object_weight)

    total = None
    sums = dict.fromkeys(("mask_ce", "dice", "class_ce", "semantic", "fp_mask", "fn_mask"), 0.0)
    per_stage = []
    last_terms = None
    for s, stage in enumerate(stages):
        a = assignment
        if cfg.per_stage_matching and s != len(stages) - 1:
            a = hungarian(matching_cost(stage, targets, cfg))
        terms = mask_terms(stage.m_hat_pan, targets.masks[:, a.gts], a.queries, cfg.activation)
        cls = class_terms(stage.p, y_hat, row_w)
        parts = [scale(terms["ce"], cfg.w_mask_ce), scale(terms["dice_loss"], cfg.w_dice),
                 scale(cls, cfg.w_class)]
        sem_val = 0.0
        if stage.m_sem is not None and not stage.skip_sem_loss:
            sem = semantic_loss(stage.m_sem, targets.sem_labels)
            parts.append(scale(sem, cfg.w_sem))
            sem_val = sem.item()
        stage_total = parts[0]
        for part in parts[1:]:
            stage_total = add(stage_total, part)
        total = stage_total if total is None else add(total, stage_total)
        row = {"mask_ce": terms["ce"].item(), "dice": terms["dice_loss"].item(), "class_ce": cls.item(),
               "semantic": sem_val, "fp_mask": terms["fp"].item(), "fn_mask": terms["fn"].item(),
               "total": stage_total.item()}
        per_stage.append(row)
        for key in sums:
            sums[key] += row[key]
        last_terms = terms

    weighted = {"mask_ce": cfg.w_mask_ce * sums["mask_ce"], "dice": cfg.w_dice * sums["dice"],
                "class_ce": cfg.w_class * sums["class_ce"], "semantic": cfg.w_sem * sums["semantic"]}
    return LossReport(total=total.item(), pq_style_mask=sums["mask_ce"] + sums["dice"],
                      per_stage=per_stage, weighted=weighted, total_tensor=total,
                      assignment=assignment, fp_pairs=last_terms["fp_pairs"],
                      fn_pairs=last_terms["fn_pairs"], **sums)
