"""Training-time relaxations: semantic masking of mask logits and soft class targets.

Both operators only exist on the training path. ``remask_apply`` keeps an
identity term, so dropping the semantic gate at inference leaves the panoptic
logits untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import ArrayLike, Tensor, as_tensor, matmul, mul, add, sigmoid, softmax, stop_gradient, take

ACTIVATIONS = ("sigmoid", "softmax")


@dataclass
class RelaxConfig:
    eta: float = 0.1
    remask_stage_count: int = 4
    stop_grad_semantic: bool = True
    # also block the class path of the semantic gate (off by default)
    stop_grad_class: bool = False
    activation: str = "sigmoid"
    gt_remask_mode: bool = False
    # masks used for ReClass overlaps: "relaxed" (m_hat_pan when gated) or "raw" (m_pan)
    reclass_source: str = "relaxed"

    def validate(self, stages: int | None = None) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.remask_stage_count < 0:
            raise ValueError("remask_stage_count must be >= 0")
        if stages is not None and self.remask_stage_count > stages:
            raise ValueError(f"remask_stage_count {self.remask_stage_count} exceeds {stages} stages")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.reclass_source not in ("relaxed", "raw"):
            raise ValueError("reclass_source must be 'relaxed' or 'raw'")


@dataclass
class SemanticMaskGT:
    """Binary per-pixel class indicators, shape (HW, N_C)."""

    S: np.ndarray

    def __post_init__(self) -> None:
        S = np.asarray(self.S)
        if S.ndim != 2 or not np.isin(S, (0, 1)).all():
            raise ValueError("S must be a binary (HW, N_C) matrix")
        self.S = S.astype(np.float64)

    @property
    def counts(self) -> np.ndarray:
        return self.S.sum(axis=0)

    @classmethod
    def from_labels(cls, labels: np.ndarray, n_classes: int, void: int = 255) -> SemanticMaskGT:
        flat = np.asarray(labels).reshape(-1)
        S = np.zeros((flat.size, n_classes))
        valid = flat != void
        S[np.flatnonzero(valid), flat[valid]] = 1.0
        return cls(S)


@dataclass
class StageOutput:
    m_pan: Tensor                 # (HW, N_Q) mask logits
    p: Tensor                     # (N_Q, N_C + 1) class logits, last slot = no-object
    m_sem: Optional[Tensor]       # (HW, N_C) semantic logits; None at inference
    m_hat_pan: Tensor             # (HW, N_Q) relaxed logits (== m_pan when not gated)
    skip_sem_loss: bool = False
    relaxed: bool = False

    @property
    def n_classes(self) -> int:
        return self.p.shape[1] - 1


def _activate(x: Tensor, activation: str) -> Tensor:
    return sigmoid(x) if activation == "sigmoid" else softmax(x, axis=1)


def _class_gate(p: Tensor, n_classes: int, activation: str) -> Tensor:
    """Normalised class scores restricted to the ``n_classes`` real classes."""
    if p.shape[1] == n_classes:
        return _activate(p, activation)
    if p.shape[1] != n_classes + 1:
        raise ValueError(f"class logits have {p.shape[1]} columns, expected {n_classes} or {n_classes + 1}")
    if activation == "sigmoid":
        return sigmoid(take(p, np.arange(n_classes), axis=1))
    return take(softmax(p, axis=1), np.arange(n_classes), axis=1)


def remask_map(m_sem: ArrayLike, p: ArrayLike, activation: str = "sigmoid",
               stop_grad_semantic: bool = True, stop_grad_class: bool = False) -> Tensor:
    """Project semantic logits into query space: ``act(m_sem) @ act(p).T``.

    ``p`` may carry a trailing no-object column; it is normalised with the
    rest and then dropped. Entries lie in ``[0, N_C]``.
    """
    m_sem, p = as_tensor(m_sem), as_tensor(p)
    if m_sem.ndim != 2 or p.ndim != 2:
        raise ValueError("remask_map expects matrices")
    sem = _activate(m_sem, activation)
    if stop_grad_semantic:
        sem = stop_gradient(sem)
    cls = _class_gate(p, m_sem.shape[1], activation)
    if stop_grad_class:
        cls = stop_gradient(cls)
    return matmul(sem, cls.T)


def remask_apply(m_pan: ArrayLike, m_hat_sem: ArrayLike) -> Tensor:
    """``m_pan + m_hat_sem * m_pan``; exactly ``m_pan`` where the gate is zero."""
    m_pan, m_hat_sem = as_tensor(m_pan), as_tensor(m_hat_sem)
    if m_pan.shape != m_hat_sem.shape:
        raise ValueError(f"shape mismatch {m_pan.shape} vs {m_hat_sem.shape}")
    return add(m_pan, mul(m_hat_sem, m_pan))


def remask(stage: StageOutput, cfg: RelaxConfig, gt: SemanticMaskGT | None = None,
           stage_index: int = 0) -> StageOutput:
    """Fill ``m_hat_pan`` for one decoder stage.

    Stages at or beyond ``cfg.remask_stage_count`` pass through unchanged. In
    ground-truth mode the binary ``S`` replaces the activated semantic
    prediction and the stage is flagged to skip its semantic loss.
    """
    if stage_index >= cfg.remask_stage_count:
        return replace(stage, m_hat_pan=stage.m_pan, relaxed=False)
    n_classes = stage.n_classes
    if cfg.gt_remask_mode:
        if gt is None:
            raise ValueError("gt_remask_mode requires ground-truth semantic masks")
        sem = Tensor(gt.S)
        skip = True
    else:
        if stage.m_sem is None:
            raise ValueError("ReMask needs semantic logits (training mode)")
        sem = _activate(stage.m_sem, cfg.activation)
        if cfg.stop_grad_semantic:
            sem = stop_gradient(sem)
        skip = stage.skip_sem_loss
    cls = _class_gate(stage.p, n_classes, cfg.activation)
    if cfg.stop_grad_class:
        cls = stop_gradient(cls)
    m_hat_sem = matmul(sem, cls.T)
    return replace(stage, m_hat_pan=remask_apply(stage.m_pan, m_hat_sem), skip_sem_loss=skip, relaxed=True)


def reclass_weights(m_pan: ArrayLike, S: ArrayLike | SemanticMaskGT) -> Tensor:
    """Overlap of each query's soft mask with each class, normalised by class area.

    Classes without ground-truth pixels get weight 0.
    """
    m_pan = as_tensor(m_pan)
    S = S.S if isinstance(S, SemanticMaskGT) else np.asarray(S, dtype=np.float64)
    if S.shape[0] != m_pan.shape[0]:
        raise ValueError("m_pan and S must share the pixel axis")
    counts = S.sum(axis=0)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return mul(matmul(sigmoid(m_pan).T, Tensor(S)), Tensor(inv))


def reclass_apply(y: ArrayLike, y_m: ArrayLike, eta: float) -> Tensor:
    """Soft target ``eta * y_m + (1 - eta * y_m) * y``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    y_m = np.asarray(y_m.data if isinstance(y_m, Tensor) else y_m, dtype=np.float64)
    if y.shape != y_m.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_m.shape}")
    scaled = eta * y_m
    return Tensor(scaled + (1.0 - scaled) * y)
