"""Deterministic training loop, optimizers and evaluation.

No gradient clipping is applied anywhere. Per-sample gradients are computed on
separate tapes and reduced in batch-index order.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .losses import LossReport, Targets, total_loss
from .metrics import PanopticMap, PQResult, confusion, miou_from_confusion, panoptic_inference, pq_dataset
from .model import ModelConfig, forward, forward_with_semantic_branch, init_params
from .relax import SemanticMaskGT
from .synthdata import PanopticSample
from .tensor import NonFiniteError, Tape, backward

LOG_FIELDS = ("step", "lr", "total", "mask_ce", "dice", "class_ce", "semantic", "fp_mask", "fn_mask",
              "log10_fp_fn", "val_pq", "wall_ms")


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, step: int, batch_seed: tuple[int, int], indices: Sequence[int]):
        super().__init__(message)
        self.step = step
        self.batch_seed = batch_seed
        self.indices = [int(i) for i in indices]


@dataclass
class Prepared:
    """A sample with its ground truth resampled to the model's pixel grid."""

    image: np.ndarray
    targets: Targets
    gt_map: PanopticMap
    sem_gt: SemanticMaskGT


def prepare(samples: Sequence[PanopticSample], cfg: ModelConfig) -> list[Prepared]:
    out = []
    for s in samples:
        coarse = s.downsample(cfg.patch)
        targets = Targets.from_sample(coarse)
        out.append(Prepared(s.image.astype(np.float64), targets, PanopticMap.from_sample(coarse),
                            SemanticMaskGT(targets.S)))
    return out


def lr_at(step: int, steps: int, base: float, milestones: Sequence[float], factor: float) -> float:
    """Step decay: multiply by ``factor`` once ``step`` reaches ``ceil(m * steps)`` per milestone."""
    drops = sum(step >= math.ceil(m * steps) for m in milestones)
    inv = 1.0 / factor
    if drops and inv == round(inv):
        return base / inv ** drops
    return base * factor ** drops


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = self.v.get(name)
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = p - lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


class MomentumSGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum, self.weight_decay = momentum, weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in params.items():
            b = self.buf.get(name)
            b = grads[name] if b is None else self.momentum * b + grads[name]
            self.buf[name] = b
            params[name] = p - lr * (b + self.weight_decay * p)


def make_optimizer(cfg: RunConfig):
    o = cfg.optim
    if o.name == "adamw":
        return AdamW(o.beta1, o.beta2, o.eps, o.weight_decay)
    return MomentumSGD(o.momentum, o.weight_decay)


def sample_gradients(params: dict[str, np.ndarray], sample: Prepared, cfg: RunConfig
                     ) -> tuple[LossReport, dict[str, np.ndarray]]:
    tape = Tape()
    P = {k: tape.watch(v) for k, v in params.items()}
    stages = forward(sample.image, P, cfg.model, cfg.relax, gt=sample.sem_gt, train_mode=True)
    report = total_loss(stages, sample.targets, cfg.loss, cfg.relax)
    g = backward(tape, report.total_tensor)
    return report, {k: g[t.node_id] for k, t in P.items()}


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def evaluate(params: dict[str, np.ndarray], samples: Sequence[Prepared], cfg: RunConfig,
             semantic_branch: bool = False) -> tuple[PQResult, float]:
    """Dataset PQ and mIoU; ``semantic_branch`` keeps the ReMask gate at test time."""
    pairs = []
    conf = np.zeros((cfg.model.n_c, cfg.model.n_c + 1), dtype=np.int64)
    for s in samples:
        if semantic_branch:
            final = forward_with_semantic_branch(s.image, params, cfg.model, cfg.relax)
        else:
            final = forward(s.image, params, cfg.model, cfg.relax, train_mode=False)[-1]
        pred = panoptic_inference(final, cfg.model.grid, cfg.data.n_thing_classes, use_relaxed=semantic_branch)
        pairs.append((pred, s.gt_map))
        conf += confusion(pred.class_map, s.targets.sem_labels, cfg.model.n_c)
    return pq_dataset(pairs), miou_from_confusion(conf)[0]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    rows: list[dict] = field(default_factory=list)


def train(cfg: RunConfig, train_set: Sequence[Prepared], val_set: Sequence[Prepared] = (),
          params: dict[str, np.ndarray] | None = None, log_path: str | Path | None = None,
          on_step: Callable[[int, list[LossReport]], None] | None = None) -> TrainResult:
    cfg.validate()
    params = dict(init_params(cfg.model) if params is None else params)
    opt = make_optimizer(cfg)
    tc = cfg.train
    rows: list[dict] = []
    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        writer = csv.writer(log, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for step in range(tc.steps):
            t0 = time.perf_counter()
            lr = lr_at(step, tc.steps, cfg.optim.lr, tc.milestones, tc.decay_factor)
            idx = batch_indices(cfg.seed, step, len(train_set), tc.batch_size)
            reports, acc = [], None
            try:
                for i in idx:
                    report, grads = sample_gradients(params, train_set[i], cfg)
                    reports.append(report)
                    acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
                grads = {k: g / len(idx) for k, g in acc.items()}
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                raise NumericalFailure(f"step {step}: {exc}", step, (cfg.seed, step), idx) from exc
            if on_step is not None:
                on_step(step, reports)
            opt.step(params, grads, lr)

            val_pq = None
            if val_set and tc.val_every > 0 and ((step + 1) % tc.val_every == 0 or step == tc.steps - 1):
                val_pq = evaluate(params, val_set[:tc.val_size], cfg)[0].pq
            mean = {k: float(np.mean([getattr(r, k) for r in reports]))
                    for k in ("total", "mask_ce", "dice", "class_ce", "semantic", "fp_mask", "fn_mask")}
            row = {"step": step, "lr": lr, **mean,
                   "log10_fp_fn": float(np.log10(max(mean["fp_mask"], 1e-12) / max(mean["fn_mask"], 1e-12))),
                   "val_pq": val_pq,
                   "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if tc.record_wall_ms else 0}
            rows.append(row)
            if log is not None:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
                log.flush()
    finally:
        if log is not None:
            log.close()
    return TrainResult(params, rows)
