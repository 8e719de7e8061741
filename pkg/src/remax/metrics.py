"""Panoptic post-processing and the PQ / mIoU metrics.

PQ per category is ``sum IoU(TP) / (|TP| + |FP|/2 + |FN|/2)`` where a
prediction and a ground-truth segment of the same category match when their
IoU exceeds 0.5 (which makes matches unique). Ground-truth void pixels are
removed from the union, and unmatched predictions lying mostly in void are
not counted as false positives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .relax import StageOutput
from .synthdata import VOID, PanopticSample
from .tensor import _sigmoid_np

VOID_ID = -1


@dataclass
class SegmentInfo:
    class_id: int
    is_thing: bool
    area: int


@dataclass
class PanopticMap:
    """Per-pixel segment ids (``-1`` = void) plus a segment table."""

    segment_map: np.ndarray
    segments: dict[int, SegmentInfo]

    @property
    def class_map(self) -> np.ndarray:
        out = np.full(self.segment_map.shape, VOID_ID, dtype=np.int64)
        for sid, info in self.segments.items():
            out[self.segment_map == sid] = info.class_id
        return out

    def validate(self) -> None:
        ids = set(np.unique(self.segment_map).tolist()) - {VOID_ID}
        if ids != set(self.segments):
            raise ValueError("segment table does not match the map")
        seen_stuff = set()
        for sid, info in self.segments.items():
            if int((self.segment_map == sid).sum()) != info.area:
                raise ValueError(f"segment {sid} area mismatch")
            if not info.is_thing:
                if info.class_id in seen_stuff:
                    raise ValueError(f"stuff class {info.class_id} has several segments")
                seen_stuff.add(info.class_id)

    @classmethod
    def from_sample(cls, sample: PanopticSample) -> PanopticMap:
        seg_map = sample.segment_map.astype(np.int64)
        segments = {k: SegmentInfo(s.class_id, s.is_thing, int(s.mask.sum()))
                    for k, s in enumerate(sample.segments)}
        return cls(seg_map, segments)


@dataclass
class CategoryStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    is_thing: bool = False

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    per_category: dict[int, CategoryStats]
    things: dict[str, float] = field(default_factory=dict)
    stuff: dict[str, float] = field(default_factory=dict)

    @property
    def tp(self) -> int:
        return sum(c.tp for c in self.per_category.values())

    @property
    def fp(self) -> int:
        return sum(c.fp for c in self.per_category.values())

    @property
    def fn(self) -> int:
        return sum(c.fn for c in self.per_category.values())


def _average(stats: Iterable[CategoryStats]) -> dict[str, float]:
    stats = [s for s in stats if s.tp + s.fp + s.fn > 0]
    if not stats:
        return {"pq": 0.0, "sq": 0.0, "rq": 0.0, "n": 0}
    return {"pq": float(np.mean([s.pq for s in stats])), "sq": float(np.mean([s.sq for s in stats])),
            "rq": float(np.mean([s.rq for s in stats])), "n": len(stats)}


def accumulate_pq(pred: PanopticMap, gt: PanopticMap,
                  table: dict[int, CategoryStats] | None = None) -> dict[int, CategoryStats]:
    """Add one image's TP/FP/FN/IoU counts to ``table``."""
    if pred.segment_map.shape != gt.segment_map.shape:
        raise ValueError("prediction and ground truth differ in size")
    table = {} if table is None else table
    gt_ids = sorted(gt.segments)
    pred_ids = sorted(pred.segments)
    g_index = np.full(gt.segment_map.size, len(gt_ids), dtype=np.int64)
    p_index = np.full(pred.segment_map.size, len(pred_ids), dtype=np.int64)
    g_flat, p_flat = gt.segment_map.reshape(-1), pred.segment_map.reshape(-1)
    for k, sid in enumerate(gt_ids):
        g_index[g_flat == sid] = k
    for k, sid in enumerate(pred_ids):
        p_index[p_flat == sid] = k
    counts = kernels.pair_counts(g_index, p_index, len(gt_ids) + 1, len(pred_ids) + 1)
    g_area = counts.sum(axis=1)
    p_area = counts.sum(axis=0)
    void_row = counts[len(gt_ids)]

    gt_matched, pred_matched = set(), set()
    for gi, gsid in enumerate(gt_ids):
        ginfo = gt.segments[gsid]
        for pi, psid in enumerate(pred_ids):
            pinfo = pred.segments[psid]
            inter = counts[gi, pi]
            if inter == 0 or pinfo.class_id != ginfo.class_id:
                continue
            union = g_area[gi] + p_area[pi] - inter - void_row[pi]
            iou = inter / union
            if iou > 0.5:
                st = table.setdefault(ginfo.class_id, CategoryStats(is_thing=ginfo.is_thing))
                st.tp += 1
                st.iou_sum += float(iou)
                gt_matched.add(gi)
                pred_matched.add(pi)
    for gi, gsid in enumerate(gt_ids):
        if gi not in gt_matched:
            info = gt.segments[gsid]
            table.setdefault(info.class_id, CategoryStats(is_thing=info.is_thing)).fn += 1
    for pi, psid in enumerate(pred_ids):
        if pi in pred_matched:
            continue
        if void_row[pi] / p_area[pi] > 0.5:
            continue
        info = pred.segments[psid]
        table.setdefault(info.class_id, CategoryStats(is_thing=info.is_thing)).fp += 1
    return table


def summarize(table: dict[int, CategoryStats]) -> PQResult:
    overall = _average(table.values())
    return PQResult(overall["pq"], overall["sq"], overall["rq"], dict(sorted(table.items())),
                    _average(s for s in table.values() if s.is_thing),
                    _average(s for s in table.values() if not s.is_thing))


def pq(pred: PanopticMap, gt: PanopticMap) -> PQResult:
    return summarize(accumulate_pq(pred, gt))


def pq_dataset(pairs: Iterable[tuple[PanopticMap, PanopticMap]]) -> PQResult:
    """PQ with counts pooled over all images before averaging over categories."""
    table: dict[int, CategoryStats] = {}
    for pred, gt in pairs:
        accumulate_pq(pred, gt, table)
    return summarize(table)


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: int = VOID) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("maps differ in size")
    keep = gt != ignore
    pred = np.where((pred < 0) | (pred >= n_classes), n_classes, pred)
    return kernels.pair_counts(gt[keep], pred[keep], n_classes, n_classes + 1)


def miou_from_confusion(conf: np.ndarray) -> tuple[float, dict[int, float]]:
    n_classes = conf.shape[0]
    per_class = {}
    for c in range(n_classes):
        gt_c = conf[c].sum()
        if gt_c == 0:
            continue
        inter = conf[c, c]
        union = gt_c + conf[:, c].sum() - inter
        per_class[c] = float(inter / union)
    return (float(np.mean(list(per_class.values()))) if per_class else 0.0), per_class


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: int = VOID) -> tuple[float, dict[int, float]]:
    """Mean IoU over classes present in ``gt``; negative predictions count as void."""
    return miou_from_confusion(confusion(pred, gt, n_classes, ignore))


# inference ---------------------------------------------------------------------

@dataclass
class InferenceThresholds:
    t_cls: float = 0.3
    t_px: int = 4
    t_void: float = 0.2


def panoptic_inference(final: StageOutput, grid: tuple[int, int], n_thing_classes: int,
                       thresholds: InferenceThresholds | None = None,
                       use_relaxed: bool = False) -> PanopticMap:
    """Turn final-stage logits into a non-overlapping panoptic map.

    Queries whose best real class is below ``t_cls`` or whose overall argmax
    is no-object are dropped. Each pixel goes to the kept query maximising
    ``confidence * sigmoid(mask)``; the pixel is void if that query's mask
    probability is below ``t_void``. Segments smaller than ``t_px`` are
    dropped and their pixels re-assigned among the survivors. Stuff segments
    of one class are merged.
    """
    th = thresholds or InferenceThresholds()
    logits = (final.m_hat_pan if use_relaxed else final.m_pan).data
    p = final.p.data
    n_c = p.shape[1] - 1
    z = np.exp(p - p.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    cls = np.argmax(probs[:, :n_c], axis=1)
    conf = probs[np.arange(p.shape[0]), cls]
    keep = (conf >= th.t_cls) & (np.argmax(probs, axis=1) != n_c)
    mask_prob = _sigmoid_np(logits)
    scores = np.ascontiguousarray(conf[None, :] * mask_prob)

    while True:
        winner = kernels.masked_argmax(scores, keep)
        has = winner >= 0
        ok = np.zeros_like(has)
        ok[has] = mask_prob[np.flatnonzero(has), winner[has]] >= th.t_void
        winner = np.where(ok, winner, -1)
        sizes = np.bincount(winner[winner >= 0], minlength=keep.size)
        small = keep & (sizes > 0) & (sizes < th.t_px)
        if not small.any():
            break
        keep = keep & ~small

    seg_map = np.full(winner.shape, VOID_ID, dtype=np.int64)
    segments: dict[int, SegmentInfo] = {}
    stuff_ids: dict[int, int] = {}
    for q in np.flatnonzero(sizes):
        c = int(cls[q])
        is_thing = c < n_thing_classes
        if not is_thing and c in stuff_ids:
            sid = stuff_ids[c]
        else:
            sid = len(segments)
            segments[sid] = SegmentInfo(c, is_thing, 0)
            if not is_thing:
                stuff_ids[c] = sid
        seg_map[winner == q] = sid
        segments[sid].area += int(sizes[q])
    return PanopticMap(seg_map.reshape(grid), segments)


# reports -----------------------------------------------------------------------

PQ_CSV_FIELDS = ("category_id", "tp", "fp", "fn", "iou_sum", "pq", "sq", "rq")


def write_pq_csv(path: str | Path, result: PQResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PQ_CSV_FIELDS)
        for cid, st in result.per_category.items():
            w.writerow([cid, st.tp, st.fp, st.fn, repr(st.iou_sum), repr(st.pq), repr(st.sq), repr(st.rq)])
