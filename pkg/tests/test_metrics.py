import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remax.metrics import (
    VOID_ID, InferenceThresholds, PanopticMap, SegmentInfo, miou, panoptic_inference, pq, pq_dataset,
    write_pq_csv,
)
from remax.relax import StageOutput
from remax.tensor import Tensor


def pmap(seg_map, classes, n_thing=2):
    seg_map = np.asarray(seg_map)
    segs = {}
    for sid in np.unique(seg_map):
        if sid == VOID_ID:
            continue
        c = classes[int(sid)]
        segs[int(sid)] = SegmentInfo(c, c < n_thing, int((seg_map == sid).sum()))
    return PanopticMap(seg_map, segs)


def brute_pq(pred, gt):
    """Every (gt, pred) pair by direct pixel loops; then per-category averaging."""
    h, w = gt.segment_map.shape
    stats = {}

    def cat(c, thing):
        return stats.setdefault(c, {"tp": 0, "fp": 0, "fn": 0, "iou": 0.0})

    matched_p, matched_g = set(), set()
    for gs, gi in gt.segments.items():
        for ps, pi in pred.segments.items():
            inter = union = 0
            for y in range(h):
                for x in range(w):
                    g_in = gt.segment_map[y, x] == gs
                    p_in = pred.segment_map[y, x] == ps
                    void = gt.segment_map[y, x] == VOID_ID
                    inter += g_in and p_in
                    union += g_in or (p_in and not void)
            if gi.class_id == pi.class_id and union and inter / union > 0.5:
                s = cat(gi.class_id, gi.is_thing)
                s["tp"] += 1
                s["iou"] += inter / union
                matched_p.add(ps)
                matched_g.add(gs)
    for gs, gi in gt.segments.items():
        if gs not in matched_g:
            cat(gi.class_id, gi.is_thing)["fn"] += 1
    for ps, pi in pred.segments.items():
        if ps in matched_p:
            continue
        in_void = sum(1 for y in range(h) for x in range(w)
                      if pred.segment_map[y, x] == ps and gt.segment_map[y, x] == VOID_ID)
        if in_void / pi.area > 0.5:
            continue
        cat(pi.class_id, pi.is_thing)["fp"] += 1
    vals = [s["iou"] / (s["tp"] + 0.5 * s["fp"] + 0.5 * s["fn"]) for s in stats.values()]
    return float(np.mean(vals)) if vals else 0.0


def random_map(rng, h=8, w=8, n_seg=5, n_classes=3, void_frac=0.1):
    seg = rng.integers(0, n_seg, (h, w))
    seg[rng.random((h, w)) < void_frac] = VOID_ID
    # stuff classes (>= 2) keep one segment per class
    classes = {}
    used_stuff = set()
    for sid in range(n_seg):
        c = int(rng.integers(n_classes))
        if c >= 2 and c in used_stuff:
            c = 0
        used_stuff.add(c)
        classes[sid] = c
    return pmap(seg, classes)


def coarse_random_map(rng, n_classes=3):
    """Blocky maps so that IoU > 0.5 matches actually occur."""
    base = rng.integers(0, 4, (4, 4))
    seg = np.kron(base, np.ones((2, 2), int))
    flip = rng.random((8, 8)) < 0.15
    seg[flip] = rng.integers(0, 4, flip.sum())
    seg[rng.random((8, 8)) < 0.08] = VOID_ID
    classes = {sid: [0, 1, 2, 0][sid] for sid in range(4)}
    return pmap(seg, classes)


def test_pq_matches_brute_force():
    rng = np.random.default_rng(0)
    for i in range(100):
        gen = coarse_random_map if i % 2 else random_map
        gt, pred = gen(rng), gen(rng)
        assert pq(pred, gt).pq == pytest.approx(brute_pq(pred, gt), abs=1e-12)


def test_hand_case():
    gt = np.full((8, 8), VOID_ID)
    gt[0:2, :] = 0      # segment A, 16 px
    gt[4, :] = 1        # segment B, 8 px
    pred = np.full((8, 8), VOID_ID)
    pred[0:2, :6] = 0   # 12 px inside A: IoU 0.75
    pred[4, :3] = 1     # 3 px of B: IoU 3/8, unmatched
    r = pq(pmap(pred, {0: 0, 1: 0}), pmap(gt, {0: 0, 1: 0}))
    c = r.per_category[0]
    assert (c.tp, c.fp, c.fn) == (1, 1, 1)
    assert r.pq == 0.375


def test_perfect_and_wrong_class():
    rng = np.random.default_rng(1)
    gt = random_map(rng, void_frac=0.0)
    r = pq(gt, gt)
    assert r.pq == r.sq == r.rq == 1.0
    one = np.zeros((8, 8), int)
    r = pq(pmap(one, {0: 1}), pmap(one, {0: 0}))
    assert r.pq == 0.0 and r.fp == 1 and r.fn == 1


def test_pq_equals_sq_times_rq_per_category():
    rng = np.random.default_rng(2)
    for _ in range(30):
        r = pq(coarse_random_map(rng), coarse_random_map(rng))
        for c in r.per_category.values():
            if c.tp:
                assert c.pq == pytest.approx(c.sq * c.rq, rel=1e-14)
            assert 0.0 <= c.pq <= 1.0


def test_prediction_mostly_in_void_not_counted():
    gt = np.full((4, 4), VOID_ID)
    gt[0, :] = 0
    pred = np.full((4, 4), VOID_ID)
    pred[0, :] = 0
    pred[2:, :] = 1
    r = pq(pmap(pred, {0: 0, 1: 1}), pmap(gt, {0: 0}))
    assert r.fp == 0 and r.pq == 1.0


def test_dataset_pq_pools_counts():
    rng = np.random.default_rng(3)
    pairs = [(coarse_random_map(rng), coarse_random_map(rng)) for _ in range(5)]
    pooled = pq_dataset(pairs)
    total_tp = sum(pq(p, g).tp for p, g in pairs)
    assert pooled.tp == total_tp


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        pq(pmap(np.zeros((2, 2), int), {0: 0}), pmap(np.zeros((3, 3), int), {0: 0}))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_match_uniqueness(seed):
    rng = np.random.default_rng(seed)
    gt, pred = coarse_random_map(rng), coarse_random_map(rng)
    for gs in gt.segments:
        g = gt.segment_map == gs
        void = gt.segment_map == VOID_ID
        n = 0
        for ps in pred.segments:
            p = pred.segment_map == ps
            union = (g | (p & ~void)).sum()
            n += (g & p).sum() / union > 0.5
        assert n <= 1


# mIoU ----------------------------------------------------------------------------

def test_miou_examples():
    a = np.array([[0, 1], [1, 0]])
    assert miou(a, a, 2)[0] == 1.0
    assert miou(1 - a, a, 2)[0] == 0.0
    gt = np.zeros((8, 8), int)
    gt[:, 4:] = 1
    pred = np.ones((8, 8), int)
    pred[:, 2:6] = 0
    m, per = miou(pred, gt, 2)
    assert per[0] == pytest.approx(1 / 3, abs=1e-15) and per[1] == pytest.approx(1 / 3, abs=1e-15)


# inference ---------------------------------------------------------------------

def stage_from_probs(mask_logits, class_probs):
    p = np.log(np.asarray(class_probs, float) + 1e-300)
    m = Tensor(np.asarray(mask_logits, float))
    return StageOutput(m_pan=m, p=Tensor(np.maximum(p, -700)), m_sem=None, m_hat_pan=m)


def test_inference_single_query_covers_everything():
    masks = np.column_stack([np.full(16, 40.0), np.full(16, -40.0)])
    out = panoptic_inference(stage_from_probs(masks, [[0.95, 0.0, 0.05], [0.0, 0.0, 1.0]]), (4, 4), 1)
    assert len(out.segments) == 1 and (out.segment_map == 0).all()
    out.validate()


def test_inference_two_disjoint_queries():
    left = np.tile([40.0, 40.0, -40.0, -40.0], 4)
    masks = np.column_stack([left, -left])
    out = panoptic_inference(stage_from_probs(masks, [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]]), (4, 4), 2)
    assert len(out.segments) == 2
    assert (out.segment_map != VOID_ID).all()
    out.validate()


def test_inference_overlap_goes_to_more_confident_query():
    masks = np.full((16, 2), 40.0)
    out = panoptic_inference(stage_from_probs(masks, [[0.6, 0.0, 0.4], [0.0, 0.9, 0.1]]), (4, 4), 2)
    assert set(np.unique(out.class_map)) == {1}


def test_inference_drops_small_and_low_confidence():
    masks = np.full((16, 3), -40.0)
    masks[:14, 0] = 40.0
    masks[14:, 1] = 40.0       # 2-pixel segment, below t_px
    masks[:, 2] = 40.0         # low confidence query
    probs = [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05], [0.25, 0.2, 0.55]]
    out = panoptic_inference(stage_from_probs(masks, probs), (4, 4), 2, InferenceThresholds(t_px=4))
    assert len(out.segments) == 1
    out.validate()


def test_inference_merges_stuff_of_one_class():
    top = np.repeat([40.0, -40.0], 8)
    masks = np.column_stack([top, -top])
    out = panoptic_inference(stage_from_probs(masks, [[0.0, 0.9, 0.1], [0.0, 0.9, 0.1]]), (4, 4), 1)
    assert len(out.segments) == 1 and not out.segments[0].is_thing
    out.validate()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_inference_partition_invariants(seed):
    rng = np.random.default_rng(seed)
    st_ = StageOutput(m_pan=Tensor(rng.normal(0, 3, (16, 5))), p=Tensor(rng.normal(0, 2, (5, 4))), m_sem=None,
                      m_hat_pan=None)
    st_.m_hat_pan = st_.m_pan
    out = panoptic_inference(st_, (4, 4), 2)
    out.validate()
    for info in out.segments.values():
        assert info.area >= 4


def test_pq_csv(tmp_path):
    rng = np.random.default_rng(5)
    r = pq(coarse_random_map(rng), coarse_random_map(rng))
    path = tmp_path / "pq.csv"
    write_pq_csv(path, r)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["category_id", "tp", "fp", "fn", "iou_sum", "pq", "sq", "rq"]
    assert len(rows) == 1 + len(r.per_category)
