import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from remax.relax import (
    RelaxConfig, SemanticMaskGT, StageOutput, reclass_apply, reclass_weights, remask, remask_apply, remask_map,
)
from remax.tensor import Tape, Tensor, backward, reduce, fd_check, mul

logits = st.floats(-40.0, 40.0, allow_nan=False)


def stage(m_pan, p, m_sem):
    m_pan = Tensor(m_pan)
    return StageOutput(m_pan=m_pan, p=Tensor(p), m_sem=None if m_sem is None else Tensor(m_sem), m_hat_pan=m_pan)


# remask_map -------------------------------------------------------------------------

def test_remask_map_examples():
    assert remask_map(np.full((5, 2), -40.0), np.zeros((3, 2))).data.max() <= 1e-15
    assert remask_map([[0.0]], [[0.0]]).item() == 0.25
    out = remask_map(np.full((1, 3), 800.0), np.full((1, 3), 800.0)).item()
    assert out == pytest.approx(3.0, abs=1e-12) and out <= 3.0


def test_remask_map_drops_no_object_column():
    m_sem = np.random.default_rng(0).normal(size=(4, 3))
    p = np.random.default_rng(1).normal(size=(2, 4))
    np.testing.assert_array_equal(remask_map(m_sem, p).data, remask_map(m_sem, p[:, :3]).data)


def test_remask_map_shape_error():
    with pytest.raises(Exception):
        remask_map(np.zeros((4, 3)), np.zeros((2, 5)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_remask_map_range(seed):
    rng = np.random.default_rng(seed)
    n_c = int(rng.integers(1, 7))
    m_sem = rng.uniform(-40, 40, (int(rng.integers(1, 20)), n_c))
    p = rng.uniform(-40, 40, (int(rng.integers(1, 6)), n_c + 1))
    for act in ("sigmoid", "softmax"):
        m = remask_map(m_sem, p, activation=act).data
        assert m.min() >= 0.0 and m.max() <= n_c


# remask_apply ------------------------------------------------------------------------

def test_remask_apply_examples():
    assert remask_apply([[2.0]], [[0.5]]).item() == 3.0
    assert remask_apply([[-2.0]], [[1.0]]).item() == -4.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=logits))
def test_remask_apply_zero_gate_is_identity(m):
    assert remask_apply(m, np.zeros_like(m)).data.tobytes() == np.asarray(m, dtype=np.float64).tobytes()


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 40), st.floats(0, 6), st.floats(0, 6))
def test_remask_apply_monotone_for_nonnegative_logits(m, a, b):
    lo, hi = sorted((a, b))
    assert remask_apply([[m]], [[lo]]).item() <= remask_apply([[m]], [[hi]]).item()


def test_remask_apply_shape_error():
    with pytest.raises(ValueError):
        remask_apply(np.zeros((2, 3)), np.zeros((3, 2)))


# remask on a stage -----------------------------------------------------------------

def test_remask_stage_beyond_count_passes_through():
    rng = np.random.default_rng(0)
    s = stage(rng.normal(size=(4, 2)), rng.normal(size=(2, 3)), rng.normal(size=(4, 2)))
    out = remask(s, RelaxConfig(remask_stage_count=1), stage_index=1)
    assert out.m_hat_pan is out.m_pan and not out.relaxed


def test_remask_gt_mode_doubles_logits():
    m_pan = np.random.default_rng(0).normal(size=(4, 2))
    s = stage(m_pan, np.full((2, 2), 800.0), None)  # sigmoid(p) == 1 for the single real class
    gt = SemanticMaskGT(np.ones((4, 1)))
    out = remask(s, RelaxConfig(gt_remask_mode=True), gt)
    np.testing.assert_allclose(out.m_hat_pan.data, 2.0 * m_pan, rtol=1e-15)
    assert out.skip_sem_loss


def test_remask_gt_mode_requires_gt():
    s = stage(np.zeros((4, 2)), np.zeros((2, 2)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        remask(s, RelaxConfig(gt_remask_mode=True))


@pytest.mark.parametrize("stop", [True, False])
def test_remask_stop_gradient_blocks_semantic_logits(stop):
    rng = np.random.default_rng(4)
    tape = Tape()
    m_sem = tape.watch(rng.normal(size=(6, 3)))
    p = tape.watch(rng.normal(size=(2, 4)))
    m_pan = tape.watch(rng.normal(size=(6, 2)))
    s = StageOutput(m_pan=m_pan, p=p, m_sem=m_sem, m_hat_pan=m_pan)
    out = remask(s, RelaxConfig(stop_grad_semantic=stop))
    g = backward(tape, reduce("sum", mul(out.m_hat_pan, out.m_hat_pan)))
    assert (g[m_sem.node_id] == 0.0).all() == stop
    assert np.abs(g[p.node_id]).max() > 0 and np.abs(g[m_pan.node_id]).max() > 0


def test_remask_gradient_fd():
    rng = np.random.default_rng(5)
    m_sem, p = rng.normal(size=(6, 3)), rng.normal(size=(2, 4))

    def f(m_pan):
        s = StageOutput(m_pan=m_pan, p=Tensor(p), m_sem=Tensor(m_sem), m_hat_pan=m_pan)
        return reduce("sum", remask(s, RelaxConfig()).m_hat_pan)

    assert fd_check(f, rng.normal(size=(6, 2)), eps=1e-5) <= 1e-6


# reclass --------------------------------------------------------------------------

def test_reclass_weights_examples():
    m_pan = np.array([[40.0], [40.0], [-40.0], [-40.0]])
    S = np.array([[1, 0, 0], [1, 0, 0], [1, 1, 0], [1, 0, 0]])
    y_m = reclass_weights(m_pan, S).data
    assert y_m[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert y_m[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert y_m[0, 2] == 0.0  # absent class


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_reclass_weights_range(seed):
    rng = np.random.default_rng(seed)
    hw, n_q, n_c = (int(v) for v in rng.integers(1, 12, 3))
    y_m = reclass_weights(rng.uniform(-40, 40, (hw, n_q)), rng.integers(0, 2, (hw, n_c))).data
    assert y_m.min() >= 0.0 and y_m.max() <= 1.0


def test_reclass_apply_examples():
    np.testing.assert_allclose(reclass_apply([[1.0, 0.0]], [[0.5, 0.5]], 0.1).data, [[1.0, 0.05]], rtol=1e-15)
    assert reclass_apply([[0.0, 0.0]], [[0.0, 1.0]], 0.1).data[0, 1] == pytest.approx(0.1, abs=1e-16)
    y = np.eye(3)
    assert reclass_apply(y, np.random.default_rng(0).random((3, 3)), 0.0).data.tobytes() == y.tobytes()
    with pytest.raises(ValueError):
        reclass_apply(y, y, 1.5)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 3))
def test_reclass_keeps_gt_class_at_one(y_m, eta, c):
    y = np.zeros((1, 4))
    y[0, c] = 1.0
    ym = np.full((1, 4), y_m)
    out = reclass_apply(y, ym, eta).data
    assert out[0, c] == 1.0
    others = np.delete(out[0], c)
    assert (others == eta * y_m).all()
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_relax_config_validation():
    with pytest.raises(ValueError):
        RelaxConfig(eta=-0.1).validate()
    with pytest.raises(ValueError):
        RelaxConfig(remask_stage_count=5).validate(stages=4)
    with pytest.raises(ValueError):
        RelaxConfig(activation="tanh").validate()


def test_semantic_gt_counts():
    gt = SemanticMaskGT.from_labels(np.array([0, 1, 1, 255]), 3)
    np.testing.assert_array_equal(gt.counts, [1, 2, 0])
    with pytest.raises(ValueError):
        SemanticMaskGT(np.array([[0.5]]))
