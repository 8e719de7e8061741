import math

import numpy as np
import pytest

from remax.config import RunConfig, load_config
from remax.losses import Targets, class_targets
from remax.matching import hungarian
from remax.losses import matching_cost
from remax.model import forward, init_params, is_semantic_head
from remax.relax import RelaxConfig
from remax.synthdata import generate_many
from remax.train import AdamW, MomentumSGD, NumericalFailure, batch_indices, lr_at, prepare, sample_gradients, train

SMALL = ["model.h=16", "model.w=16", "model.n_q=4", "model.d_q=8", "model.d_pix=8", "model.d_sem=8",
         "model.stages=2", "train.batch_size=2", "train.val_every=3"]


def small_cfg(*extra):
    cfg = load_config(overrides=[*SMALL, *extra])
    cfg.validate()
    return cfg


def small_data(cfg, n=8, seed=0):
    return prepare(generate_many(seed, n, cfg.scene_config()), cfg.model)


def test_lr_schedule():
    steps = 500
    lrs = [lr_at(s, steps, 1e-3, (0.85, 0.95), 0.1) for s in range(steps)]
    d1, d2 = math.ceil(0.85 * steps), math.ceil(0.95 * steps)
    assert lrs[d1 - 1] == 1e-3
    assert lrs[d1 - 1] / lrs[d1] == pytest.approx(10.0, rel=1e-15)
    assert lrs[d2 - 1] / lrs[d2] == pytest.approx(10.0, rel=1e-15)
    assert len(set(lrs)) == 3
    for steps in (7, 20, 101):
        d1 = math.ceil(0.85 * steps)
        assert lr_at(d1 - 1, steps, 1.0, (0.85, 0.95), 0.1) == 1.0
        assert lr_at(d1, steps, 1.0, (0.85, 0.95), 0.1) in (0.1, 0.01)


def test_batch_indices_seeded():
    a = batch_indices(3, 10, 50, 4)
    assert a.tolist() == batch_indices(3, 10, 50, 4).tolist()
    assert len(set(a.tolist())) == 4
    assert batch_indices(3, 11, 50, 4).tolist() != a.tolist() or batch_indices(4, 10, 50, 4).tolist() != a.tolist()


def test_adamw_first_step_and_decay():
    p = {"w": np.array([1.0, -2.0])}
    AdamW(weight_decay=0.0).step(p, {"w": np.array([0.5, -0.1])}, 0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], rtol=1e-6)
    p = {"w": np.array([1.0])}
    AdamW(weight_decay=0.5).step(p, {"w": np.array([0.0])}, 0.1)
    assert p["w"][0] == pytest.approx(0.95)


def test_sgd_momentum():
    p = {"w": np.array([0.0])}
    opt = MomentumSGD(momentum=0.9)
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    assert p["w"][0] == pytest.approx(-0.1 - 0.19)


def test_training_reduces_loss_and_logs_rows(tmp_path):
    cfg = small_cfg("train.steps=12", "optim.lr=3e-3")
    data = small_data(cfg)
    r = train(cfg, data, data[:2], log_path=tmp_path / "log.csv")
    assert len(r.rows) == 12
    assert all(np.isfinite([row[k] for k in ("total", "fp_mask", "fn_mask")]).all() for row in r.rows)
    assert [row["step"] for row in r.rows if row["val_pq"] is not None] == [2, 5, 8, 11]
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,total,mask_ce,dice,class_ce,semantic,fp_mask,fn_mask,log10_fp_fn,val_pq,wall_ms"
    assert len(lines) == 13


def test_training_deterministic(tmp_path):
    cfg = small_cfg("train.steps=6")
    data = small_data(cfg)
    train(cfg, data, data[:2], log_path=tmp_path / "a.csv")
    train(small_cfg("train.steps=6"), data, data[:2], log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sgd_option_runs():
    cfg = small_cfg("train.steps=3", "optim.name=sgd", "optim.lr=0.01")
    r = train(cfg, small_data(cfg))
    assert np.isfinite(r.rows[-1]["total"])


def test_numerical_failure_reports_batch_seed():
    cfg = small_cfg("train.steps=4", "optim.lr=1e200", "seed=5")
    with pytest.raises(NumericalFailure) as info:
        train(cfg, small_data(cfg))
    assert info.value.batch_seed == (5, info.value.step)
    assert info.value.indices == batch_indices(5, info.value.step, 8, 2).tolist()


def test_stop_grad_controls_semantic_gradients_at_step_one():
    data = None
    seen = {}
    for stop in (True, False):
        cfg = small_cfg(f"relax.stop_grad_semantic={str(stop).lower()}", "loss.w_sem=0")
        data = data or small_data(cfg)
        _, grads = sample_gradients(init_params(cfg.model), data[0], cfg)
        seen[stop] = max(np.abs(v).max() for k, v in grads.items() if is_semantic_head(k))
    assert seen[True] == 0.0 and seen[False] > 0.0


def test_eta_zero_class_targets_match_relaxation_off():
    cfg = small_cfg()
    sample = small_data(cfg, n=1)[0]
    params = init_params(cfg.model)
    relaxed = forward(sample.image, params, cfg.model, RelaxConfig(eta=0.0, remask_stage_count=2), sample.sem_gt)
    plain = forward(sample.image, params, cfg.model, RelaxConfig(eta=0.0, remask_stage_count=0), sample.sem_gt)
    a = hungarian(matching_cost(plain[-1], sample.targets))
    y_r, w_r = class_targets(relaxed[-1], sample.targets, a, 0.0)
    y_p, w_p = class_targets(plain[-1], sample.targets, a, 0.0)
    assert y_r.tobytes() == y_p.tobytes() and w_r.tobytes() == w_p.tobytes()
    assert set(np.unique(y_r)) <= {0.0, 1.0}
