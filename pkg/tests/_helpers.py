"""Shared fixtures-by-function for the model-level tests."""

import numpy as np

from remax.losses import LossConfig, Targets, total_loss
from remax.model import ModelConfig, forward, init_params
from remax.relax import RelaxConfig, SemanticMaskGT
from remax.synthdata import SceneConfig, generate
from remax.tensor import Tape, backward, take

# small enough that a full-parameter finite-difference sweep takes seconds
TOY = dict(h=16, w=16, n_q=4, n_c=4, d_q=8, d_pix=8, d_sem=8, stages=2, patch=4)


def toy_problem(seed=3, sample_seed=5, **model_kw):
    mc = ModelConfig(**{**TOY, "seed": seed, **model_kw})
    scene = SceneConfig(h=mc.h, w=mc.w, n_thing_classes=2, n_stuff_classes=mc.n_c - 2)
    sample = generate(sample_seed, scene)
    coarse = sample.downsample(mc.patch)
    targets = Targets.from_sample(coarse)
    return mc, sample.image.astype(np.float64), targets, SemanticMaskGT(targets.S)


def flat_params(params):
    names = list(params)
    x0 = np.concatenate([params[k].ravel() for k in names])
    layout = []
    offset = 0
    for k in names:
        layout.append((k, params[k].shape, offset, params[k].size))
        offset += params[k].size
    return x0, layout


def unflatten(x, layout):
    return {k: take(x, np.arange(o, o + n), 0).reshape(shape) for k, shape, o, n in layout}


def e2e_loss_fn(mc, image, targets, gt, relax, loss_cfg):
    """Total loss as a function of one flat parameter vector, matching pinned at the base point."""
    params = init_params(mc)
    x0, layout = flat_params(params)
    base = total_loss(forward(image, params, mc, relax, gt), targets, loss_cfg, relax)

    def f(x):
        stages = forward(image, unflatten(x, layout), mc, relax, gt)
        return total_loss(stages, targets, loss_cfg, relax, assignment=base.assignment).total_tensor

    return f, x0


def param_grads(params, mc, image, targets, gt, relax, loss_cfg):
    tape = Tape()
    P = {k: tape.watch(v) for k, v in params.items()}
    report = total_loss(forward(image, P, mc, relax, gt), targets, loss_cfg, relax)
    g = backward(tape, report.total_tensor)
    return {k: g[t.node_id] for k, t in P.items()}
