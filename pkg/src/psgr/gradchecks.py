"""Registered gradient checks: analytic backward vs central differences.

Each check builds seeded random f64 inputs and a scalar objective (op
output contracted with a fixed random projection), then compares the
engine's gradients against :func:`psgr.autodiff.finite_diff` for every
input. Per-op relative-error budgets follow the op's smoothness: linear
ops sit near roundoff, rational/saturating ones get more slack, and the
full reasoning composite (with frozen graph structure) gets 1e-4.
"""

import numpy as np

from . import ops
from .autodiff import run_gradcheck
from .errors import ValidationError
from .network import one_hot
from .reasoner import (FrozenStructure, GnnLayerParams, NeighborhoodSets,
                       PsgrConfig, PsgrModule, gnn_layer)
from .graph import SparseAdjacency, select_uncertain


def _projected(out, proj):
    return ops.sum_all(ops.mul_const(out, proj))


def _check_matmul(rng):
    inputs = {"a": rng.normal((4, 3)), "b": rng.normal((3, 2))}
    proj = rng.normal((4, 2))

    def fn(v):
        return _projected(ops.matmul(v["a"], v["b"]), proj)

    return inputs, fn


def _check_conv(rng):
    inputs = {"x": rng.normal((2, 5, 5, 2)), "w": rng.normal((18, 3)),
              "b": rng.normal((3,))}
    proj = rng.normal((2, 5, 5, 3))

    def fn(v):
        return _projected(ops.conv2d(v["x"], v["w"], v["b"], ksize=3), proj)

    return inputs, fn


def _check_conv1x1(rng):
    inputs = {"x": rng.normal((2, 4, 4, 3)), "w": rng.normal((3, 2)),
              "b": rng.normal((2,))}
    proj = rng.normal((2, 4, 4, 2))

    def fn(v):
        return _projected(ops.conv2d(v["x"], v["w"], v["b"], ksize=1), proj)

    return inputs, fn


def _check_upsample(rng):
    inputs = {"x": rng.normal((1, 3, 4, 2))}
    proj = rng.normal((1, 6, 8, 2))

    def fn(v):
        return _projected(ops.upsample_bilinear(v["x"], 2), proj)

    return inputs, fn


def _check_maxpool(rng):
    inputs = {"x": rng.normal((1, 4, 4, 2))}
    proj = rng.normal((1, 2, 2, 2))

    def fn(v):
        return _projected(ops.maxpool2(v["x"]), proj)

    return inputs, fn


def _check_batchnorm(rng):
    inputs = {"x": rng.normal((2, 4, 4, 3)), "gamma": rng.normal((3,)),
              "beta": rng.normal((3,))}
    proj = rng.normal((2, 4, 4, 3))

    def fn(v):
        y, _, _ = ops.batchnorm_train(v["x"], v["gamma"], v["beta"])
        return _projected(y, proj)

    return inputs, fn


def _check_sigmoid(rng):
    inputs = {"x": rng.normal((3, 4))}
    proj = rng.normal((3, 4))

    def fn(v):
        return _projected(ops.sigmoid(v["x"]), proj)

    return inputs, fn


def _check_relu(rng):
    inputs = {"x": rng.normal((3, 4))}
    proj = rng.normal((3, 4))

    def fn(v):
        return _projected(ops.relu(v["x"]), proj)

    return inputs, fn


def _check_softmax(rng):
    inputs = {"x": rng.normal((4, 3))}
    proj = rng.normal((4, 3))

    def fn(v):
        return _projected(ops.softmax(v["x"]), proj)

    return inputs, fn


def _check_bce(rng):
    target = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(np.float64)
    inputs = {"x": rng.normal((4, 4))}

    def fn(v):
        return ops.bce_loss(ops.sigmoid(v["x"]), target)

    return inputs, fn


def _check_dice(rng):
    mask = (rng.uniform(0, 1, (5, 5)) > 0.6).astype(np.int64)
    target = one_hot(mask, 2, dtype=np.float64)
    inputs = {"x": rng.normal((5, 5, 2))}

    def fn(v):
        return ops.dice_loss(ops.softmax(v["x"]), target)

    return inputs, fn


def _check_cross_entropy(rng):
    mask = (rng.uniform(0, 1, (4, 4)) * 3).astype(np.int64).clip(0, 2)
    target = one_hot(mask, 3, dtype=np.float64)
    inputs = {"x": rng.normal((4, 4, 3))}

    def fn(v):
        return ops.cross_entropy(ops.softmax(v["x"]), target)

    return inputs, fn


def _check_gnn_layer(rng):
    hw = (2, 3)
    n = 6
    src = np.array([0, 0, 4, 4], dtype=np.int64)
    dst = np.array([2, 5, 1, 3], dtype=np.int64)
    adjacency = SparseAdjacency(n_nodes=n, k=2, src=src, dst=dst,
                                weight=np.ones(4),
                                uncertain=np.array([0, 4], np.int64))
    nbhd = NeighborhoodSets.build(hw, adjacency)
    inputs = {"z": rng.normal((n, 3)), "t1": rng.normal((3, 3)),
              "t2": rng.normal((3, 3)), "w": rng.uniform(0.1, 1.0, (4,))}
    proj = rng.normal((n, 3))

    def fn(v):
        params = GnnLayerParams(theta1=v["t1"], theta2=v["t2"],
                                nonlinearity="sigmoid")
        return _projected(gnn_layer(v["z"], nbhd, adjacency, params,
                                    weight_var=v["w"]), proj)

    return inputs, fn


def _psgr_fixture(rng, h=6, w=6, c=4, ru=0.2):
    """Shared inputs plus a frozen structure for the composite check."""
    n = h * w
    cfg = PsgrConfig(ru=ru, norm_mode="random_walk", n_layers=1,
                     nonlinearity="sigmoid")
    logits = rng.normal((n, 2))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    inputs = {
        "f": rng.normal((h, w, c)),
        "in_proj_w": rng.normal((c, c)) / np.sqrt(c),
        "in_proj_b": rng.normal((c,)) * 0.1,
        "out_proj_w": rng.normal((c, c)) / np.sqrt(c),
        "out_proj_b": rng.normal((c,)) * 0.1,
        "theta1_0": rng.normal((c, c)) / np.sqrt(c),
        "theta2_0": rng.normal((c, c)) / np.sqrt(c),
    }
    proj = rng.normal((h, w, c))

    def make_module(v):
        params = {k: v[k] for k in ("in_proj_w", "in_proj_b", "out_proj_w",
                                    "out_proj_b", "theta1_0", "theta2_0")}
        return PsgrModule(c, cfg, params)

    base = make_module({k: np.asarray(val) for k, val in inputs.items()})
    frozen = base.compute_structure(inputs["f"], probs.reshape(h, w, 2))
    return inputs, proj, probs.reshape(h, w, 2), make_module, frozen


def _check_psgr(rng):
    inputs, proj, probs, make_module, frozen = _psgr_fixture(rng)

    def fn(v):
        module = make_module(v)
        out, _ = module.forward(v["f"], probs, frozen=frozen)
        return _projected(out, proj)

    return inputs, fn


# name -> (builder, relative-error budget)
REGISTRY = {
    "matmul": (_check_matmul, 1e-6),
    "conv": (_check_conv, 1e-6),
    "conv1x1": (_check_conv1x1, 1e-6),
    "upsample": (_check_upsample, 1e-6),
    "maxpool": (_check_maxpool, 1e-6),
    "batchnorm": (_check_batchnorm, 1e-5),
    "sigmoid": (_check_sigmoid, 1e-6),
    "relu": (_check_relu, 1e-6),
    "softmax": (_check_softmax, 1e-6),
    "bce": (_check_bce, 1e-5),
    "dice": (_check_dice, 1e-5),
    "cross_entropy": (_check_cross_entropy, 1e-5),
    "gnn_layer": (_check_gnn_layer, 1e-5),
    "psgr": (_check_psgr, 1e-4),
}


def gradcheck(op_name, seed=0):
    """Run one registered check; returns its GradCheckReport."""
    if op_name not in REGISTRY:
        raise ValidationError(f"gradcheck: unknown op {op_name!r}; "
                              f"registered: {sorted(REGISTRY)}")
    builder, _ = REGISTRY[op_name]
    return run_gradcheck(op_name, builder, seed=seed)


def gradcheck_all(seed=0):
    """Run every registered check; returns [(report, rel_tol, passed)]."""
    results = []
    for name, (builder, rel_tol) in REGISTRY.items():
        report = run_gradcheck(name, builder, seed=seed)
        results.append((report, rel_tol, report.passed(rel_tol)))
    return results
