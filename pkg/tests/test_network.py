import numpy as np
import pytest

from psgr import ops
from psgr.autodiff import Var
from psgr.errors import ShapeError, ValidationError
from psgr.network import (LossConfig, NetConfig, SegNet, load_checkpoint,
                          one_hot, save_checkpoint, seg_loss, total_loss)
from psgr.reasoner import PsgrConfig
from psgr.tensor import Rng

from oracles import bce_formula_oracle, dice_formula_oracle


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# losses


def test_dice_perfect_overlap():
    mask = np.zeros((8, 8), dtype=np.int64)
    mask[:2, :5] = 1  # 10 positives of 64 pixels
    target = one_hot(mask, 2, dtype=np.float64)
    loss = ops.dice_loss(Var(target.copy()), target, eps=1e-5)
    assert loss.item() <= 1e-6


def test_dice_disjoint_tends_to_one():
    mask = np.zeros((8, 8), dtype=np.int64)
    mask[:4] = 1
    target = one_hot(mask, 2, dtype=np.float64)
    flipped = target[..., ::-1].copy()
    loss = ops.dice_loss(Var(flipped), target, eps=1e-12)
    assert abs(loss.item() - 1.0) < 1e-9


def test_dice_uniform_single_channel_matches_formula():
    probs = np.full((8, 8, 1), 0.5)
    target = np.zeros((8, 8, 1))  # all background: falls back to all channels
    loss = ops.dice_loss(Var(probs), target, eps=1e-5)
    expected = dice_formula_oracle(probs, target, 1e-5)
    assert abs(loss.item() - expected) < 1e-12


def test_dice_random_matches_formula():
    rng = Rng(3)
    probs = softmax(rng.normal((6, 6, 3)))
    mask = np.asarray(Rng(4).integers(0, 3, (6, 6)))
    target = one_hot(mask, 3, dtype=np.float64)
    loss = ops.dice_loss(Var(probs), target)
    assert abs(loss.item() - dice_formula_oracle(probs, target, 1e-5)) < 1e-12


def test_bce_uniform_half_is_ln2():
    probs = np.full((8, 8), 0.5)
    target = (Rng(0).uniform(0, 1, (8, 8)) > 0.5).astype(np.float64)
    loss = ops.bce_loss(Var(probs), target)
    assert abs(loss.item() - np.log(2.0)) < 1e-6


def test_bce_perfect_prediction_near_zero():
    target = (Rng(1).uniform(0, 1, (6, 6)) > 0.5).astype(np.float64)
    loss = ops.bce_loss(Var(target.copy()), target)
    assert loss.item() <= 2e-7


def test_bce_random_matches_oracle():
    rng = Rng(2)
    probs = rng.uniform(0.05, 0.95, (4, 4))
    target = (rng.uniform(0, 1, (4, 4)) > 0.4).astype(np.float64)
    loss = ops.bce_loss(Var(probs), target)
    assert abs(loss.item() - bce_formula_oracle(probs, target)) < 1e-12


def test_total_loss_lambda_zero_equals_main():
    rng = Rng(5)
    main = softmax(rng.normal((8, 8, 2)))
    coarse = softmax(rng.normal((8, 8, 2)))
    target = one_hot((rng.uniform(0, 1, (8, 8)) > 0.7).astype(np.int64), 2,
                     dtype=np.float64)
    total, main_part, _ = total_loss(Var(main), Var(coarse), target,
                                     LossConfig(lam=0.0), 2)
    assert total.item() == main_part.item()


def test_total_loss_perfect_predictions():
    mask = np.zeros((8, 8), dtype=np.int64)
    mask[2:4, 2:6] = 1
    target = one_hot(mask, 2, dtype=np.float64)
    perfect = np.clip(target, 1e-9, 1 - 1e-9)
    total, _, _ = total_loss(Var(perfect.copy()), Var(perfect.copy()), target,
                             LossConfig(lam=0.5), 2)
    assert total.item() <= 1e-5


def test_total_loss_linear_combination():
    rng = Rng(6)
    main = softmax(rng.normal((8, 8, 2)))
    coarse = softmax(rng.normal((8, 8, 2)))
    target = one_hot((rng.uniform(0, 1, (8, 8)) > 0.6).astype(np.int64), 2,
                     dtype=np.float64)
    cfg = LossConfig(lam=0.5)
    total, main_part, coarse_part = total_loss(Var(main), Var(coarse), target, cfg, 2)
    assert abs(total.item() - (main_part.item() + 0.5 * coarse_part.item())) < 1e-12
    # the stated-value check: components 1.0 and 0.4 combine to 1.2
    assert 1.0 + cfg.lam * 0.4 == 1.2


def test_total_loss_requires_upsampled_coarse():
    rng = Rng(7)
    main = softmax(rng.normal((8, 8, 2)))
    small = softmax(rng.normal((1, 1, 2)))
    target = one_hot(np.zeros((8, 8), np.int64), 2, dtype=np.float64)
    with pytest.raises(ShapeError):
        total_loss(Var(main), Var(small), target, LossConfig(), 2)


def test_seg_loss_multiclass_uses_cross_entropy():
    rng = Rng(8)
    probs = softmax(rng.normal((6, 6, 3)))
    target = one_hot(np.asarray(Rng(9).integers(0, 3, (6, 6))), 3, np.float64)
    loss = seg_loss(Var(probs), target, 3)
    assert np.isfinite(loss.item())
    assert loss.item() > 0


def test_one_hot_rejects_bad_labels():
    with pytest.raises(ValidationError):
        one_hot(np.array([[0, 2]]), 2)


def test_loss_config_rejects_negative_lambda():
    with pytest.raises(ValidationError):
        LossConfig(lam=-0.1)


# ---------------------------------------------------------------------------
# backbone


def test_forward_shape_contract():
    net = SegNet(NetConfig(n_classes=2), seed=0)
    x = Rng(0).normal((2, 64, 64, 1), "f32")
    main, coarse, traces = net.forward(x, training=False)
    assert main.data.shape == (2, 64, 64, 2)
    assert coarse.data.shape == (2, 8, 8, 2)
    assert traces == []


def test_forward_with_psgr_shapes_and_traces():
    cfg = NetConfig(n_classes=2, psgr=PsgrConfig(ru=0.1))
    net = SegNet(cfg, seed=0)
    x = Rng(1).normal((2, 64, 64, 1), "f32")
    main, coarse, traces = net.forward(x, training=True)
    assert main.data.shape == (2, 64, 64, 2)
    assert len(traces) == 2
    assert traces[0].adjacency.n_edges == 6 * 32  # round(.1*64)=6 rows, k=32


def test_forward_rejects_bad_input():
    net = SegNet(NetConfig(), seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 60, 64, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 64, 64, 3), dtype=np.float32))


def test_decoder_stage_sizes(monkeypatch):
    # stage s output spatial size = input / 2^(3-s)
    net = SegNet(NetConfig(), seed=0)
    x = Rng(2).normal((1, 64, 64, 1), "f32")
    sizes = []
    original = ops.upsample_bilinear

    def spy(v, factor):
        out = original(v, factor)
        sizes.append(out.data.shape[1])
        return out

    monkeypatch.setattr(ops, "upsample_bilinear", spy)
    net.forward(x, training=False)
    assert sizes == [16, 32, 64]


def test_bn_eval_mode_is_pure():
    net = SegNet(NetConfig(), seed=0)
    x = Rng(3).normal((1, 64, 64, 1), "f32")
    a, _, _ = net.forward(x, training=False)
    b, _, _ = net.forward(x, training=False)
    assert np.array_equal(a.data, b.data)


def test_bn_train_updates_running_stats():
    net = SegNet(NetConfig(), seed=0)
    before = {k: (v["mean"].copy(), v["var"].copy())
              for k, v in net.bn_state.items()}
    x = Rng(4).normal((2, 64, 64, 1), "f32")
    net.forward(x, training=True)
    changed = any(not np.array_equal(before[k][0], v["mean"])
                  for k, v in net.bn_state.items())
    assert changed


def test_param_init_is_per_name_seeded():
    a = SegNet(NetConfig(n_classes=2), seed=0)
    b = SegNet(NetConfig(n_classes=2, psgr=PsgrConfig(ru=0.1)), seed=0)
    # adding the reasoning module must not shift the backbone's init
    for name, var in a.params.items():
        assert np.array_equal(var.data, b.params[name].data), name


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = NetConfig(n_classes=2, psgr=PsgrConfig(ru=0.1))
    net = SegNet(cfg, seed=7)
    x = Rng(5).normal((2, 64, 64, 1), "f32")
    net.forward(x, training=True)  # move BN stats off their init
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, extra={"note": "test"})
    restored, manifest = load_checkpoint(path)
    assert manifest["extra"]["note"] == "test"
    for name, var in net.params.items():
        assert np.array_equal(var.data, restored.params[name].data), name
    for name, state in net.bn_state.items():
        assert np.array_equal(state["mean"], restored.bn_state[name]["mean"])
    out_a, _, _ = net.forward(x, training=False)
    out_b, _, _ = restored.forward(x, training=False)
    assert np.array_equal(out_a.data, out_b.data)


def test_checkpoint_bytes_deterministic(tmp_path):
    for i, path in enumerate([tmp_path / "a.ckpt", tmp_path / "b.ckpt"]):
        net = SegNet(NetConfig(n_classes=2), seed=3)
        save_checkpoint(path, net)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
