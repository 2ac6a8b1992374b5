import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accunet import checkpoint
from accunet.data import Sample, gen_synthetic
from accunet.model import ModelConfig, build
from accunet.nn import Parameter
from accunet.tensor import Tensor
from accunet.training import (Adam, TrainConfig, augment, combined_loss, cosine_lr, dice_score,
                              evaluate, flip_rotate, predict_probs, restore, snapshot, train,
                              undo_flip_rotate)
from accunet.verify import loss_check

TINY = ModelConfig(channels=(2, 4, 4, 8, 8), inv_fctr_overrides={"dec3.hanc2": 4})


# -- loss


def test_perfect_prediction_loss_is_near_zero():
    g = np.array([[[[1, 0], [0, 1]]]], np.float64)
    z = np.where(g > 0, 20.0, -20.0)
    # the smoothed dice term is exactly 1 - (2*2 + 1) / (2 + 2 + 1) = 0 up to sigmoid tails
    assert combined_loss(Tensor(z), g).item() == pytest.approx(0, abs=1e-3)


def test_hand_computed_loss():
    loss = combined_loss(Tensor(np.zeros((1, 1, 2, 2))), np.ones((1, 1, 2, 2))).item()
    bce = math.log(2)
    dice = 1 - (2 * 0.5 * 4 + 1) / (0.5 * 4 + 4 + 1)
    assert loss == pytest.approx(0.5 * bce + 0.5 * dice, abs=1e-12)
    assert loss == pytest.approx(0.4894, abs=1e-4)


def brute_force_loss(z, g, w_ce=0.5, w_dice=0.5, s=1.0):
    p = [1 / (1 + math.exp(-v)) for v in z]
    bce = sum(-(gi * math.log(pi) + (1 - gi) * math.log(1 - pi)) for pi, gi in zip(p, g)) / len(z)
    inter = sum(pi * gi for pi, gi in zip(p, g))
    dice = 1 - (2 * inter + s) / (sum(p) + sum(g) + s)
    return w_ce * bce + w_dice * dice


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-8, 8), st.booleans()), min_size=4, max_size=4))
def test_loss_matches_brute_force(pairs):
    z = np.array([p[0] for p in pairs]).reshape(1, 1, 2, 2)
    g = np.array([float(p[1]) for p in pairs]).reshape(1, 1, 2, 2)
    got = combined_loss(Tensor(z), g).item()
    assert got == pytest.approx(brute_force_loss(z.ravel(), g.ravel()), rel=1e-9, abs=1e-12)
    assert got >= 0


def test_loss_is_stable_for_huge_logits():
    z = Tensor(np.array([[[[1e4, -1e4]]]]))
    assert math.isfinite(combined_loss(z, np.array([[[[0.0, 1.0]]]])).item())


def test_loss_rejects_non_binary_target():
    with pytest.raises(ValueError, match="binary"):
        combined_loss(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))


def test_loss_gradient_oracle():
    r = loss_check(0)
    assert r.error < 1e-4


# -- dice


def test_dice_examples():
    g = np.zeros((4, 4))
    g[:2] = 1
    assert dice_score(g, g) == 1.0
    assert dice_score(1 - g, g) == 0.0
    half = np.zeros((4, 4))
    half[0] = 1
    assert dice_score(half, g) == pytest.approx(2 / 3)
    assert dice_score(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


@given(st.lists(st.booleans(), min_size=16, max_size=16),
       st.lists(st.booleans(), min_size=16, max_size=16))
def test_dice_in_unit_interval_and_symmetric(a, b):
    a = np.array(a, float).reshape(4, 4)
    b = np.array(b, float).reshape(4, 4)
    d = dice_score(a, b)
    assert 0 <= d <= 1
    assert d == dice_score(b, a)


# -- optimizer and schedule


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3, abs=1e-12)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-12)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(0, 0)


@given(st.integers(1, 500), st.data())
def test_cosine_is_monotone(total, data):
    t = data.draw(st.integers(0, total - 1))
    assert cosine_lr(t + 1, total) <= cosine_lr(t, total)


def test_adam_first_step_is_lr_sized():
    p = Parameter(np.zeros(5, np.float32))
    opt = Adam({"p": p})
    opt.step({"p": np.array([1e-3, -2.0, 5.0, -1e-6, 3e3], np.float32)}, 0.01)
    np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=1e-2)
    assert opt.t == 1


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = Parameter(np.ones(3, np.float32))
    opt = Adam({"p": p})
    opt.step({"p": np.ones(3, np.float32)}, 0.1)
    opt.m["p"][:] = 0  # with m = 0 a zero gradient must give exactly zero update
    before, v1 = p.data.copy(), opt.v["p"].copy()
    opt.step({"p": np.zeros(3, np.float32)}, 0.1)
    np.testing.assert_array_equal(p.data, before)
    np.testing.assert_allclose(opt.v["p"], 0.999 * v1, rtol=1e-6)


def test_adam_missing_gradient():
    opt = Adam({"a": Parameter(np.zeros(2)), "b": Parameter(np.zeros(2))})
    with pytest.raises(KeyError, match="b"):
        opt.step({"a": np.ones(2)}, 0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=5, patience=10)
    with pytest.raises(ValueError):
        TrainConfig(w_ce=0.7, w_dice=0.7)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# -- augmentation


D4 = [(h, v, k) for h in (False, True) for v in (False, True) for k in range(4)]


def test_d4_inverse_and_closure():
    a = np.arange(2 * 16, dtype=np.float32).reshape(1, 2, 4, 4)
    images = set()
    for t in D4:
        b = flip_rotate(a, *t)
        assert undo_flip_rotate(b, *t).tobytes() == a.tobytes()
        images.add(b.tobytes())
    # 16 parameter tuples, but hflip+vflip is a 180 degree rotation: 8 distinct elements
    assert len(images) == 8
    for t1 in D4:
        for t2 in D4:
            assert flip_rotate(flip_rotate(a, *t1), *t2).tobytes() in images


def test_double_hflip_is_identity():
    a = np.random.default_rng(0).random((1, 3, 4, 4))
    np.testing.assert_array_equal(flip_rotate(flip_rotate(a, True, False, 0), True, False, 0), a)


class _Identity:
    def random(self):
        return 0.9

    def integers(self, n):
        return 0


def test_identity_draws_leave_sample_unchanged():
    s = gen_synthetic(1, 16, 0)[0]
    out = augment(s, _Identity())
    assert out.image.tobytes() == s.image.tobytes() and out.mask.tobytes() == s.mask.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_augment_keeps_image_and_mask_aligned(seed):
    # encode the mask into the image so any misalignment would show
    s = gen_synthetic(1, 16, 0)[0]
    s = Sample(s.id, np.concatenate([s.image, s.mask], axis=1), s.mask)
    out = augment(s, np.random.default_rng(seed))
    assert dice_score(out.image[:, -1:], out.mask) == 1.0
    assert out.image.shape == s.image.shape


# -- loops


@pytest.fixture(scope="module")
def tiny_data():
    ds = gen_synthetic(6, 16, 1)
    return ds[:4], ds[4:]


def test_history_length_and_fields(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(batch_size=2, max_epochs=3, patience=3, seed=0)
    best, hist = train(build(TINY), tr, va, cfg)
    assert [r.epoch for r in hist] == [1, 2, 3]
    assert hist[0].lr == cfg.lr0
    assert best.epoch in (1, 2, 3)
    assert best.best_val_dice == max(r.val_dice for r in hist)


def test_early_stop_with_constant_metric(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(batch_size=2, max_epochs=10, patience=1, seed=0)
    best, hist = train(build(TINY), tr, va, cfg, score_fn=lambda m, ds: 0.5)
    assert len(hist) == 2
    assert best.epoch == 1


def test_never_runs_past_patience(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(batch_size=4, max_epochs=8, patience=2, seed=0)
    best, hist = train(build(TINY), tr, va, cfg)
    assert hist[-1].epoch - best.epoch <= cfg.patience


def test_training_is_deterministic(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(batch_size=2, max_epochs=2, patience=2, seed=4)
    _, h1 = train(build(TINY, 4), tr, va, cfg)
    _, h2 = train(build(TINY, 4), tr, va, cfg)
    assert h1 == h2


def test_evaluate_contract(tiny_data):
    tr, _ = tiny_data
    model = build(TINY)
    mean, scores = evaluate(model, tr)
    assert mean == pytest.approx(np.mean(scores), abs=1e-6)
    probs = predict_probs(model, np.concatenate([s.image for s in tr]))
    own = [Sample(s.id, s.image, (probs[i:i + 1] > 0.5).astype(np.float32))
           for i, s in enumerate(tr)]
    assert evaluate(model, own)[0] == 1.0
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_all_background_on_all_background(tiny_data):
    tr, _ = tiny_data
    empty = [Sample(s.id, s.image, np.zeros_like(s.mask)) for s in tr]
    model = build(TINY)
    model.head.bias.data[:] = -100  # predictor that never fires
    assert evaluate(model, empty)[0] == 1.0


def test_checkpoint_round_trip(tmp_path, tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(batch_size=2, max_epochs=2, patience=2, seed=0)
    model = build(TINY)
    best, _ = train(model, tr, va, cfg)
    path = tmp_path / "m.ckpt"
    checkpoint.save(best, path)
    again = checkpoint.load(path)
    assert again.config == TINY
    assert (again.epoch, again.best_val_dice, again.adam_step) == \
        (best.epoch, best.best_val_dice, best.adam_step)
    assert again.tensors.keys() == best.tensors.keys()
    for k, a in best.tensors.items():
        assert again.tensors[k].tobytes() == a.tobytes()
    assert checkpoint.dumps(again) == path.read_bytes()
    m1, m2 = build(TINY, seed=9), build(TINY, seed=9)
    restore(m1, best)
    restore(m2, again)
    assert evaluate(m1, va) == evaluate(m2, va)


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + bytes(8))
    data = checkpoint.dumps(snapshot(build(TINY), None, 1, 0.5))
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(data[:-3])
