import numpy as np
import pytest

from fogdet import autodiff as ad
from fogdet import distill, fogsim, rng
from fogdet.autodiff import Tensor
from fogdet.detector import Detector, DetectorConfig
from fogdet.distill import (PerceptualConfig, PerceptualConfigError, SGD,
                            TeacherStudentPair, feature_loss, perceptual_loss)


def small_cfg(variant="baseline"):
    return DetectorConfig(variant=variant, image_size=16, token_dim=8,
                          heads=2, num_queries=6)


def make_pair(seed_t=1, seed_s=2):
    return TeacherStudentPair(teacher=Detector.init(small_cfg(), seed_t),
                              student=Detector.init(small_cfg(), seed_s))


def make_sample(seed=0):
    gen = rng.derive(seed, "sample")
    spec = fogsim.random_scene(gen, 16, 16, max_objects=2)
    image, depth, ann = fogsim.render_scene(spec)
    fog = fogsim.FogParams(0.08)
    return fogsim.Sample("s0", image, fogsim.apply_fog(image, depth, fog),
                         depth, ann, fog)


# -- config validation -----------------------------------------------------

def test_perceptual_config_rejects_empty_layers():
    with pytest.raises(PerceptualConfigError):
        PerceptualConfig(layers=(), weights=())


def test_perceptual_config_rejects_weight_count_mismatch():
    with pytest.raises(PerceptualConfigError):
        PerceptualConfig(layers=(2, 3), weights=(1.0,))


def test_perceptual_config_rejects_negative_weight():
    with pytest.raises(PerceptualConfigError):
        PerceptualConfig(layers=(2,), weights=(-1.0,))


def test_perceptual_config_rejects_all_zero_weights():
    with pytest.raises(PerceptualConfigError):
        PerceptualConfig(layers=(2, 3), weights=(0.0, 0.0))


def test_perceptual_config_rejects_unknown_stage():
    with pytest.raises(PerceptualConfigError):
        PerceptualConfig(layers=(4,), weights=(1.0,))


# -- feature / perceptual loss ---------------------------------------------

def _random_feats(gen):
    return [Tensor(gen.normal(size=(8, 8, 8))),
            Tensor(gen.normal(size=(16, 4, 4))),
            Tensor(gen.normal(size=(8, 2, 2)))]


def test_feature_loss_zero_for_identical_features():
    feats = _random_feats(rng.derive(3, "f"))
    loss = feature_loss(feats, [Tensor(f.data.copy()) for f in feats],
                        PerceptualConfig())
    assert float(loss.data) == 0.0


def test_feature_loss_nonnegative():
    gen = rng.derive(4, "f")
    for _ in range(20):
        loss = feature_loss(_random_feats(gen), _random_feats(gen),
                            PerceptualConfig())
        assert float(loss.data) >= 0.0


def test_feature_loss_weight_homogeneity_exact():
    gen = rng.derive(5, "f")
    t, s = _random_feats(gen), _random_feats(gen)
    base = float(feature_loss(t, s, PerceptualConfig(weights=(0.5, 1.0))).data)
    doubled = float(feature_loss(
        t, s, PerceptualConfig(weights=(1.0, 2.0))).data)
    assert doubled == 2.0 * base
    glob = float(feature_loss(
        t, s, PerceptualConfig(weights=(0.5, 1.0), global_weight=2.0)).data)
    assert glob == 2.0 * base


def test_feature_loss_hand_value_single_stage():
    t = [Tensor(np.zeros((1, 2, 2)))] * 3
    s = [Tensor(np.full((1, 2, 2), 3.0))] * 3
    loss = feature_loss(t, s, PerceptualConfig(layers=(3,), weights=(2.0,)))
    assert float(loss.data) == pytest.approx(18.0)    # 2 * mean(3^2)


def test_feature_loss_rejects_shape_mismatch():
    gen = rng.derive(6, "f")
    t = _random_feats(gen)
    s = _random_feats(gen)
    s[2] = Tensor(gen.normal(size=(8, 4, 4)))
    with pytest.raises(Exception):
        feature_loss(t, s, PerceptualConfig())


def test_perceptual_loss_zero_for_tied_models_same_input():
    pair = TeacherStudentPair(teacher=Detector.init(small_cfg(), 7),
                              student=Detector.init(small_cfg(), 7))
    img = rng.derive(7, "img").uniform(size=(16, 16, 3))
    assert float(perceptual_loss(img, img, pair).data) == 0.0


def test_perceptual_loss_gradient_only_reaches_student():
    pair = make_pair()
    gen = rng.derive(8, "img")
    loss = perceptual_loss(gen.uniform(size=(16, 16, 3)),
                           gen.uniform(size=(16, 16, 3)), pair)
    ad.backward(loss)
    assert all(t.grad is None for t in pair.teacher.params.values())
    grads = [pair.student.params[n] for n in pair.student.params
             if n.startswith("backbone")]
    assert any(t.grad is not None and np.abs(t.grad).max() > 0 for t in grads)


def test_perceptual_loss_gradient_checked():
    pair = make_pair()
    gen = rng.derive(9, "img")
    clear = gen.uniform(size=(16, 16, 3))
    foggy = gen.uniform(size=(16, 16, 3))
    params = [pair.student.params[n] for n in sorted(pair.student.params)
              if n.startswith("backbone")]
    err = ad.gradient_check(lambda: perceptual_loss(clear, foggy, pair), params)
    assert err < 1e-4


def test_total_loss_is_plain_sum():
    total = distill.total_loss(Tensor(1.5), Tensor(0.25))
    assert float(total.data) == 1.75


# -- SGD -------------------------------------------------------------------

def test_sgd_hand_computed_momentum_steps():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"w": w}, lr=0.1, momentum=0.5, max_grad_norm=None)
    w.grad = np.array([2.0])
    opt.step()                       # v = -0.2, w = 0.8
    assert w.data == pytest.approx([0.8])
    w.grad = np.array([2.0])
    opt.step()                       # v = -0.3, w = 0.5
    assert w.data == pytest.approx([0.5])


def test_sgd_clips_by_global_norm():
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD({"a": a, "b": b}, lr=1.0, momentum=0.0, max_grad_norm=1.0)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])   # norm 5 -> scale 0.2
    opt.step()
    assert a.data == pytest.approx([-0.6])
    assert b.data == pytest.approx([-0.8])


def test_sgd_leaves_small_gradients_unclipped():
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD({"w": w}, lr=1.0, momentum=0.0, max_grad_norm=1.0)
    w.grad = np.array([0.5])
    opt.step()
    assert w.data == pytest.approx([-0.5])


def test_sgd_skips_parameters_without_gradient():
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = SGD({"w": w}, lr=0.1)
    opt.step()
    assert w.data == pytest.approx([2.0])


# -- distillation step -----------------------------------------------------

def test_distill_step_reports_loss_terms_and_updates_student():
    pair = make_pair()
    opt = SGD(pair.student.named_parameters(), lr=0.01)
    before = {n: t.data.copy() for n, t in pair.student.params.items()}
    teacher_before = {n: t.data.copy() for n, t in pair.teacher.params.items()}
    row = distill.distill_step([make_sample(10)], pair, opt)
    assert set(row) == {"l_obj", "l_perc", "l_total"}
    assert row["l_total"] == pytest.approx(row["l_obj"] + row["l_perc"])
    assert row["l_perc"] > 0.0
    changed = any(not np.array_equal(t.data, before[n])
                  for n, t in pair.student.params.items())
    assert changed
    for n, t in pair.teacher.params.items():
        assert np.array_equal(t.data, teacher_before[n]), "teacher must stay frozen"


def test_check_finite_raises_on_nan_output():
    from fogdet.detector import DetectionOutput
    bad = DetectionOutput(class_logits=Tensor(np.full((2, 6), np.nan)),
                          boxes=Tensor(np.zeros((2, 4))))
    with pytest.raises(FloatingPointError):
        distill.check_finite(bad)
