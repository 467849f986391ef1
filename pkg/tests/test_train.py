import math

import numpy as np
import pytest

from flier.data import Episode, make_synthetic_dataset, sample_episode
from flier.tensor import Tape, Tensor
from flier.train import (TrainConfig, TrainingDivergence, _Engine, build_model, joint_loss,
                         load_checkpoint, save_checkpoint, smooth_targets, smoothed_ce,
                         train_baseline_finetune, train_flier)


def ce_loop(logits, targets, eps, gamma):
    total = 0.0
    B, n = logits.shape
    for b in range(B):
        z = [v / gamma for v in logits[b]]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        for i in range(n):
            y = eps / n + (1 - eps if i == targets[b] else 0.0)
            total -= y * (z[i] - lse)
    return total / B


@pytest.fixture(scope="module")
def ep4(tiny_ds, tiny_cache):
    return sample_episode(tiny_ds, tiny_cache, 4, seed=0)


@pytest.fixture(scope="module")
def test_split(tiny_ds):
    return tiny_ds.images("test"), tiny_ds.labels("test")


def quick(**kw):
    base = dict(epochs=2, base_lr=1e-3, ema_momentum=0.9)
    base.update(kw)
    return TrainConfig(**base)


def test_smooth_targets_examples():
    np.testing.assert_allclose(smooth_targets([1], 4, 0.1), [[0.025, 0.925, 0.025, 0.025]])
    np.testing.assert_array_equal(smooth_targets([0, 2], 3, 0.0), np.eye(3)[[0, 2]])
    assert np.allclose(smooth_targets([3, 0, 1], 5, 0.3).sum(1), 1.0)
    with pytest.raises(ValueError):
        smooth_targets([4], 4, 0.1)
    with pytest.raises(ValueError):
        smooth_targets([0], 4, 1.0)


@pytest.mark.parametrize("eps,gamma", [(0.1, 1.0), (0.0, 1.0), (0.25, 0.5), (0.1, 2.0)])
def test_smoothed_ce_matches_scalar_loop(eps, gamma):
    rng = np.random.default_rng(3)
    z = rng.normal(0, 3, size=(6, 7))
    t = rng.integers(0, 7, size=6)
    got = smoothed_ce(Tensor(z), t, eps, gamma).item()
    assert abs(got - ce_loop(z, t, eps, gamma)) < 1e-12


def test_smoothed_ce_zero_epsilon_is_plain_cross_entropy():
    z = np.array([[2.0, 0.0, -1.0]])
    expected = -(2.0 - math.log(math.exp(2.0) + 1.0 + math.exp(-1.0)))
    assert smoothed_ce(Tensor(z), [0], 0.0).item() == pytest.approx(expected, abs=1e-14)


def test_smoothed_ce_survives_extreme_logits():
    z = np.array([[1000.0, -1000.0, 0.0]])
    loss = smoothed_ce(Tensor(z), [1], 0.1).item()
    assert np.isfinite(loss) and loss > 1000


def test_smoothed_ce_gradient_is_softmax_minus_target():
    z = Tensor(np.array([[0.3, -0.2, 1.1], [0.0, 0.5, -0.5]]), requires_grad=True)
    with Tape() as tape:
        loss = smoothed_ce(z, [2, 0], 0.1)
    tape.backward(loss)
    p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
    np.testing.assert_allclose(z.grad, (p - smooth_targets([2, 0], 3, 0.1)) / 2, atol=1e-14)


def test_joint_loss_examples():
    a, b = Tensor(np.array(2.0)), Tensor(np.array(4.0))
    assert joint_loss(a, b, 0.0).item() == 2.0
    assert joint_loss(a, b, 1.0).item() == 4.0
    assert joint_loss(a, b, 0.3).item() == pytest.approx(0.3 * 4.0 + 0.7 * 2.0, abs=1e-15)
    with pytest.raises(ValueError):
        joint_loss(a, b, 1.2)


def test_config_validation():
    for bad in (dict(alpha=1.5), dict(epsilon=1.0), dict(gamma=0.0), dict(phase_order="X"),
                dict(augment=("blur",)), dict(epochs=0), dict(llrd_decay=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def phase_g_grads(episode, alpha):
    model = build_model(episode.n_classes, 0)
    eng = _Engine(episode, model, quick(alpha=alpha), "flier", None)
    before = model.params.state()
    eng.phase_g(0)
    return model, before


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_joint_phase_routes_updates_by_alpha(ep4, alpha):
    model, before = phase_g_grads(ep4, alpha)
    after = model.params.state()
    img = model.group("image_encoder") + model.group("probe_v")
    lat = model.group("latent_encoder") + model.group("probe_l")
    img_moved = any(not np.array_equal(before[k], after[k]) for k in img)
    lat_moved = any(not np.array_equal(before[k], after[k]) for k in lat)
    assert img_moved == (alpha < 1.0)
    assert lat_moved == (alpha > 0.0)
    if alpha == 1.0:
        assert all(not np.any(model.params[k].grad) for k in img)
    if alpha == 0.0:
        assert all(not np.any(model.params[k].grad) for k in lat)


def test_probe_gradient_scales_with_alpha(ep4):
    # one-batch gradient of the joint loss w.r.t. each probe scales with its weight
    def grads(alpha):
        model = build_model(ep4.n_classes, 0)
        with Tape() as tape:
            lv = smoothed_ce(model.image_logits(Tensor(ep4.generated_images)), ep4.generated_labels, 0.1)
            ll = smoothed_ce(model.latent_logits(Tensor(ep4.latents)), ep4.generated_labels, 0.1)
            loss = joint_loss(lv, ll, alpha)
        tape.backward(loss)
        return model.params["probe_v.weight"].grad, model.params["probe_l.weight"].grad

    v1, l1 = grads(0.25)
    v2, l2 = grads(0.75)
    np.testing.assert_allclose(v1 / 0.75, v2 / 0.25, rtol=1e-10)
    np.testing.assert_allclose(l1 / 0.25, l2 / 0.75, rtol=1e-10)


def test_training_reduces_loss(ep4):
    report, _ = train_flier(ep4, build_model(3, 0), quick(epochs=8))
    lv = report.losses("loss_v")
    assert lv[-1] < lv[0]
    assert report.losses("loss_g")[-1] < report.losses("loss_g")[0]
    # 12 images per collection: one batch in each phase per epoch
    assert report.steps == 8 * 2


def test_training_is_deterministic(ep4, test_split):
    a, ea = train_flier(ep4, build_model(3, 1), quick(seed=1, augment=("crop", "color")), test_split)
    b, eb = train_flier(ep4, build_model(3, 1), quick(seed=1, augment=("crop", "color")), test_split)
    assert a.to_dict() == b.to_dict()
    for k in ea.shadow:
        assert ea.shadow[k].tobytes() == eb.shadow[k].tobytes()


def test_finetune_equals_flier_without_joint_phase(ep4, test_split):
    m1, m2 = build_model(3, 2), build_model(3, 2)
    r1, _ = train_baseline_finetune(ep4, m1, quick(), use_generated=False, test=test_split)
    r2, _ = train_flier(ep4, m2, quick(), test=test_split, skip_phase_g=True)
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    assert r1.best.top1 == r2.best.top1


def test_augdata_equals_flier_at_alpha_zero(ep4):
    m1, m2 = build_model(3, 3), build_model(3, 3)
    before = m2.params.state()
    r1, _ = train_baseline_finetune(ep4, m1, quick(), use_generated=True)
    r2, _ = train_flier(ep4, m2, quick(alpha=0.0))
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    # the latent half never moves at alpha = 0
    for k in m2.group("latent_encoder") + m2.group("probe_l"):
        assert m2.params[k].data.tobytes() == before[k].tobytes()
    assert r1.losses("loss_vp") == r2.losses("loss_vp")
    assert r1.losses("loss_lgp") == [None, None] and None not in r2.losses("loss_lgp")


def test_augdata_without_generated_images_is_an_error(ep4):
    empty = Episode(4, 3, ep4.train_images, ep4.train_labels, np.zeros((0, 3, 32, 32)),
                    np.zeros(0, dtype=np.int64), np.zeros((0, 4, 4, 4)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="generated"):
        train_baseline_finetune(empty, build_model(3, 0), quick(), use_generated=True)


def test_low_shot_epochs_double(tiny_ds, tiny_cache):
    ep1 = sample_episode(tiny_ds, tiny_cache, 1, seed=0)
    report, _ = train_baseline_finetune(ep1, build_model(3, 0), quick(epochs=3), False)
    assert len(report.epochs) == 6


def test_phase_order_changes_the_result(ep4):
    m1, m2 = build_model(3, 0), build_model(3, 0)
    train_flier(ep4, m1, quick())
    train_flier(ep4, m2, quick(phase_order="G-first"))
    assert any(not np.array_equal(m1.params[k].data, m2.params[k].data) for k in m1.params)


def test_divergence_is_reported(ep4):
    bad = Episode(4, 3, ep4.train_images * np.nan, ep4.train_labels, ep4.generated_images,
                  ep4.generated_labels, ep4.latents, ep4.generated_seeds)
    with pytest.raises(TrainingDivergence, match="epoch 0, phase V"):
        train_flier(bad, build_model(3, 0), quick())


def test_separable_two_class_finetune_is_perfect():
    ds = make_synthetic_dataset(2, per_class_train=16, per_class_test=20, noise=0.0,
                                per_class_pretrain=1, seed=4)
    ep = Episode(16, 2, ds.images("train"), ds.labels("train"), np.zeros((0, 3, 32, 32)),
                 np.zeros(0, dtype=np.int64), np.zeros((0, 4, 4, 4)), np.zeros(0, dtype=np.int64))
    report, _ = train_baseline_finetune(ep, build_model(2, 0), quick(epochs=15), False,
                                        test=(ds.images("test"), ds.labels("test")))
    assert report.best.top1 == 1.0


def test_best_prefers_raw_on_ties(ep4, test_split):
    report, _ = train_flier(ep4, build_model(3, 0), quick(ema_momentum=0.0), test_split)
    # momentum 0 makes the shadow equal the raw weights
    assert report.final_raw.top1 == report.final_ema.top1
    assert report.best.weights_used == "raw"


def test_checkpoint_round_trip(ep4, test_split, tmp_path):
    model = build_model(3, 0)
    report, ema = train_flier(ep4, model, quick(), test_split)
    save_checkpoint(tmp_path / "m.ckpt", model, ema, report)
    back, back_ema, meta = load_checkpoint(tmp_path / "m.ckpt")
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert back_ema.shadow[k].tobytes() == ema.shadow[k].tobytes()
    assert meta["report"] == report.to_dict()
    save_checkpoint(tmp_path / "again.ckpt", back, back_ema, report)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
