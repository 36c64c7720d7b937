import math

import numpy as np
import pytest

import vmfd.trainer as trainer_mod
from vmfd.synthdata import SceneConfig, generate_dataset
from vmfd.trainer import (
    METRIC_COLUMNS,
    CrossModalDistiller,
    LinearProbe,
    TrainConfig,
    cosine_lr,
    evaluate,
    init_state,
    linear_probe,
    per_class_iou,
    prepare_scenes,
    sgd_step,
    train,
    train_epoch,
    variance_metrics,
)
from vmfd.utils.validation import DegenerateInputError


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(SceneConfig(seed=0, num_scenes=3, num_eval_scenes=1))


# ---- schedule and optimizer ---------------------------------------------------------------

def test_cosine_lr_examples():
    assert cosine_lr(0, 10, 0.05) == 0.05
    assert cosine_lr(10, 10, 0.05) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(5, 10, 0.05) == pytest.approx(0.025)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.05)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.05)


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.array([0.5, 0.5])}, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p["w"], [0.95, -2.05])


def test_sgd_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_two_step_trace():
    p = {"w": np.array([1.0])}
    state = {}
    lr, mom, wd = 0.1, 0.9, 0.01
    # step 1: v = 0.5 + 0.01*1 = 0.51; w = 1 - 0.051 = 0.949
    sgd_step(p, {"w": np.array([0.5])}, state, lr, mom, wd)
    assert p["w"][0] == pytest.approx(0.949, abs=1e-15)
    # step 2: v = 0.9*0.51 + (-0.2 + 0.01*0.949) = 0.26849; w = 0.949 - 0.026849 = 0.922151
    sgd_step(p, {"w": np.array([-0.2])}, state, lr, mom, wd)
    assert state["w"][0] == pytest.approx(0.26849, abs=1e-15)
    assert p["w"][0] == pytest.approx(0.922151, abs=1e-15)


def test_sgd_decays_parameters_without_gradient():
    p = {"a": np.array([2.0]), "b": np.array([2.0])}
    sgd_step(p, {"a": np.array([0.0])}, {}, lr=0.5, momentum=0.0, weight_decay=0.1)
    np.testing.assert_allclose([p["a"][0], p["b"][0]], [1.9, 1.9])


def test_sgd_rejects_non_finite():
    p = {"w": np.array([1.0])}
    with pytest.raises(FloatingPointError, match="w"):
        sgd_step(p, {"w": np.array([np.nan])}, {}, lr=0.1)


def test_train_config_validation():
    for bad in (dict(lr0=0), dict(momentum=1.0), dict(weight_decay=-1), dict(lambda2=-0.1),
                dict(tau=0), dict(sampling_mode="x"), dict(bandwidth_mode="fixed", bandwidth=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.tau, c.alpha, c.c, c.c3d, c.lr0, c.momentum, c.weight_decay, c.epochs) == (
        0.07, 0.99, 8, 16, 0.05, 0.9, 1e-4, 50)
    assert (c.lambda1, c.lambda2, c.lambda3, c.kappa_max) == (1.0, 1.0, 1.0, None)


# ---- metrics ----------------------------------------------------------------------------------

def test_variance_identical_features():
    x = np.tile([[0.0, 1.0]], (6, 1))
    assert variance_metrics(x, [0, 0, 0, 1, 1, 1]) == (0.0, 0.0)


def test_variance_antipodal():
    x = np.array([[1.0, 0.0]] * 3 + [[-1.0, 0.0]] * 3)
    sw, sb = variance_metrics(x, [0, 0, 0, 1, 1, 1])
    assert sw == 0.0 and sb == pytest.approx(1.0)


def test_variance_two_pass_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 3))
    y = rng.integers(0, 3, 40)
    within, means = [], []
    for k in range(3):
        rows = [x[i] for i in range(40) if y[i] == k]
        m = [sum(r[j] for r in rows) / len(rows) for j in range(3)]
        means.append(m)
        within.append(sum(sum((r[j] - m[j]) ** 2 for j in range(3)) for r in rows) / len(rows))
    g = [sum(x[i][j] for i in range(40)) / 40 for j in range(3)]
    between = sum(sum((m[j] - g[j]) ** 2 for j in range(3)) for m in means) / 3
    sw, sb = variance_metrics(x, y)
    assert sw == pytest.approx(sum(within) / 3, rel=1e-12)
    assert sb == pytest.approx(between, rel=1e-12)


def test_variance_degenerate():
    with pytest.raises(DegenerateInputError):
        variance_metrics(np.zeros((3, 2)), [0, 0, 0])


def test_probe_separable():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-3, 0.3, (50, 2)), rng.normal(3, 0.3, (50, 2))])
    y = np.repeat([0, 1], 50)
    assert linear_probe(x, y)["accuracy"] == 1.0


def test_probe_chance_on_shuffled_labels():
    rng = np.random.default_rng(2)
    K, n = 4, 4000
    x = rng.standard_normal((n, 8))
    y = rng.integers(0, K, n)
    acc = linear_probe(x[: n // 2], y[: n // 2], x[n // 2:], y[n // 2:])["accuracy"]
    assert abs(acc - 1 / K) <= 3 * math.sqrt((1 / K) * (1 - 1 / K) / (n // 2))


def test_probe_constant_features():
    x = np.ones((10, 3))
    y = np.array([0] * 6 + [1] * 3 + [2])
    res = linear_probe(x, y)
    assert res["per_class_iou"][1] == 0.0 and res["per_class_iou"][2] == 0.0
    assert res["per_class_iou"][0] == pytest.approx(0.6)


def test_probe_single_class_error():
    with pytest.raises(DegenerateInputError):
        LinearProbe().fit(np.ones((4, 2)), [1, 1, 1, 1])


def test_per_class_iou():
    iou = per_class_iou(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 3)
    np.testing.assert_allclose(iou[:2], [0.5, 2 / 3])
    assert math.isnan(iou[2])


# ---- training loop ------------------------------------------------------------------------------

def test_epoch_record_columns_and_determinism(small_data):
    train_scenes, _ = small_data
    cfg = TrainConfig(epochs=2, seed=3, m_s=64)
    _, h1 = train(train_scenes, cfg)
    _, h2 = train(train_scenes, cfg)
    assert h1 == h2
    assert tuple(h1[0].keys()) == METRIC_COLUMNS


def test_baseline_degeneration(small_data):
    train_scenes, _ = small_data
    _, hist = train(train_scenes, TrainConfig(epochs=2, seed=0, lambda2=0.0, lambda3=0.0,
                                              sampling_mode="random", m_s=64))
    for rec in hist:
        assert rec["total"] == pytest.approx(rec["ppnce"], rel=1e-12)
        assert rec["grad_norm_sem"] == 0.0


def test_stage_ordering(small_data, monkeypatch):
    """vMF targets used by the KL term stay fixed for a whole epoch, even if the EMA is tampered with."""
    train_scenes, _ = small_data
    cfg = TrainConfig(epochs=1, seed=0, m_s=64)
    prepared = prepare_scenes(train_scenes, cfg)
    first = train_scenes[0]
    state, rng = init_state(cfg, 6, first.pixel_descriptors.shape[-1], first.num_classes, 6)
    seen = []
    real_kl, real_ema = trainer_mod.kl_vmf_loss, trainer_mod.ema_update

    def spy_kl(g3d, labels, class_params, usable, **kw):
        seen.append(([p.mu.copy() for p in class_params], [p.kappa for p in class_params], usable.copy()))
        return real_kl(g3d, labels, class_params, usable, **kw)

    def sentinel_ema(stats, means, counts):
        real_ema(stats, means, counts)
        stats.zbar[:] = 0.0
        stats.zbar[:, 0] = 0.5   # sentinel statistic
        return stats

    monkeypatch.setattr(trainer_mod, "kl_vmf_loss", spy_kl)
    monkeypatch.setattr(trainer_mod, "ema_update", sentinel_ema)
    train_epoch(prepared, state, cfg, rng)
    assert len(seen) == 3
    for mus, kappas, usable in seen[1:]:
        assert not usable.any()           # still the epoch-start (empty) statistics
        assert kappas == seen[0][1]
    seen.clear()
    train_epoch(prepared, state, cfg, rng)
    mus, kappas, usable = seen[0]
    assert usable.all()
    assert all(np.allclose(mu, np.eye(cfg.c)[0]) for mu in mus)
    assert all(k == pytest.approx(0.5 * (cfg.c - 0.25) / 0.75) for k in kappas)


def test_loss_moving_average_non_increasing():
    train_scenes, _ = generate_dataset(SceneConfig(seed=0))
    _, hist = train(train_scenes, TrainConfig(seed=0))
    total = np.array([r["total"] for r in hist])
    ma = np.convolve(total, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(ma) <= 1e-12), np.diff(ma).max()


def test_evaluate_reports_probe_and_spread(small_data):
    train_scenes, eval_scenes = small_data
    state, _ = train(train_scenes, TrainConfig(epochs=1, seed=0, m_s=64))
    res = evaluate(state.model, eval_scenes)
    assert set(res) == {"accuracy", "per_class_iou", "miou", "sigma_w_sq", "sigma_b_sq"}
    assert 0.0 <= res["accuracy"] <= 1.0 and len(res["per_class_iou"]) == 6


def test_estimator_wrapper(small_data):
    train_scenes, eval_scenes = small_data
    est = CrossModalDistiller(epochs=1, m_s=64, seed=1)
    est.fit(train_scenes)
    feats = est.transform(eval_scenes[0].point_descriptors)
    assert feats.shape == (4096, 16)
    emb = est.embed(eval_scenes[0].point_descriptors)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0)
    assert 0.0 <= est.score(eval_scenes) <= 1.0
    assert est.get_config() == TrainConfig(epochs=1, m_s=64, seed=1)
    assert len(est.history_) == 1
