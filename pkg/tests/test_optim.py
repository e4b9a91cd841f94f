import numpy as np
import numpy.testing as npt
import pytest

from mvtcl import data as D, losses as L, model as M, optim as O
from mvtcl.errors import ContractViolation, NumericError


def tiny_net(seed=0, num_classes=3, num_domains=1):
    return M.init_params(seed, 4, [6], [5], 4, num_classes, num_domains)


def params_snapshot(params):
    return [a.copy() for a in params.arrays()]


def params_equal(snap, params):
    return all(np.array_equal(a, b) for a, b in zip(snap, params.arrays()))


# ---------------------------------------------------------------------------
# SGD step

def test_sgd_plain_gradient_descent():
    params = tiny_net()
    grads = M.zero_grads(params)
    grads.classifier_w += 1.0
    state = O.OptimizerState.for_params(params)
    cfg = O.SgdConfig(lr_pre_pool=0.1, lr_post_pool=0.1, momentum=0.0, weight_decay=0.0)
    before = params.classifier_w.copy()
    O.sgd_step(params, grads, state, cfg)
    npt.assert_allclose(params.classifier_w, before - 0.1)


def test_sgd_zero_gradient_is_noop():
    params = tiny_net()
    snap = params_snapshot(params)
    state = O.OptimizerState.for_params(params)
    cfg = O.SgdConfig(momentum=0.9, weight_decay=0.0)
    O.sgd_step(params, M.zero_grads(params), state, cfg)
    assert params_equal(snap, params)


def test_sgd_momentum_recurrence():
    # theta=1, g=1, lr=0.1, mu=0.9: 1 -> 0.9 -> 0.71 (v: 1 then 1.9)
    params = tiny_net()
    params.classifier_w[...] = 1.0
    grads = M.zero_grads(params)
    grads.classifier_w[...] = 1.0
    state = O.OptimizerState.for_params(params)
    cfg = O.SgdConfig(lr_pre_pool=0.1, lr_post_pool=0.1, momentum=0.9, weight_decay=0.0)
    O.sgd_step(params, grads, state, cfg)
    npt.assert_allclose(params.classifier_w, 0.9)
    O.sgd_step(params, grads, state, cfg)
    npt.assert_allclose(params.classifier_w, 0.71)


def test_sgd_uses_two_learning_rate_groups():
    params = tiny_net()
    grads = M.zero_grads(params)
    for a in grads.arrays():
        a[...] = 1.0
    snap = params_snapshot(params)
    state = O.OptimizerState.for_params(params)
    cfg = O.SgdConfig(lr_pre_pool=1e-4, lr_post_pool=1e-1,
                      momentum=0.0, weight_decay=0.0)
    O.sgd_step(params, grads, state, cfg)
    enc_delta = np.abs(params.view_encoders[0].weights[0]
                       - snap[0]).max()
    cls_delta = np.abs(params.classifier_w - snap[-2]).max()
    npt.assert_allclose(enc_delta, 1e-4)
    npt.assert_allclose(cls_delta, 1e-1)


# ---------------------------------------------------------------------------
# Center update

def test_center_update_clips_then_scales():
    centers = L.CenterBank(np.zeros((2, 1)))
    cfg = O.CenterUpdateConfig(lr_centers=0.1, clip=0.01)
    O.apply_center_update(centers, np.array([[0.75], [0.0]]), cfg)
    npt.assert_allclose(centers.centers, [[0.001], [0.0]])


def test_center_update_pass_through_region():
    centers = L.CenterBank(np.zeros((1, 2)))
    cfg = O.CenterUpdateConfig(lr_centers=0.1, clip=0.01)
    O.apply_center_update(centers, np.array([[-0.004, 0.0]]), cfg)
    npt.assert_allclose(centers.centers, [[-0.0004, 0.0]])


def test_center_update_zero_is_noop():
    centers = L.CenterBank(np.ones((2, 2)))
    O.apply_center_update(centers, np.zeros((2, 2)), O.CenterUpdateConfig())
    npt.assert_array_equal(centers.centers, np.ones((2, 2)))


def test_center_never_moves_more_than_lr_times_clip():
    rng = np.random.default_rng(0)
    centers = L.CenterBank(rng.normal(size=(4, 3)))
    cfg = O.CenterUpdateConfig(lr_centers=0.1, clip=0.01)
    before = centers.centers.copy()
    O.apply_center_update(centers, rng.normal(size=(4, 3)) * 10, cfg)
    assert np.abs(centers.centers - before).max() <= 0.1 * 0.01 + 1e-15


# ---------------------------------------------------------------------------
# Training loop

def toy_dataset(seed=0, num_classes=3):
    spec = D.DatasetSpec(num_classes=num_classes, subcats_per_class=1,
                         views_per_object=2, view_dim=4, train_per_class=8,
                         test_per_class=2, sigma_proto=1.0, sigma_subcat=0.0,
                         sigma_object=0.05, sigma_view=0.02, seed=seed)
    return D.generate(spec)


def run_training(kind="tcl+softmax", epochs=3, seed=0, lam=0.01, **train_kw):
    split = toy_dataset()
    params = tiny_net(seed=seed)
    centers = L.CenterBank.init_gaussian(3, params.embed_dim, seed + 1)
    loss_cfg = L.LossConfig(kind=kind, lam=lam)
    stats = O.train(params, centers, split.train, loss_cfg, O.SgdConfig(),
                    O.CenterUpdateConfig(), epochs=epochs, batch_size=8,
                    seed=seed, **train_kw)
    return params, centers, stats


def test_train_zero_epochs_is_noop():
    split = toy_dataset()
    params = tiny_net()
    snap = params_snapshot(params)
    centers = L.CenterBank.init_gaussian(3, params.embed_dim, 1)
    c_snap = centers.centers.copy()
    stats = O.train(params, centers, split.train, L.LossConfig(),
                    O.SgdConfig(), O.CenterUpdateConfig(), epochs=0, seed=0)
    assert params_equal(snap, params)
    assert np.array_equal(c_snap, centers.centers)
    assert stats.total_loss == []


def test_train_deterministic_bitwise():
    p1, c1, s1 = run_training(epochs=3, seed=5)
    p2, c2, s2 = run_training(epochs=3, seed=5)
    assert params_equal(params_snapshot(p1), p2)
    assert np.array_equal(c1.centers, c2.centers)
    assert s1.total_loss == s2.total_loss
    assert s1.accuracy == s2.accuracy


def test_lambda_zero_matches_pure_softmax_bitwise():
    p_sm, _, s_sm = run_training(kind="softmax", epochs=3, seed=2)
    p_j, c_j, s_j = run_training(kind="tcl+softmax", lam=0.0, epochs=3, seed=2)
    assert params_equal(params_snapshot(p_sm), p_j)
    assert s_sm.total_loss == s_j.total_loss
    # centers still evolved under the joint config
    init = L.CenterBank.init_gaussian(3, p_j.embed_dim, 3)
    assert not np.array_equal(c_j.centers, init.centers)


def test_train_skips_degenerate_triplet_batches():
    objs = []
    rng = np.random.default_rng(0)
    for i in range(5):
        objs.append(D.MultiViewObject(id=f"a{i}", label=0, subcat=0, domain=0,
                                      views=rng.normal(size=(1, 4))))
    objs.append(D.MultiViewObject(id="b0", label=1, subcat=0, domain=0,
                                  views=rng.normal(size=(1, 4))))
    params = tiny_net(num_classes=2)
    centers = L.CenterBank.init_gaussian(2, params.embed_dim, 0)
    stats = O.train(params, centers, objs, L.LossConfig(kind="triplet"),
                    O.SgdConfig(), O.CenterUpdateConfig(), epochs=2,
                    batch_size=3, seed=0)
    assert stats.skipped_batches >= 1


def test_train_rejects_bad_inputs():
    params = tiny_net()
    centers = L.CenterBank.init_gaussian(3, params.embed_dim, 0)
    with pytest.raises(ContractViolation):
        O.train(params, centers, [], L.LossConfig(), O.SgdConfig(),
                O.CenterUpdateConfig(), epochs=1)
    split = toy_dataset()
    with pytest.raises(ContractViolation):
        O.train(params, centers, split.train, L.LossConfig(), O.SgdConfig(),
                O.CenterUpdateConfig(), epochs=1, batch_size=1)


def test_train_aborts_on_divergence():
    split = toy_dataset()
    params = tiny_net()
    centers = L.CenterBank.init_gaussian(3, params.embed_dim, 0)
    bad = O.SgdConfig(lr_pre_pool=1e14, lr_post_pool=1e14,
                      momentum=0.9, weight_decay=1.0)
    with pytest.raises(NumericError):
        O.train(params, centers, split.train, L.LossConfig(kind="tcl+softmax"),
                bad, O.CenterUpdateConfig(), epochs=60, batch_size=8, seed=0)


def test_training_smoke_separable_classes():
    # linearly separable 3-class toy set: joint supervision reaches perfect
    # training accuracy and drives the metric component below its start
    params, centers, stats = run_training(kind="tcl+softmax", epochs=30, seed=0)
    assert stats.accuracy[-1] == 1.0
    assert stats.metric_loss[-1] < stats.metric_loss[0]
