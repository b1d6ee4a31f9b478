import numpy as np
import pytest

import oracles
from pls_reid.errors import DimensionMismatchError, InvalidParameterError, MalformedFileError, StaleActivationError
from pls_reid.loss import hsoften_loss, overall_loss
from pls_reid.model import (
    EVAL,
    TRAIN,
    AdamState,
    Gradients,
    Trace,
    adam_step,
    backward,
    classify,
    embed,
    init_model,
    input_statistics,
    load_checkpoint,
    restore,
    save_checkpoint,
    snapshot,
)


def scalar_of_model(params, x, w_emb, w_logit, seed=11):
    """Fixed linear functional of embeddings and logits from fresh TRAIN passes."""
    p = params.copy()
    tr = Trace()
    e = embed(p, x, TRAIN, tr)
    z = classify(p, e, TRAIN, seed, tr)
    return float(np.sum(w_emb * e) + np.sum(w_logit * z)), p, tr


def test_init_is_deterministic_and_defaults():
    a, _ = init_model(5, (7,), 4, 3, seed=3)
    b, _ = init_model(5, (7,), 4, 3, seed=3)
    assert a.fingerprint() == b.fingerprint()
    assert a.dropout_rate == 0.5
    assert init_model(5, seed=4)[0].fingerprint() != a.fingerprint()


def test_init_rejects_bad_arguments():
    with pytest.raises(InvalidParameterError):
        init_model(4, dropout_rate=1.0)
    with pytest.raises(InvalidParameterError):
        init_model(4, activation="gelu")
    with pytest.raises(InvalidParameterError):
        init_model(0)


def test_zero_network_embeds_to_zero():
    p, _ = init_model(3, (4,), 2, 2)
    for w in p.weights:
        w[:] = 0
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.all(embed(p, x) == 0)


def test_eval_mode_is_deterministic():
    p, _ = init_model(4, (6,), 3, 2, seed=1)
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert np.array_equal(embed(p, x), embed(p, x))
    e = embed(p, x)
    assert np.array_equal(classify(p, e), classify(p, e))


def test_identity_head_passes_embeddings_through():
    p, _ = init_model(3, (4,), 4, 2, dropout_rate=0.0)
    p.head = np.eye(4)[:, :2]
    e = np.random.default_rng(2).normal(size=(3, 4))
    # identity batchnorm state: running mean 0, variance 1
    assert np.allclose(classify(p, e, EVAL), e[:, :2] / np.sqrt(1 + 1e-5))


def test_embed_rejects_wrong_width():
    p, _ = init_model(4)
    with pytest.raises(DimensionMismatchError):
        embed(p, np.zeros((2, 5)))


def test_input_standardization_preserves_geometry():
    rng = np.random.default_rng(3)
    x = rng.normal(loc=5, scale=[1, 4, 9], size=(50, 3))
    shift, scale = input_statistics(x)
    z = (x - shift) / scale
    assert np.allclose(z.mean(axis=0), 0)
    assert np.mean(z**2) == pytest.approx(1.0)
    # a single global scale keeps distance ratios
    d = lambda a: np.linalg.norm(a[0] - a[1]) / np.linalg.norm(a[2] - a[3])
    assert d(z) == pytest.approx(d(x))


def test_train_mode_updates_running_stats_with_unbiased_variance():
    p, _ = init_model(2, (3,), 2, 2, seed=0)
    e = np.random.default_rng(4).normal(size=(6, 2))
    classify(p, e, TRAIN, dropout_seed=0)
    assert np.allclose(p.running_mean, 0.1 * e.mean(axis=0))
    assert np.allclose(p.running_var, 0.9 + 0.1 * e.var(axis=0, ddof=1))


def test_train_mode_requires_dropout_seed():
    p, _ = init_model(2, (3,), 2, 2)
    with pytest.raises(InvalidParameterError):
        classify(p, np.zeros((2, 2)), TRAIN)


def test_dropout_is_inverted_and_seeded():
    p, _ = init_model(2, (3,), 8, 2, dropout_rate=0.5)
    tr1, tr2 = Trace(), Trace()
    e = np.random.default_rng(5).normal(size=(400, 8))
    classify(p.copy(), e, TRAIN, 9, tr1)
    classify(p.copy(), e, TRAIN, 9, tr2)
    assert np.array_equal(tr1.mask, tr2.mask)
    assert set(np.unique(tr1.mask)) <= {0.0, 2.0}
    assert tr1.mask.mean() == pytest.approx(1.0, abs=0.05)


def test_backward_without_trace_is_stale():
    p, _ = init_model(2)
    with pytest.raises(StaleActivationError):
        backward(p, Trace(), grad_embeddings=np.zeros((1, 32)))


def test_zero_output_gradient_gives_zero_parameter_gradients():
    p, _ = init_model(3, (4,), 2, 2, seed=1)
    x = np.random.default_rng(6).normal(size=(4, 3))
    tr = Trace()
    e = embed(p, x, TRAIN, tr)
    classify(p, e, TRAIN, 0, tr)
    g = backward(p, tr, np.zeros((4, 2)), np.zeros((4, 2)))
    assert all(np.all(a == 0) for _, a in g.named_arrays())


def test_single_linear_layer_gradient_is_outer_product():
    p, _ = init_model(3, (), 2, 2, seed=2)
    x = np.random.default_rng(7).normal(size=(4, 3))
    tr = Trace()
    embed(p, x, TRAIN, tr)
    go = np.random.default_rng(8).normal(size=(4, 2))
    g = backward(p, tr, grad_embeddings=go)
    assert np.allclose(g.weights[0], x.T @ go)
    assert np.allclose(g.biases[0], go.sum(axis=0))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_full_network_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(9)
    D, E, C, n = 4, 3, 5, 6
    params, _ = init_model(D, (5,), E, C, seed=1, activation=activation,
                           input_stats=(rng.normal(size=D), 1.7))
    params.bn_scale = rng.normal(size=E)
    params.bn_bias = rng.normal(size=E)
    x = rng.normal(size=(n, D))
    w_emb, w_logit = rng.normal(size=(n, E)), rng.normal(size=(n, C))

    _, p, tr = scalar_of_model(params, x, w_emb, w_logit)
    grads = backward(p, tr, w_emb, w_logit)
    for name, arr in params.named_arrays():
        num = oracles.central_difference(lambda: scalar_of_model(params, x, w_emb, w_logit)[0], arr, h=1e-5)
        assert oracles.rel_error(dict(grads.named_arrays())[name], num) < 1e-4, name
    num_x = oracles.central_difference(lambda: scalar_of_model(params, x, w_emb, w_logit)[0], x, h=1e-5)
    assert oracles.rel_error(grads.inputs, num_x) < 1e-4


def test_model_composed_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    params, _ = init_model(4, (6,), 3, 4, seed=5)
    x = rng.normal(size=(6, 4))
    groups = np.array([0, 0, 1, 1, 2, 2])

    def loss(p):
        tr = Trace()
        e = embed(p, x, TRAIN, tr)
        z = classify(p, e, TRAIN, 3, tr)
        return overall_loss(e, groups, z, groups, alpha=2.0), tr

    p = params.copy()
    v, tr = loss(p)
    grads = dict(backward(p, tr, v.grad_embeddings, v.grad_logits).named_arrays())
    for name, arr in params.named_arrays():
        num = oracles.central_difference(lambda: loss(params.copy())[0].value, arr, h=1e-6)
        assert oracles.rel_error(grads[name], num) < 1e-4, name


def test_snapshot_isolation_and_restore():
    p, snap = init_model(3, (4,), 2, 2, seed=1)
    before = snap.params.fingerprint()
    for w in p.weights:
        w += 1.0
    assert snap.params.fingerprint() == before
    a, b = restore(snap), restore(snap)
    a.weights[0][0, 0] = 99
    assert b.fingerprint() == before
    assert snapshot(b).params is not b


def _train(params, x, steps=10):
    state = AdamState()
    for k in range(steps):
        tr = Trace()
        e = embed(params, x, TRAIN, tr)
        v = hsoften_loss(e, [0, 0, 1, 1], 1.0)
        adam_step(params, backward(params, tr, v.grad_embeddings), state)
    return params


def test_restore_then_identical_schedule_is_bitwise_identical():
    x = np.random.default_rng(11).normal(size=(4, 3))
    p, snap = init_model(3, (4,), 2, 2, seed=1)
    a = _train(restore(snap), x)
    b = _train(restore(snap), x)
    assert a.fingerprint() == b.fingerprint() != snap.params.fingerprint()


def test_adam_zero_gradient_leaves_params_unchanged():
    p, _ = init_model(3, (4,), 2, 2, seed=1)
    before = p.fingerprint()
    zeros = Gradients(*[[np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases]],
                      np.zeros_like(p.head), np.zeros_like(p.bn_scale), np.zeros_like(p.bn_bias))
    adam_step(p, zeros, AdamState())
    assert p.fingerprint() == before


def test_adam_uses_separate_learning_rates_and_descends():
    p, _ = init_model(2, (), 2, 2, seed=0)
    ones = Gradients([np.ones_like(p.weights[0])], [np.ones_like(p.biases[0])],
                     np.ones_like(p.head), np.ones_like(p.bn_scale), np.ones_like(p.bn_bias))
    w0, h0 = p.weights[0].copy(), p.head.copy()
    adam_step(p, ones, AdamState())
    # first bias-corrected Adam step moves every coordinate by ~lr
    assert np.allclose(w0 - p.weights[0], 0.00035, rtol=1e-4)
    assert np.allclose(h0 - p.head, 0.0035, rtol=1e-4)


def test_adam_step_reduces_quadratic_bowl():
    p, _ = init_model(2, (), 2, 2, seed=0)
    target = np.zeros_like(p.weights[0])
    f = lambda: float(np.sum((p.weights[0] - target) ** 2))
    before = f()
    g = Gradients([2 * (p.weights[0] - target)], [np.zeros(2)], np.zeros_like(p.head),
                  np.zeros(2), np.zeros(2))
    adam_step(p, g, AdamState(), lr_backbone=0.01)
    assert f() < before


def test_checkpoint_round_trip(tmp_path):
    p, _ = init_model(3, (4, 5), 2, 6, seed=2, activation="relu", input_stats=(np.arange(3.0), 2.5))
    p.running_var += 0.5
    save_checkpoint(p, tmp_path / "m.npz")
    q = load_checkpoint(tmp_path / "m.npz")
    assert q.fingerprint() == p.fingerprint()
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(embed(p, x), embed(q, x))


def test_corrupt_checkpoint_is_rejected(tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(MalformedFileError):
        load_checkpoint(tmp_path / "bad.npz")
