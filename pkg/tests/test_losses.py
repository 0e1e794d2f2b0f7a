import math

import numpy as np
import pytest

from agcrf import oracle
from agcrf import tensor as tt
from agcrf.losses import balanced_bce, ce_loss, l2_loss, softmax_probs
from agcrf.tensor import Tape, Tensor


def test_balanced_bce_four_pixel_hand_case():
    pred = Tensor(np.array([[[0.9, 0.8, 0.3, 0.1]]]))
    target = np.array([[[1.0, 1.0, 0.0, 0.0]]])
    want = -0.5 * (math.log(0.9) + math.log(0.8)) - 0.5 * (math.log(0.7) + math.log(0.9))
    assert abs(float(balanced_bce(pred, target).data) - want) < 1e-12


def test_balanced_bce_half_positive_is_half_standard_bce():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(1, 4, 4))
    t = np.zeros((1, 4, 4))
    t[0, :2] = 1.0  # beta = 0.5 exactly
    standard = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum()
    got = float(balanced_bce(Tensor(p), t).data)
    assert abs(got - 0.5 * standard) < 1e-10


def test_balanced_bce_perfect_prediction_near_zero():
    t = np.zeros((1, 3, 3))
    t[0, 0, :] = 1.0
    p = t.copy()  # exact 0/1 probabilities, clamped internally
    loss = float(balanced_bce(Tensor(p), t).data)
    assert 0.0 <= loss <= 2.8e-11 * t.size


def test_balanced_bce_rejects_non_binary_target():
    with pytest.raises(ValueError, match="binary"):
        balanced_bce(Tensor(np.full((1, 2, 2), 0.5)), np.full((1, 2, 2), 0.25))


def test_balanced_bce_permutation_invariant_and_additive():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, size=(1, 3, 4))
    t = (rng.uniform(size=(1, 3, 4)) < 0.4).astype(float)
    base = float(balanced_bce(Tensor(p), t).data)

    perm = rng.permutation(12)
    p2 = p.reshape(-1)[perm].reshape(1, 3, 4)
    t2 = t.reshape(-1)[perm].reshape(1, 3, 4)
    assert abs(float(balanced_bce(Tensor(p2), t2).data) - base) < 1e-12

    doubled = float(balanced_bce(Tensor(np.stack([p, p])), np.stack([t, t])).data)
    assert abs(doubled - 2.0 * base) < 1e-12


def test_balanced_bce_beta_zero_drops_positive_term():
    rng = np.random.default_rng(2)
    p = tt.parameter(rng.uniform(0.1, 0.9, size=(1, 3, 3)))
    t = np.zeros((1, 3, 3))  # beta = 0
    with Tape() as tape:
        loss = balanced_bce(p, t)
    tape.backward(loss)
    # gradient is exactly the negative-term gradient everywhere
    want = (1.0 - 0.0) * (1.0 - t) / (1.0 - p.data)
    assert np.abs(p.grad - want).max() < 1e-12


def test_balanced_bce_hed_flag_swaps_weights():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 0.9, size=(1, 4, 4))
    t = (rng.uniform(size=(1, 4, 4)) < 0.25).astype(float)
    beta = t.sum() / t.size
    pos = -(t * np.log(p)).sum()
    neg = -((1 - t) * np.log(1 - p)).sum()
    assert abs(float(balanced_bce(Tensor(p), t).data) - (beta * pos + (1 - beta) * neg)) < 1e-10
    assert abs(float(balanced_bce(Tensor(p), t, hed_beta=True).data) - ((1 - beta) * pos + beta * neg)) < 1e-10


def test_l2_loss_basics():
    rng = np.random.default_rng(4)
    t = rng.normal(size=(1, 4, 4))
    assert float(l2_loss(Tensor(t.copy()), t).data) == 0.0
    assert abs(float(l2_loss(Tensor(t + 0.7), t).data) - 0.49) < 1e-12


def test_l2_loss_masked_matches_scalar_loop():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(1, 3, 5))
    t = rng.normal(size=(1, 3, 5))
    m = rng.uniform(size=(1, 3, 5)) < 0.6
    got = float(l2_loss(Tensor(p), t, mask=m).data)
    acc, n = 0.0, 0
    for i in range(3):
        for j in range(5):
            if m[0, i, j]:
                acc += (p[0, i, j] - t[0, i, j]) ** 2
                n += 1
    assert abs(got - acc / n) < 1e-12


def test_ce_loss_uniform_logits_is_log_k():
    for k in (2, 3, 5):
        logits = Tensor(np.zeros((k, 3, 3)))
        labels = np.zeros((3, 3), dtype=int)
        assert abs(float(ce_loss(logits, labels).data) - math.log(k)) < 1e-12


def test_ce_loss_confident_correct_is_tiny():
    logits = np.zeros((3, 2, 2))
    labels = np.array([[0, 1], [2, 0]])
    for y in range(2):
        for x in range(2):
            logits[labels[y, x], y, x] = 50.0
    assert float(ce_loss(Tensor(logits), labels).data) < 1e-12


def test_ce_loss_matches_scalar_loop_with_ignore():
    rng = np.random.default_rng(6)
    k = 4
    logits = rng.normal(size=(k, 3, 4))
    labels = rng.integers(0, k, size=(3, 4))
    labels[0, 0] = -1
    got = float(ce_loss(Tensor(logits), labels).data)
    acc, n = 0.0, 0
    for y in range(3):
        for x in range(4):
            if labels[y, x] == -1:
                continue
            z = logits[:, y, x]
            acc += -(z[labels[y, x]] - math.log(sum(math.exp(v) for v in z)))
            n += 1
    assert abs(got - acc / n) < 1e-10


def test_softmax_probs_sums_to_one():
    rng = np.random.default_rng(7)
    probs = softmax_probs(rng.normal(size=(5, 3, 3)) * 10)
    assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-12


def _fd_check(build, param, seed, step=1e-5, tol=1e-4):
    with Tape() as tape:
        loss = build(param)
    tape.backward(loss)
    g_ad = param.grad.copy()
    base = param.data.copy()

    def loss_at(v):
        param.data = v.reshape(base.shape)
        out = float(build(param).data)
        param.data = base
        return out

    g_fd = oracle.fd_gradient(loss_at, base.ravel(), step=step).reshape(base.shape)
    rel = np.abs(g_ad - g_fd) / np.maximum.reduce([np.ones_like(g_ad), np.abs(g_ad), np.abs(g_fd)])
    assert rel.max() < tol


def test_balanced_bce_gradient_through_sigmoid():
    rng = np.random.default_rng(8)
    t = (rng.uniform(size=(1, 4, 4)) < 0.3).astype(float)
    param = tt.parameter(rng.normal(size=(1, 4, 4)))
    _fd_check(lambda p: balanced_bce(tt.sigmoid(p), t), param, seed=9)


def test_l2_gradient():
    rng = np.random.default_rng(10)
    t = rng.normal(size=(1, 4, 4))
    m = rng.uniform(size=(1, 4, 4)) < 0.7
    param = tt.parameter(rng.normal(size=(1, 4, 4)))
    _fd_check(lambda p: l2_loss(p, t, mask=m), param, seed=11)


def test_ce_gradient():
    rng = np.random.default_rng(12)
    labels = rng.integers(0, 3, size=(4, 4))
    labels[1, 1] = -1
    param = tt.parameter(rng.normal(size=(3, 4, 4)))
    _fd_check(lambda p: ce_loss(p, labels), param, seed=13)
