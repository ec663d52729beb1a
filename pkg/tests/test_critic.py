import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d2d import tape
from d2d.critic import (OVER, SATISFIED, UNDER, CriticConfig, LogitMatrix, critic_grad, critic_loss,
                        d2d_loss_on_tape, hard_count, logit_threshold, multi_critic_grad,
                        multi_critic_loss, per_class_counts, soft_count, soft_count_grad)

CFG = CriticConfig()
TZ = CFG.tau_z

logits = arrays(np.float64, st.integers(1, 12), elements=st.floats(-6, 4))


def test_logit_threshold_values():
    assert logit_threshold(0.5) == 0.0
    assert logit_threshold(0.2) == pytest.approx(-1.3862944, abs=1e-7)
    assert logit_threshold(0.8) == pytest.approx(1.3862944, abs=1e-7)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_logit_threshold_domain(tau):
    with pytest.raises(ValueError):
        logit_threshold(tau)


def test_config_validation():
    with pytest.raises(ValueError):
        CriticConfig(beta=0)
    assert CriticConfig(tau=0.5).tau_z == 0.0


def test_logit_matrix_shape():
    z = LogitMatrix(np.zeros((4, 3)))
    assert (z.n, z.m) == (4, 3)
    with pytest.raises(ValueError):
        LogitMatrix(np.array([[np.nan]]))


def test_soft_count_examples():
    assert soft_count(np.array([]), CFG) == 0.0
    assert soft_count(np.full(4, TZ), CFG) == 2.0
    assert soft_count(np.array([TZ + 1, TZ - 1]), CFG) == pytest.approx(1.0, abs=1e-12)


def test_hard_count_examples():
    assert hard_count(np.array([TZ + 0.5, TZ - 0.5, TZ + 2]), CFG) == 2
    assert hard_count(np.full(5, TZ - 1), CFG) == 0


def test_soft_rounds_to_hard_away_from_threshold():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(1, 20)
        z = TZ + rng.choice([-1, 1], size=n) * rng.uniform(0.05, 3, size=n)
        assert round(soft_count(z, CFG)) == hard_count(z, CFG)


def test_critic_loss_examples():
    z = np.array([TZ, TZ + 1])
    f = soft_count(z, CFG)
    assert critic_loss(z, f, CFG) == (0.0, SATISFIED)
    loss, side = critic_loss(np.array([TZ + 0.1]), 0, CFG)
    assert side == OVER and loss == pytest.approx(0.1, abs=1e-10)
    loss, side = critic_loss(np.array([TZ - 0.1]), 1, CFG)
    assert side == UNDER and loss == pytest.approx(0.1, abs=1e-10)


def test_anti_plateau_closed_form():
    z = np.array([TZ + 0.1])
    g = critic_grad(z, 0, CFG)[0]
    assert g == pytest.approx(1.0, abs=1e-10)
    assert soft_count_grad(z, CFG)[0] == pytest.approx(2.8e-11, rel=0.02)


def test_satisfied_gradient_is_zero():
    z = np.array([TZ + 2, TZ - 2])
    np.testing.assert_array_equal(critic_grad(z, 1, CFG), 0.0)


@pytest.mark.parametrize("side", [OVER, UNDER])
def test_critic_grad_matches_fd_near_threshold(side):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        z = TZ + rng.uniform(-0.02, 0.02, size=5)
        target = 0 if side == OVER else 5
        fd = np.zeros(5)
        h = 1e-7
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fd[i] = (critic_loss(z + e, target, CFG)[0] - critic_loss(z - e, target, CFG)[0]) / (2 * h)
        g = critic_grad(z, target, CFG)
        worst = max(worst, np.max(np.abs(g - fd) / np.maximum(1, np.abs(fd))))
    assert worst <= 1e-5


@settings(max_examples=200, deadline=None)
@given(logits)
def test_soft_count_bounds_and_monotone(z):
    f = soft_count(z, CFG)
    assert 0.0 <= f <= len(z)
    assert np.all(soft_count_grad(z, CFG) >= 0)


@settings(max_examples=200, deadline=None)
@given(logits)
def test_gradient_signs(z):
    over = critic_grad(z, -1, CFG)
    assert np.all(over[z > TZ] > 0)
    under = critic_grad(z, len(z) + 1, CFG)
    assert np.all(under[z < TZ] < 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5).filter(lambda u: abs(u) >= 10 / 300), st.floats(1.5, 400))
def test_anti_plateau_dominance(u, beta):
    cfg = CriticConfig(beta=beta)
    if abs(beta * u) < 10:
        return
    z = np.array([cfg.tau_z + u])
    side_target = 0 if u > 0 else 1
    g = abs(critic_grad(z, side_target, cfg)[0])
    assert g >= 0.99995 - 1e-12
    assert g > soft_count_grad(z, cfg)[0]


@settings(max_examples=200, deadline=None)
@given(logits)
def test_branch_symmetry(z):
    n = len(z)
    target = 0
    over, side = critic_loss(z, target, CFG)
    # saturated sigmoids can round the reflected count to exactly n
    assume(side == OVER and soft_count(2 * TZ - z, CFG) < n)
    under, side2 = critic_loss(2 * TZ - z, n - target, CFG)
    assert side2 == UNDER
    assert over == pytest.approx(under, abs=1e-12)


def test_multi_reduces_to_single():
    rng = np.random.default_rng(11)
    for _ in range(100):
        z = TZ + rng.normal(size=8)
        target = int(rng.integers(0, 9))
        single, side = critic_loss(z, target, CFG)
        if side == SATISFIED:
            continue
        assert multi_critic_loss(z[:, None], [target], CFG) == pytest.approx(single, abs=1e-12)
        np.testing.assert_allclose(multi_critic_grad(z[:, None], [target], CFG)[:, 0],
                                   critic_grad(z, target, CFG), atol=1e-12)


def test_multi_examples():
    z = np.array([[TZ + 1, TZ - 1]])
    # class 0 holds the max and is not over-generated
    assert abs(multi_critic_loss(z, [1, 0], CFG)) < 1e-100
    assert multi_critic_loss(z, [0, 0], CFG) == pytest.approx(1.0, abs=1e-12)


def test_multi_target_validation():
    with pytest.raises(ValueError):
        multi_critic_loss(np.zeros((3, 2)), [1], CFG)
    with pytest.raises(ValueError):
        multi_critic_loss(np.zeros((3, 2)), [1, -1], CFG)


def test_per_class_counts_examples():
    assert [h for _, h in per_class_counts(np.full((4, 3), TZ - 1), CFG)] == [0, 0, 0]
    z = np.full((3, 2), TZ - 3.0)
    z[0, 0] = z[1, 0] = z[2, 1] = TZ + 0.05
    counts = per_class_counts(z, CFG)
    assert [h for _, h in counts] == [2, 1]
    np.testing.assert_allclose([s for s, _ in counts], [2, 1], atol=1e-6)


def test_per_class_single_column_reduces():
    rng = np.random.default_rng(5)
    z = TZ + rng.normal(size=9)
    (soft, hard), = per_class_counts(z[:, None], CFG)
    assert soft == pytest.approx(soft_count(z, CFG), abs=1e-12)
    assert hard == hard_count(z, CFG)


def test_argmax_ties_go_to_lowest_class():
    z = np.array([[TZ + 1, TZ + 1]])
    assert [h for _, h in per_class_counts(z, CFG)] == [1, 0]


@pytest.mark.parametrize("m,targets", [(1, [2]), (1, [7]), (3, [1, 2, 0])])
def test_tape_loss_matches_numpy(m, targets):
    rng = np.random.default_rng(2)
    z = TZ + rng.normal(size=(6, m))
    g = tape.Graph()
    leaf = g.leaf(z.ravel())
    loss, _ = d2d_loss_on_tape(leaf, targets, CFG, m)
    expected = critic_loss(z[:, 0], targets[0], CFG)[0] if m == 1 else multi_critic_loss(z, targets, CFG)
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    grad = tape.backward(g, loss)[leaf.id].reshape(z.shape)
    ref = critic_grad(z[:, 0], targets[0], CFG)[:, None] if m == 1 else multi_critic_grad(z, targets, CFG)
    np.testing.assert_allclose(grad, ref, atol=1e-12)
