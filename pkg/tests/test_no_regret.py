import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icgp.no_regret import (Exp3Learner, cce_epsilon, cce_gaps, exp3_default_eta, exp3_update,
                            max_player_losses, min_player_losses, mwu_cce)

from oracles import cce_deviation_gaps, mwu_reference


def test_zero_losses_give_uniform_joint():
    H = 2.0
    joint = mwu_cce(np.full((4, 3), H), np.full((4, 3), H), H, N=25).joint_policy
    assert np.allclose(joint, 1 / 12, atol=1e-15)


def test_single_round_is_product_of_uniforms():
    rng = np.random.default_rng(0)
    joint = mwu_cce(rng.random((2, 2)), rng.random((2, 2)), 1.0, N=1).joint_policy
    assert np.allclose(joint, 0.25, atol=1e-15)


def test_loss_orientation():
    # Larger Q is good for the max-player and bad for the min-player.
    Q = np.array([[0.0, 2.0]])
    assert max_player_losses(Q, 2.0).tolist() == [[1.0, 0.0]]
    assert min_player_losses(Q, 2.0).tolist() == [[0.0, 1.0]]


@given(seed=st.integers(0, 2 ** 31), A=st.integers(1, 5), B=st.integers(1, 5),
       N=st.integers(1, 40))
@settings(max_examples=30, deadline=None)
def test_vectorized_mwu_matches_loop_reference(seed, A, B, N):
    rng = np.random.default_rng(seed)
    H = 2.0
    Qu, Ql = H * rng.random((A, B)), H * rng.random((A, B))
    joint = mwu_cce(Qu, Ql, H, N).joint_policy
    assert np.max(np.abs(joint - mwu_reference(Qu, Ql, H, N))) <= 1e-12
    assert joint.sum() == pytest.approx(1.0, abs=1e-12)


def test_batched_solves_are_independent():
    rng = np.random.default_rng(3)
    Qu, Ql = 2 * rng.random((3, 4, 5, 5)), 2 * rng.random((3, 4, 5, 5))
    batched = mwu_cce(Qu, Ql, 2.0, 30).joint_policy
    for i in range(3):
        for j in range(4):
            single = mwu_cce(Qu[i, j], Ql[i, j], 2.0, 30).joint_policy
            assert np.max(np.abs(batched[i, j] - single)) <= 1e-14


def test_cce_gaps_match_explicit_deviation_loops():
    rng = np.random.default_rng(7)
    for _ in range(10):
        Qu, Ql = 2 * rng.random((5, 5)), 2 * rng.random((5, 5))
        joint = rng.dirichlet(np.ones(25)).reshape(5, 5)
        assert np.allclose(cce_gaps(Qu, Ql, joint), cce_deviation_gaps(Qu, Ql, joint), atol=1e-13)


def test_cce_quality_on_small_sample():
    rng = np.random.default_rng(1)
    eps = cce_epsilon(5, 5, 2.0, 300)
    assert eps == pytest.approx(2 * np.sqrt(np.log(10) / 300))
    for _ in range(10):
        Qu, Ql = 2 * rng.random((5, 5)), 2 * rng.random((5, 5))
        gaps = cce_deviation_gaps(Qu, Ql, mwu_cce(Qu, Ql, 2.0, 300).joint_policy)
        assert max(gaps) <= eps


def test_mwu_rejects_zero_rounds():
    with pytest.raises(ValueError):
        mwu_cce(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, 0)


def test_exp3_fresh_and_monotone():
    learner = Exp3Learner(5, exp3_default_eta(5, 3000))
    assert np.allclose(learner.probabilities(), 0.2)
    learner.update(0, reward=0.1, prob_of_action=0.2)
    p = learner.probabilities()
    assert all(p[0] < p[j] for j in range(1, 5))


def test_exp3_update_arithmetic():
    learner = Exp3Learner(5, 0.1)
    learner.update(3, reward=1.0, prob_of_action=0.3)
    assert np.all(learner.cum_loss == 0)
    exp3_update(learner, 2, reward=0.5, prob_of_action=0.2)
    assert learner.cum_loss[2] == pytest.approx(2.5)
    a, b = Exp3Learner(3, 0.1), Exp3Learner(3, 0.1)
    a.update(0, 0.2, 0.5)
    a.update(1, 0.7, 0.25)
    b.cum_loss += np.array([0.8 / 0.5, 0.3 / 0.25, 0.0])
    assert np.allclose(a.cum_loss, b.cum_loss, atol=1e-15)
    with pytest.raises(ValueError):
        a.update(0, 0.5, 0.0)


def test_exp3_eta_and_seeded_determinism():
    assert exp3_default_eta(5, 3000) == pytest.approx(np.sqrt(2 * np.log(5) / (5 * 3000)))

    def play(seed):
        rng = np.random.default_rng(seed)
        learner = Exp3Learner(4, 0.3)
        seq = []
        for _ in range(50):
            a, p = learner.act(rng)
            learner.update(a, rng.random(), p[a])
            seq.append(a)
        return seq, learner.cum_loss.copy()

    s1, l1 = play(4)
    s2, l2 = play(4)
    assert s1 == s2 and np.array_equal(l1, l2)
