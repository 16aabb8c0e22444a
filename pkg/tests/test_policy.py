import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dmpo_lab.errors import ConfigError, UpdateRefusedError, ValidationError
from dmpo_lab.mdp import Trajectory
from dmpo_lab.policy import TabularPolicy, grad_log_prob, log_prob, log_softmax, traj_log_ratio_terms

from conftest import random_policy, random_traj

logit_tables = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                      elements=st.floats(-50, 50))


@settings(max_examples=100, deadline=None)
@given(logits=logit_tables)
def test_probs_normalize(logits):
    p = TabularPolicy(logits).probs()
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p >= 0)


@settings(max_examples=100, deadline=None)
@given(logits=logit_tables, shift=st.floats(-100, 100))
def test_gauge_invariance(logits, shift):
    a = TabularPolicy(logits).log_probs()
    b = TabularPolicy(logits + shift).log_probs()
    assert np.allclose(a, b, atol=1e-12, rtol=0)


def test_log_prob_examples():
    assert log_prob(TabularPolicy.uniform(1, 4), 0, 2) == pytest.approx(math.log(0.25), abs=1e-12)
    assert log_prob(TabularPolicy([[5.0, 5.0]]), 0, 1) == log_prob(TabularPolicy([[0.0, 0.0]]), 0, 1)
    assert log_prob(TabularPolicy([[1.0, 0.0]]), 0, 0) == pytest.approx(-0.3132617, abs=1e-7)
    assert log_prob(TabularPolicy([[1.0, 0.0]]), 0, 0) == pytest.approx(math.log(math.e / (math.e + 1)), abs=1e-15)


def test_log_softmax_is_stable_for_huge_logits():
    out = log_softmax(np.array([[1e300, 0.0]]))
    assert np.all(np.isfinite(out[:, 0])) and out[0, 0] == 0.0


def test_log_prob_index_errors():
    with pytest.raises(ValidationError):
        log_prob(TabularPolicy.uniform(2, 2), 2, 0)


def test_traj_log_ratio_terms(rng):
    policy, ref = random_policy(rng, 4, 3), random_policy(rng, 4, 3)
    traj = random_traj(rng, 4, 3, 3)
    got = traj_log_ratio_terms(policy, ref, traj)
    want = [log_prob(policy, s, a) - log_prob(ref, s, a) for s, a in traj.steps]
    assert np.allclose(got, want, atol=1e-14, rtol=0)
    assert np.all(traj_log_ratio_terms(policy, policy, traj) == 0.0)
    one = Trajectory(((1, 2),))
    assert traj_log_ratio_terms(policy, ref, one)[0] == pytest.approx(log_prob(policy, 1, 2) - log_prob(ref, 1, 2))


def test_traj_log_ratio_terms_shape_errors(rng):
    with pytest.raises(ConfigError):
        traj_log_ratio_terms(TabularPolicy.uniform(2, 2), TabularPolicy.uniform(2, 3), Trajectory(((0, 0),)))
    with pytest.raises(ConfigError):
        traj_log_ratio_terms(TabularPolicy.uniform(2, 2), TabularPolicy.uniform(2, 2), Trajectory(((5, 0),)))


def test_grad_log_prob_examples():
    g = grad_log_prob(TabularPolicy.uniform(2, 2), 1, 0)
    assert np.array_equal(g[1], [0.5, -0.5]) and np.all(g[0] == 0)
    sharp = TabularPolicy([[40.0, 0.0, 0.0]])
    assert np.abs(grad_log_prob(sharp, 0, 0)).max() < 1e-15


def test_grad_log_prob_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(20):
        policy = random_policy(rng, 3, 4)
        s, a = int(rng.integers(3)), int(rng.integers(4))
        g = grad_log_prob(policy, s, a)
        fd = np.zeros_like(g)
        for idx in np.ndindex(*g.shape):
            up, dn = policy.logits.copy(), policy.logits.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (log_prob(TabularPolicy(up), s, a) - log_prob(TabularPolicy(dn), s, a)) / (2 * h)
        # the scale is bounded below by 1e-3 so near-zero entries use an absolute floor
        err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
        assert err.max() < 1e-6


def test_frozen_policy_refuses_updates():
    ref = TabularPolicy.uniform(2, 2, frozen=True)
    with pytest.raises(UpdateRefusedError):
        grad_log_prob(ref, 0, 0)
    with pytest.raises(UpdateRefusedError):
        ref.apply_update(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ref.logits[0, 0] = 1.0


def test_copies_are_independent(rng):
    policy = random_policy(rng, 3, 2)
    frozen = policy.frozen_copy()
    digest = frozen.digest()
    policy.apply_update(np.ones((3, 2)))
    assert frozen.digest() == digest
    thawed = frozen.trainable_copy()
    thawed.apply_update(np.ones((3, 2)))
    assert frozen.digest() == digest


def test_json_round_trip(rng):
    policy = random_policy(rng, 3, 4, frozen=True)
    back = TabularPolicy.from_json(policy.to_json())
    assert back.frozen and back.digest() == policy.digest()


def test_invalid_logits():
    with pytest.raises(ValidationError):
        TabularPolicy(np.zeros(3))
    with pytest.raises(ValidationError):
        TabularPolicy([[np.nan, 0.0]])
