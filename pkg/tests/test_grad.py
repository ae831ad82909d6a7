import json

import numpy as np
import pytest

from grpolab import policy as pol
from grpolab.env import build_env
from grpolab.grad import (BaselineKind, CoverageError, GradientEstimate, GroupBatch, GroupSample,
                          advantage_normalized, collect_batch, estimate_gradient_meta,
                          estimate_gradient_practical, group_standard_error, k3_kl_estimate,
                          k3_terms, leave_one_out_means, meta_gradients_many,
                          practical_gradients_many, sample_indices)

from conftest import random_policy


def test_single_episode_batch(small_env):
    b = collect_batch(pol.zeros(small_env), small_env, 1, 1, np.random.default_rng(0))
    assert b.B == 1 and b.G == 1


def test_batch_deterministic(small_env):
    p = random_policy(small_env, 0)
    a = collect_batch(p, small_env, 3, 4, np.random.default_rng(5))
    b = collect_batch(p, small_env, 3, 4, np.random.default_rng(5))
    assert a == b


def test_prompt_frequencies():
    env = build_env(2, 2, [("a", 0.2), ("b", 0.5), ("c", 0.3)])
    xs, _ = sample_indices(pol.zeros(env), env, 1, 1, np.random.default_rng(1), reps=10_000)
    freq = np.bincount(xs.ravel(), minlength=3) / 10_000
    w = env.weights
    assert np.all(np.abs(freq - w) <= 4 * np.sqrt(w * (1 - w) / 10_000))


def test_leave_one_out_means():
    assert np.allclose(leave_one_out_means([1, 0]), [0, 1])
    assert np.allclose(leave_one_out_means([2.5] * 5), 2.5)
    assert np.allclose(leave_one_out_means([1, 1, 0, 0]), [1 / 3, 1 / 3, 2 / 3, 2 / 3])
    with pytest.raises(ValueError):
        leave_one_out_means([1.0])


def test_advantage_examples():
    a = advantage_normalized([1, 1, 0, 0])
    assert a[0] == pytest.approx((1 - 1 / 3) / np.sqrt(1 / 3))
    assert a[0] == pytest.approx(1.15470, abs=1e-5)
    assert np.all(advantage_normalized([0.3, 0.3, 0.3]) == 0)
    assert group_standard_error([1, 0]) == pytest.approx(0.70711, abs=1e-5)
    assert np.allclose(advantage_normalized([1, 0]), [1.41421, -1.41421], atol=1e-5)


def test_baseline_parse():
    assert BaselineKind.parse("loo").tag == "leave_one_out"
    assert BaselineKind.parse("oracle").tag == "oracle_value"
    assert BaselineKind.leave_one_out().min_group == 2
    with pytest.raises(ValueError):
        BaselineKind.parse("nonsense")


def test_constant_rewards_loo_zero():
    env = build_env(3, 3, 2, reward_rule="table", table=lambda x, y: 0.4)
    b = collect_batch(random_policy(env, 1), env, 2, 5, np.random.default_rng(2))
    est = estimate_gradient_meta(random_policy(env, 1), env, b, "leave_one_out")
    assert np.allclose(est.vector, 0.0, atol=1e-15)


def test_vanilla_single_episode_is_score_times_reward(small_env):
    p = random_policy(small_env, 3)
    b = collect_batch(p, small_env, 1, 1, np.random.default_rng(4))
    g = b.groups[0]
    est = estimate_gradient_meta(p, small_env, b, "vanilla")
    assert np.allclose(est.vector, pol.score(p, small_env, g.prompt, g.outputs[0]) * g.rewards[0])


@pytest.mark.parametrize("baseline", ["vanilla", "leave_one_out", "oracle_value"])
def test_unbiased_monte_carlo(small_env, baseline):
    p = random_policy(small_env, 6)
    xs, ks = sample_indices(p, small_env, 2, 3, np.random.default_rng(7), reps=100_000)
    est = meta_gradients_many(p, small_env, xs, ks, baseline)
    mean, se = est.mean(0), est.std(0, ddof=1) / np.sqrt(len(est))
    g = pol.exact_gradient(p, small_env)
    assert np.all(np.abs(mean - g) <= 4 * se + 1e-12)


def test_oracle_requires_generating_snapshot(small_env):
    p, q = random_policy(small_env, 1), random_policy(small_env, 2)
    b = collect_batch(p, small_env, 1, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        estimate_gradient_meta(q, small_env, b, "oracle_value")


def test_batched_and_single_estimators_agree(small_env):
    p = random_policy(small_env, 8)
    b = collect_batch(p, small_env, 2, 4, np.random.default_rng(3))
    xs, ks, _ = b.arrays(small_env)
    for base in ("vanilla", "leave_one_out", "oracle_value"):
        assert np.allclose(meta_gradients_many(p, small_env, xs, ks, base),
                           estimate_gradient_meta(p, small_env, b, base).vector, atol=1e-15)


def test_practical_reduces_to_normalized_meta(small_env):
    p = random_policy(small_env, 9)
    b = collect_batch(p, small_env, 2, 4, np.random.default_rng(1))
    est = estimate_gradient_practical(p, p, p, small_env, b, 0.0)
    manual = np.zeros(p.dim)
    for g in b.groups:
        adv = advantage_normalized(g.rewards)
        for y, a in zip(g.outputs, adv):
            manual += pol.score(p, small_env, g.prompt, y) * a
    assert np.allclose(est.vector, manual / (b.B * b.G), atol=1e-14)


def test_practical_kl_term_vanishes_on_policy(small_env):
    p = random_policy(small_env, 10)
    b = collect_batch(p, small_env, 2, 4, np.random.default_rng(2))
    a = estimate_gradient_practical(p, p, p, small_env, b, 0.0).vector
    c = estimate_gradient_practical(p, p, p, small_env, b, 5.0).vector
    assert np.allclose(a, c, atol=1e-15)


def test_practical_hand_expansion(two_token_env):
    # one decision state, two tokens; each output has exactly one decision
    cur = pol.PolicyParams(np.array([[[0.4, -0.1]]]))
    old = pol.PolicyParams(np.array([[[-0.2, 0.3]]]))
    b = GroupBatch([GroupSample(0, [(0, 1), (1,)], [1.0, 0.0])])
    est = estimate_gradient_practical(cur, old, old, two_token_env, b, 0.0).vector
    pc = np.exp([0.4, -0.1]) / np.exp([0.4, -0.1]).sum()
    po = np.exp([-0.2, 0.3]) / np.exp([-0.2, 0.3]).sum()
    A = np.sqrt(2.0)
    hand = 0.5 * ((pc[0] / po[0]) * A * (np.array([1, 0]) - pc)
                  + (pc[1] / po[1]) * (-A) * (np.array([0, 1]) - pc))
    assert np.allclose(est, hand, atol=1e-15)


def test_coverage_floor(two_token_env):
    lg = np.array([[[60.0, 0.0]]])
    p = pol.PolicyParams(lg)
    b = GroupBatch([GroupSample(0, [(1,), (0, 1)], [0.0, 1.0])])
    with pytest.raises(CoverageError):
        estimate_gradient_practical(p, p, p, two_token_env, b, 0.0, floor=1e-8)


def test_k3_zero_for_same_policy(small_env):
    p = random_policy(small_env, 1)
    b = collect_batch(p, small_env, 3, 4, np.random.default_rng(0))
    assert k3_kl_estimate(p, p, small_env, b) == 0.0


def test_k3_nonnegative_and_unbiased(small_env):
    p, q = random_policy(small_env, 1), random_policy(small_env, 2)
    xs, ks = sample_indices(p, small_env, 1, 1, np.random.default_rng(3), reps=100_000)
    t = k3_terms(p, q, small_env, xs[:, 0], ks[:, 0, 0])
    assert t.min() >= 0
    assert abs(t.mean() - pol.kl_exact(p, q, small_env)) <= 4 * t.std(ddof=1) / np.sqrt(len(t))


def test_gradient_estimate_json_roundtrip():
    g = GradientEstimate(np.array([0.1, -0.2]), "leave_one_out", 2, 3, 7)
    back = GradientEstimate.from_json(g.to_json())
    assert np.array_equal(back.vector, g.vector) and back.estimator == "leave_one_out"
    assert json.loads(g.to_json())["B"] == 2


def test_ratio_variants_coincide_on_policy(small_env):
    p = random_policy(small_env, 4, 0.5)
    ref = random_policy(small_env, 5, 0.5)
    xs, ks = sample_indices(p, small_env, 2, 3, np.random.default_rng(0), reps=50)
    tok = practical_gradients_many(p, p, ref, small_env, xs, ks, 0.7, floor=0.0)
    seq = practical_gradients_many(p, p, ref, small_env, xs, ks, 0.7, floor=0.0, ratio="sequence")
    assert np.allclose(tok, seq, atol=1e-15)


def test_single_step_outputs_have_equal_ratios(two_token_env):
    # with one decision per output the per-token and whole-sequence ratios are the same
    cur = pol.PolicyParams(np.array([[[0.4, -0.1]]]))
    old = pol.PolicyParams(np.array([[[-0.2, 0.3]]]))
    xs, ks = np.array([0]), np.array([[0, 1]])
    tok = practical_gradients_many(cur, old, old, two_token_env, xs, ks, 0.0, floor=0.0)
    seq = practical_gradients_many(cur, old, old, two_token_env, xs, ks, 0.0, floor=0.0, ratio="sequence")
    assert np.allclose(tok, seq, atol=1e-15)
