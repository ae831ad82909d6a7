import itertools

import numpy as np
import pytest

from grpolab import policy as pol
from grpolab.analysis.mse import (brute_force_count, gradient_covariance, mse_exact, mse_exact_small,
                                  mse_monte_carlo, mse_split, oracle_convergence_curve, per_prompt_mse,
                                  prompt_variance, score_reward_correlation)
from grpolab.env import EnumerationCapError, build_env
from grpolab.grad import meta_gradients_many, sample_indices
from grpolab.ustat import kernel_h

from conftest import random_policy

BASELINES = ["vanilla", "leave_one_out", "oracle_value"]


def test_deterministic_policy_zero_mse(two_token_env):
    p = pol.PolicyParams(np.array([[[40.0, 0.0]]]))
    for b in BASELINES:
        assert mse_exact(p, two_token_env, b, 2, 3) <= 1e-12
    rep = mse_monte_carlo(p, two_token_env, "vanilla", 1, 2, 200, 0)
    assert rep.mse_mean == pytest.approx(0.0, abs=1e-12)


def test_two_token_vanilla(two_token_env):
    p = pol.zeros(two_token_env)
    assert mse_exact(p, two_token_env, "vanilla", 1, 1) == pytest.approx(0.125)
    assert mse_exact_small(p, two_token_env, "vanilla", 1, 1) == pytest.approx(0.125)
    lo, hi = mse_monte_carlo(p, two_token_env, "vanilla", 1, 1, 10_000, 1).ci
    assert lo <= 0.125 <= hi


def test_ci_halfwidth_scaling(small_env):
    p = random_policy(small_env, 0)
    a = mse_monte_carlo(p, small_env, "leave_one_out", 1, 3, 20_000, 1, with_exact=False)
    b = mse_monte_carlo(p, small_env, "leave_one_out", 1, 3, 80_000, 2, with_exact=False)
    assert 1.8 <= a.ci_halfwidth / b.ci_halfwidth <= 2.2


def test_reps_precondition(small_env):
    with pytest.raises(ValueError):
        mse_monte_carlo(pol.zeros(small_env), small_env, "vanilla", 1, 2, 50, 0)


@pytest.mark.parametrize("baseline", BASELINES + ["normalized"])
def test_brute_force_vs_monte_carlo(baseline):
    env = build_env(3, 3, 2, reward_rule="bounded-random", reward_seed=1)
    p = random_policy(env, 2)
    exact = mse_exact_small(p, env, baseline, 1, 3)
    rep = mse_monte_carlo(p, env, baseline, 1, 3, 100_000, 3, with_exact=False)
    lo, hi = rep.ci
    # 95% interval widened to 4 sigma so the check is not flaky across estimators
    half = rep.ci_halfwidth * 4 / 1.96
    assert rep.mse_mean - half <= exact <= rep.mse_mean + half


@pytest.mark.parametrize("baseline", BASELINES)
@pytest.mark.parametrize("B,G", [(1, 2), (2, 2), (1, 3)])
def test_closed_form_equals_brute_force(baseline, B, G):
    env = build_env(3, 3, 2, reward_rule="bounded-random", reward_seed=3)
    p = random_policy(env, 4)
    assert abs(mse_exact(p, env, baseline, B, G) - mse_exact_small(p, env, baseline, B, G)) <= 1e-12


def test_loo_pair_equals_kernel_second_moment():
    env = build_env(3, 3, 1, reward_rule="bounded-random", reward_seed=5)
    p = random_policy(env, 5)
    probs = pol.output_probs(p, env)[0]
    g = pol.exact_gradient(p, env)
    seqs = env.outputs.sequences
    total = 0.0
    for i, j in itertools.product(range(len(seqs)), repeat=2):
        h = kernel_h(p, env, 0, (seqs[i], env.rewards[0, i]), (seqs[j], env.rewards[0, j]))
        total += probs[i] * probs[j] * float((h - g) @ (h - g))
    assert mse_exact_small(p, env, "leave_one_out", 1, 2) == pytest.approx(total, abs=1e-14)


def test_split_identity(small_env):
    p = random_policy(small_env, 6)
    for b in BASELINES:
        s = mse_split(p, small_env, b, 3, 4)
        assert abs(s["total"] - (s["prompt_variance"] + s["per_prompt"])) <= 1e-12


def test_split_matches_brute_force():
    env = build_env(3, 3, 2, reward_rule="bounded-random", reward_seed=2)
    p = random_policy(env, 6)
    for b in BASELINES:
        assert abs(mse_exact_small(p, env, b, 2, 2) - mse_split(p, env, b, 2, 2)["total"]) <= 1e-10


def test_cap_rejection(small_env):
    with pytest.raises(EnumerationCapError) as err:
        mse_exact_small(pol.zeros(small_env), small_env, "vanilla", 3, 4, cap=1000)
    assert str(brute_force_count(small_env, 3, 4)) in str(err.value)


def test_oracle_convergence_curve(small_env):
    p = random_policy(small_env, 7)
    out = oracle_convergence_curve(p, small_env, [2, 4, 8, 16, 32, 64])
    assert all(d > 0 for d in out["difference"])
    assert -2.6 <= out["slope"] <= -1.4
    scaled = np.array(out["mse_oracle"]) * np.array(out["G"])
    assert scaled.max() / scaled.min() - 1 <= 0.10
    with pytest.raises(ValueError):
        oracle_convergence_curve(p, small_env, [2, 4, 8])


def test_vanilla_above_loo_on_many_envs():
    for seed in range(12):
        env = build_env(3, 3, 2, reward_rule="bounded-random", reward_seed=seed)
        p = random_policy(env, seed)
        for G in (2, 4, 8):
            assert mse_exact(p, env, "vanilla", 1, G) > mse_exact(p, env, "leave_one_out", 1, G)


def test_covariance_trace_is_mse(small_env):
    p = random_policy(small_env, 8)
    for b in BASELINES:
        assert np.trace(gradient_covariance(p, small_env, b, 2, 3)) == pytest.approx(
            mse_exact(p, small_env, b, 2, 3), rel=1e-12)


def test_covariance_deterministic_oracle_zero(two_token_env):
    p = pol.PolicyParams(np.array([[[40.0, 0.0]]]))
    assert np.abs(gradient_covariance(p, two_token_env, "oracle_value", 1, 2)).max() <= 1e-12


def test_covariance_exact_vs_monte_carlo():
    env = build_env(3, 3, 1, reward_rule="bounded-random", reward_seed=9)
    p = random_policy(env, 9)
    g = pol.exact_gradient(p, env)
    exact = gradient_covariance(p, env, "leave_one_out", 1, 3)
    rng = np.random.default_rng(10)
    n, chunk = 1_000_000, 100_000
    s1 = s2 = 0.0
    for _ in range(n // chunk):
        xs, ks = sample_indices(p, env, 1, 3, rng, reps=chunk)
        e = meta_gradients_many(p, env, xs, ks, "leave_one_out") - g
        prod = e[:, :, None] * e[:, None, :]
        s1 = s1 + prod.sum(0)
        s2 = s2 + (prod ** 2).sum(0)
    mean = s1 / n
    se = np.sqrt(np.maximum(s2 / n - mean ** 2, 0) / n)
    assert np.all(np.abs(mean - exact) <= 4 * se + 1e-12)


def test_covariance_gap_decays(small_env):
    p = random_policy(small_env, 11)
    Gs = np.array([4, 8, 16, 32])
    gaps = [np.linalg.norm(gradient_covariance(p, small_env, "leave_one_out", 1, G)
                           - gradient_covariance(p, small_env, "oracle_value", 1, G)) for G in Gs]
    slope = np.polyfit(np.log(Gs), np.log(gaps), 1)[0]
    assert -2.5 <= slope <= -1.5


def test_prompt_variance_zero_single_prompt():
    env = build_env(3, 3, 1, reward_rule="bounded-random")
    assert prompt_variance(random_policy(env, 0), env) == 0.0


def test_per_prompt_loo_requires_pairs(small_env):
    with pytest.raises(ValueError):
        per_prompt_mse(pol.zeros(small_env), small_env, 0, "leave_one_out", 1)


def test_correlation_diagnostic(small_env):
    c = score_reward_correlation(random_policy(small_env, 1), small_env)
    assert c.shape == (3,) and np.all(np.abs(c) <= 1)
