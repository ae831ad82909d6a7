import numpy as np
import pytest
from scipy.optimize import approx_fprime

from grpolab import policy as pol
from grpolab.analysis.asymptotics import SyntheticQuadratic
from grpolab.env import build_env

from conftest import random_policy


def test_uniform_sampling_frequencies(two_token_env):
    p = pol.zeros(two_token_env)
    rng = np.random.default_rng(0)
    draws = [pol.sample_output(p, two_token_env, 0, rng) for _ in range(10_000)]
    freq = np.mean([y == (0, 1) for y in draws])
    assert abs(freq - 0.5) <= 3 * np.sqrt(0.25 / 10_000)


def test_peaked_logit_dominates(two_token_env):
    lg = np.zeros((1, 1, 2))
    lg[0, 0, 0] = 20.0
    p = pol.PolicyParams(lg)
    idx = pol.sample_output_indices(p, two_token_env, 0, 10_000, np.random.default_rng(1))
    k = two_token_env.outputs.index[(0, 1)]
    assert np.mean(idx == k) >= 0.9999


def test_sampling_deterministic(small_env):
    p = random_policy(small_env, 0)
    a = pol.sample_output(p, small_env, 1, np.random.default_rng(9))
    b = pol.sample_output(p, small_env, 1, np.random.default_rng(9))
    assert a == b


def test_autoregressive_and_enumerated_sampling_agree(small_env):
    p = random_policy(small_env, 2)
    rng = np.random.default_rng(3)
    n = 20_000
    draws = [small_env.outputs.index[pol.sample_output(p, small_env, 0, rng)] for _ in range(n)]
    freq = np.bincount(draws, minlength=small_env.n_outputs) / n
    probs = pol.output_probs(p, small_env)[0]
    assert np.all(np.abs(freq - probs) <= 4 * np.sqrt(probs * (1 - probs) / n) + 1e-12)


def test_log_prob_uniform(two_token_env):
    assert pol.log_prob(pol.zeros(two_token_env), two_token_env, 0, (1,)) == pytest.approx(np.log(0.5))


def test_probabilities_normalized(small_env):
    p = random_policy(small_env, 1, scale=2.0)
    assert np.allclose(pol.output_probs(p, small_env).sum(axis=1), 1.0, atol=1e-10)


def test_greedy_log_prob_near_zero(two_token_env):
    lg = np.zeros((1, 1, 2))
    lg[0, 0, 1] = 30.0
    assert abs(pol.log_prob(pol.PolicyParams(lg), two_token_env, 0, (1,))) < 1e-12


def test_score_one_hot_minus_uniform(two_token_env):
    s = pol.score(pol.zeros(two_token_env), two_token_env, 0, (0, 1))
    assert np.allclose(s, [0.5, -0.5])


def test_score_zero_mean_monte_carlo(small_env):
    p = random_policy(small_env, 5)
    rng = np.random.default_rng(6)
    n = 100_000
    idx = pol.sample_output_indices(p, small_env, 0, n, rng)
    W = pol.local_scores(p, small_env, 0)[idx]
    mean, se = W.mean(0), W.std(0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean) <= 4 * se + 1e-12)


def test_score_matches_finite_differences(small_env):
    p = random_policy(small_env, 7)
    y = small_env.outputs.sequences[4]
    fd = approx_fprime(p.vector, lambda th: pol.log_prob(p.with_vector(th), small_env, 1, y), 1e-5)
    # approx_fprime is one-sided; compare with a tolerance that covers its O(h) error
    assert np.abs(fd - pol.score(p, small_env, 1, y)).max() <= 1e-5
    th = p.vector
    central = np.array([(pol.log_prob(p.with_vector(th + e), small_env, 1, y)
                         - pol.log_prob(p.with_vector(th - e), small_env, 1, y)) / 2e-5
                        for e in np.eye(len(th)) * 1e-5])
    assert np.abs(central - pol.score(p, small_env, 1, y)).max() <= 1e-6


def test_value_uniform_binary(two_token_env):
    assert pol.value_exact(pol.zeros(two_token_env), two_token_env, 0) == pytest.approx(0.5)


def test_value_deterministic_policy(two_token_env):
    lg = np.zeros((1, 1, 2))
    lg[0, 0, 0] = 40.0
    assert pol.value_exact(pol.PolicyParams(lg), two_token_env, 0) == pytest.approx(1.0)


def test_value_monte_carlo(small_env):
    p = random_policy(small_env, 8)
    n = 1_000_000
    idx = pol.sample_output_indices(p, small_env, 2, n, np.random.default_rng(8))
    z = small_env.rewards[2, idx]
    assert abs(z.mean() - pol.value_exact(p, small_env, 2)) <= 4 * z.std() / np.sqrt(n)


def test_exact_gradient_two_token(two_token_env):
    assert np.allclose(pol.exact_gradient(pol.zeros(two_token_env), two_token_env), [0.25, -0.25])


def test_constant_reward_gradient_zero():
    env = build_env(3, 3, 2, reward_rule="table", table=lambda x, y: 0.7)
    p = random_policy(env, 0)
    assert np.allclose(pol.exact_gradient(p, env), 0.0, atol=1e-15)


def test_exact_gradient_finite_differences(small_env):
    p = random_policy(small_env, 9)
    th = p.vector
    fd = np.array([(pol.objective(p.with_vector(th + e), small_env)
                    - pol.objective(p.with_vector(th - e), small_env)) / 2e-5
                   for e in np.eye(len(th)) * 1e-5])
    assert np.abs(fd - pol.exact_gradient(p, small_env)).max() <= 1e-6


def test_hessian_of_embedded_quadratic():
    quad = SyntheticQuadratic(np.diag([2.0, 0.0]))
    H = pol.finite_difference_hessian(quad.gradient, np.array([0.3, -0.4]))
    assert np.allclose(H, np.diag([-2.0, 0.0]), atol=1e-8)


def test_hessian_constant_reward_zero():
    env = build_env(2, 3, 1, reward_rule="table", table=lambda x, y: 1.0)
    H = pol.exact_hessian(random_policy(env, 1), env)
    assert np.abs(H).max() <= 1e-10


def test_hessian_asymmetry_small(small_env):
    env = build_env(3, 3, 1, reward_rule="bounded-random", reward_seed=2)
    _, asym = pol.exact_hessian(random_policy(env, 3), env, return_asymmetry=True)
    assert asym <= 1e-5


def test_kl_and_tv(small_env):
    p, q = random_policy(small_env, 1), random_policy(small_env, 2)
    assert pol.kl_exact(p, p, small_env) == pytest.approx(0.0, abs=1e-15)
    assert pol.kl_exact(p, q, small_env) > 0
    tv = pol.total_variation(p, q, small_env)
    assert np.all((tv >= 0) & (tv <= 1))


def test_csv_roundtrip(tmp_path, small_env):
    p = random_policy(small_env, 4)
    pol.save_csv(p, small_env, tmp_path / "p.csv")
    assert np.array_equal(pol.load_csv(small_env, tmp_path / "p.csv").logits, p.logits)
