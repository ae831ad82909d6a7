import numpy as np
import pytest

from grpolab import policy as pol
from grpolab.grad import GroupSample, collect_batch, estimate_gradient_meta, meta_gradients_many, sample_indices
from grpolab.ustat import first_order_projection, hoeffding_decompose, kernel_h, ustat_average

from conftest import random_policy


def _group(p, env, x, G, seed):
    ks = pol.sample_output_indices(p, env, x, G, np.random.default_rng(seed))
    return GroupSample(x, [env.outputs.sequences[k] for k in ks], env.rewards[x, ks])


def test_kernel_equal_rewards_zero(small_env):
    p = random_policy(small_env, 0)
    y1, y2 = small_env.outputs.sequences[1], small_env.outputs.sequences[3]
    assert np.all(kernel_h(p, small_env, 0, (y1, 0.7), (y2, 0.7)) == 0)


def test_kernel_symmetric(small_env):
    p = random_policy(small_env, 1)
    a, b = (small_env.outputs.sequences[2], 0.1), (small_env.outputs.sequences[5], 1.3)
    assert np.array_equal(kernel_h(p, small_env, 1, a, b), kernel_h(p, small_env, 1, b, a))


def test_kernel_hand_expansion(two_token_env):
    lg = np.array([[[0.3, -0.8]]])
    p = pol.PolicyParams(lg)
    pi = np.exp(lg[0, 0]) / np.exp(lg[0, 0]).sum()
    w0, w1 = np.array([1, 0]) - pi, np.array([0, 1]) - pi
    expect = 0.5 * (w0 - w1) * (1.0 - 0.0)
    assert np.allclose(kernel_h(p, two_token_env, 0, ((0, 1), 1.0), ((1,), 0.0)), expect, atol=1e-15)


@pytest.mark.parametrize("G", [2, 3, 7, 16])
def test_ustat_equals_leave_one_out(small_env, G):
    p = random_policy(small_env, G)
    g = _group(p, small_env, 1, G, G)
    from grpolab.grad import GroupBatch
    loo = estimate_gradient_meta(p, small_env, GroupBatch([g]), "leave_one_out").vector
    u = ustat_average(p, small_env, g)
    assert np.abs(u - loo).max() <= 1e-12 * max(1.0, np.abs(loo).max())


def test_ustat_constant_rewards(small_env):
    p = random_policy(small_env, 2)
    g = GroupSample(0, small_env.outputs.sequences[:4], [0.5] * 4)
    assert np.all(ustat_average(p, small_env, g) == 0)


def test_ustat_pair_is_kernel(small_env):
    p = random_policy(small_env, 3)
    g = _group(p, small_env, 2, 2, 0)
    k = kernel_h(p, small_env, 2, (g.outputs[0], g.rewards[0]), (g.outputs[1], g.rewards[1]))
    assert np.allclose(ustat_average(p, small_env, g), k, atol=1e-15)


def test_decomposition_identity(small_env):
    p = random_policy(small_env, 4)
    g = _group(p, small_env, 0, 6, 1)
    parts = hoeffding_decompose(p, small_env, 0, g)
    assert np.abs(parts.total - ustat_average(p, small_env, g)).max() <= 1e-10


def test_first_order_is_oracle_minus_gradient(small_env):
    p = random_policy(small_env, 5)
    g = _group(p, small_env, 2, 5, 2)
    from grpolab.grad import GroupBatch, snapshot_id
    orc = estimate_gradient_meta(p, small_env, GroupBatch([g], snapshot_id(p)), "oracle_value").vector
    _, per = pol.exact_gradient(p, small_env, per_prompt=True)
    parts = hoeffding_decompose(p, small_env, 2, g)
    assert np.abs(parts.first_order - (orc - per[2])).max() <= 1e-10


def test_first_order_projection_mean_is_h0(small_env):
    p = random_policy(small_env, 6)
    h1 = first_order_projection(p, small_env, 1)
    probs = pol.output_probs(p, small_env)[1]
    _, per = pol.exact_gradient(p, small_env, per_prompt=True)
    assert np.allclose(probs @ h1, per[1][pol.block_slice(small_env, 1)], atol=1e-15)


def test_second_order_decays_as_inverse_square(small_env):
    """E‖ζ2‖² over 10^5 groups at G and 2G: log-log slope -2 ± 0.4."""
    p = random_policy(small_env, 7)
    x = 0
    h1 = first_order_projection(p, small_env, x)
    _, per = pol.exact_gradient(p, small_env, per_prompt=True)
    h0 = per[x][pol.block_slice(small_env, x)]
    sl = pol.block_slice(small_env, x)
    rng = np.random.default_rng(8)
    means = []
    Gs = (4, 8)
    for G in Gs:
        ks = pol.sample_output_indices(p, small_env, x, (100_000, 1, G), rng)
        xs = np.zeros((100_000, 1), dtype=int)
        u = meta_gradients_many(p, small_env, xs, ks, "leave_one_out")[:, sl]
        first = (2.0 / G) * (h1[ks[:, 0]] - h0).sum(axis=1)
        zeta2 = u - h0 - first
        means.append(np.einsum("rd,rd->r", zeta2, zeta2).mean())
    slope = np.log(means[1] / means[0]) / np.log(Gs[1] / Gs[0])
    assert -2.4 <= slope <= -1.6


def test_decompose_rejects_wrong_prompt(small_env):
    p = random_policy(small_env, 9)
    g = _group(p, small_env, 0, 3, 0)
    with pytest.raises(ValueError):
        hoeffding_decompose(p, small_env, 1, g)
