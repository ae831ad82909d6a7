"""Off-policy bias of the practical estimator and the arcsin objective check.

The per-token clipped-ratio estimator is compared against its sequence-ratio
counterpart, which is an exact importance-weighted correction. Their expected
difference is the bias that comes from evaluating at ``θ_cur ≠ θ_old``.

At ``θ_cur = θ_old`` and ``κ = 0`` the normalized-advantage estimator on
binary rewards is, in expectation, the gradient of
``E_X[2·arcsin(√V(X))]`` up to an ``O(1/G)`` correction.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import binom

from .. import policy as pol
from ..env import EnumerationCapError, Environment
from ..grad import practical_gradients_many, sample_indices
from ..policy import PolicyParams

DEFAULT_SLOT_CAP = 200_000


def _group_slots(p: PolicyParams, env: Environment, G: int):
    probs = pol.output_probs(p, env)
    K = len(env.outputs)
    xs, ks, w = [], [], []
    for x in range(env.n_prompts):
        if env.weights[x] == 0:
            continue
        for combo in itertools.product(range(K), repeat=G):
            pr = env.weights[x] * np.prod(probs[x, list(combo)])
            if pr > 0:
                xs.append([x])
                ks.append([combo])
                w.append(pr)
    return np.array(xs), np.array(ks, dtype=np.intp), np.array(w)


def _bias_exact(p_cur, p_old, p_ref, env, kappa, G, slots, floor, chunk=20000):
    xs, ks, w = slots
    diff = np.zeros(p_cur.dim)
    for lo in range(0, len(w), chunk):
        sl = slice(lo, lo + chunk)
        tok = practical_gradients_many(p_cur, p_old, p_ref, env, xs[sl], ks[sl], kappa, floor=floor)
        seq = practical_gradients_many(p_cur, p_old, p_ref, env, xs[sl], ks[sl], kappa, floor=floor,
                                       ratio="sequence")
        diff += w[sl] @ (tok - seq)
    return diff


def _bias_mc(p_cur, p_old, p_ref, env, kappa, G, reps, rng, floor, chunk=20000):
    """Paired Monte Carlo: both estimators on the same draws from ``p_old``."""
    total = np.zeros(p_cur.dim)
    total_sq = np.zeros(p_cur.dim)
    done = 0
    while done < reps:
        r = min(chunk, reps - done)
        xs, ks = sample_indices(p_old, env, 1, G, rng, reps=r)
        d = (practical_gradients_many(p_cur, p_old, p_ref, env, xs, ks, kappa, floor=floor)
             - practical_gradients_many(p_cur, p_old, p_ref, env, xs, ks, kappa, floor=floor,
                                        ratio="sequence"))
        total += d.sum(0)
        total_sq += (d * d).sum(0)
        done += r
    mean = total / reps
    var = np.maximum(total_sq / reps - mean * mean, 0.0) * reps / (reps - 1)
    return mean, np.sqrt(var / reps)


@dataclass
class BiasCurve:
    displacements: list
    bias: list
    ci_halfwidth: list
    kappa: float
    G: int
    mode: str
    slope: float | None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())

    def rows(self):
        return [{"s": s, "bias": b, "ci_halfwidth": h}
                for s, b, h in zip(self.displacements, self.bias, self.ci_halfwidth)]


def practical_bias_curve(env: Environment, displacements, kappa: float, G: int, reps: int = 0,
                         rng=None, p_old: PolicyParams | None = None, direction=None,
                         p_ref: PolicyParams | None = None, mode: str = "auto",
                         floor: float = 0.0, cap: int = DEFAULT_SLOT_CAP) -> BiasCurve:
    """Bias of the per-token practical estimator as ``θ_cur`` moves away from ``θ_old``.

    For each ``s`` the current policy is ``θ_old + s·direction`` and the bias
    is ``‖E[ĝ_token] − E[ĝ_sequence]‖`` with groups drawn from ``θ_old``.

    Parameters
    ----------
    displacements : sequence of float
        Nonnegative step sizes. The positive ones must span at least a decade.
    mode : {"auto", "exact", "monte_carlo"}
        ``exact`` enumerates every single-group realization (``P·K^G`` of them,
        capped by ``cap``). ``auto`` picks exact when it fits.
    reps : int
        Replications for Monte Carlo mode.
    p_old, direction, p_ref
        Default to draws from ``rng``: ``p_old`` has logit scale 0.5, the
        direction is a unit vector and ``p_ref`` is ``p_old`` moved by 1.0
        along the same direction (so the KL term pulls against the step).

    Returns
    -------
    BiasCurve
        The log-log slope is fit over ``s > 0`` with nonzero bias.
    """
    s_arr = np.asarray(displacements, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("displacements must be nonnegative")
    pos = s_arr[s_arr > 0]
    if len(pos) < 2 or pos.max() / pos.min() < 10 * (1 - 1e-12):
        raise ValueError("positive displacements must span at least a decade")
    if G < 2:
        raise ValueError("the normalized advantage needs G >= 2")
    rng = np.random.default_rng(rng)
    if p_old is None:
        p_old = pol.random_params(env, 0.5, rng)
    if direction is None:
        direction = rng.standard_normal(p_old.dim)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if p_ref is None:
        p_ref = p_old.with_vector(p_old.vector + direction)

    count = env.n_prompts * len(env.outputs) ** G
    if mode == "auto":
        mode = "exact" if count <= cap else "monte_carlo"
    if mode == "exact":
        if count > cap:
            raise EnumerationCapError(count, cap, "group realizations")
        slots = _group_slots(p_old, env, G)
    elif mode == "monte_carlo":
        if reps < 100:
            raise ValueError("monte_carlo mode needs reps >= 100")
    else:
        raise ValueError(f"unknown mode {mode!r}")

    bias, half = [], []
    for s in s_arr:
        p_cur = p_old.with_vector(p_old.vector + s * direction)
        if mode == "exact":
            b = _bias_exact(p_cur, p_old, p_ref, env, kappa, G, slots, floor)
            bias.append(float(np.linalg.norm(b)))
            half.append(0.0)
        else:
            m, se = _bias_mc(p_cur, p_old, p_ref, env, kappa, G, reps, rng, floor)
            bias.append(float(np.linalg.norm(m)))
            # norm of a noisy mean: propagate the per-coordinate errors
            half.append(float(1.959963984540054 * np.linalg.norm(se)))
    b_arr = np.array(bias)
    keep = (s_arr > 0) & (b_arr > 0)
    slope = None
    if keep.sum() >= 2:
        slope = float(np.polyfit(np.log(s_arr[keep]), np.log(b_arr[keep]), 1)[0])
    return BiasCurve(s_arr.tolist(), bias, half, float(kappa), int(G), mode, slope)


# ---------------------------------------------------------------- arcsin check

def arcsin_objective(p: PolicyParams, env: Environment) -> float:
    """``Σ_x f_x · 2·arcsin(√V(x))``."""
    v = np.clip(pol.value_exact(p, env), 0.0, 1.0)
    return float(env.weights @ (2.0 * np.arcsin(np.sqrt(v))))


def _expected_advantage_gap(V: float, G: int) -> float:
    """``E[A | z=1] − E[A | z=0]`` for one group member with binary rewards.

    The other ``G−1`` members carry ``k ~ Bin(G−1, V)`` successes. With
    ``S`` total successes the sample variance is ``(S − S²/G)/(G−1)`` and the
    advantage is ``(z − k/(G−1))/se``; a zero ``se`` gives advantage 0.
    """
    k = np.arange(G)
    pk = binom.pmf(k, G - 1, V)
    out = 0.0
    for z, sign in ((1.0, 1.0), (0.0, -1.0)):
        S = z + k
        var = (S - S * S / G) / (G - 1)
        se = np.sqrt(np.maximum(var, 0.0))
        num = z - k / (G - 1)
        adv = np.divide(num, se, out=np.zeros_like(num), where=se > 0)
        out += sign * float(pk @ adv)
    return out


@dataclass
class ArcsinReport:
    G: int
    kappa: float
    mode: str
    values: list
    max_rel_error: float
    expected_gradient: list
    fd_gradient: list

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())


def arcsin_gradient_check(p: PolicyParams, env: Environment, G: int = 64, kappa: float = 0.0,
                          delta: float = 0.05, step: float = 1e-5, mode: str = "exact") -> ArcsinReport:
    """Compare the expected normalized-advantage gradient with ``∇ E[2·arcsin(√V)]``.

    At ``θ_cur = θ_old = θ_ref`` the KL term has zero mean for any ``κ``, so
    ``kappa`` only enters through the precondition check.

    Parameters
    ----------
    mode : {"exact", "limit"}
        ``exact`` uses the finite-``G`` expectation. Each output's advantage
        depends on the rest of the group only through the binomial success
        count, so no group enumeration is needed. ``limit`` replaces the
        advantage gap by its large-``G`` value ``1/√(V(1−V))``.
    step : float
        Central finite-difference step for the arcsin objective.

    Raises
    ------
    ValueError
        Rewards not binary, or some ``V(x)`` outside ``(δ, 1−δ)``.
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if G < 2:
        raise ValueError("the normalized advantage needs G >= 2")
    if not np.all(np.isin(env.rewards, (0.0, 1.0))):
        raise ValueError("arcsin check needs binary rewards in {0, 1}")
    V = pol.value_exact(p, env)
    for x, v in enumerate(V):
        if env.weights[x] > 0 and not (delta < v < 1 - delta):
            raise ValueError(f"V(x={x}) = {v:.6g} lies outside ({delta}, {1 - delta}); "
                             "the group std is degenerate")
    _, per = pol.exact_gradient(p, env, per_prompt=True)  # rows: ∇V(x), unweighted
    if mode == "exact":
        gaps = np.array([_expected_advantage_gap(v, G) for v in V])
    elif mode == "limit":
        gaps = 1.0 / np.sqrt(V * (1 - V))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    expected = (env.weights * gaps) @ per

    theta = p.vector
    fd = np.empty_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = step
        fd[i] = (arcsin_objective(p.with_vector(theta + e), env)
                 - arcsin_objective(p.with_vector(theta - e), env)) / (2 * step)
    scale = np.abs(fd).max()
    rel = float(np.abs(expected - fd).max() / scale) if scale > 0 else float(np.abs(expected).max())
    return ArcsinReport(int(G), float(kappa), mode, V.tolist(), rel, expected.tolist(), fd.tolist())
