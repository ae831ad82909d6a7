"""Mean-squared-error laws of the group estimators.

Three independent routes to the same quantity are provided:

* closed forms from second moments under the enumerated output
  distribution (:func:`mse_exact`, :func:`gradient_covariance` in exact mode);
* brute-force summation over every batch realization (:func:`mse_exact_small`);
* plain Monte Carlo (:func:`mse_monte_carlo`).

The minibatch MSE splits as ``(1/B)[E_X‖g(X) − g‖² + E_X MSE_X]`` because the
B groups are i.i.d.; the per-prompt leave-one-out MSE is
``tr Σ_oracle / G + 2 E‖ζ2‖² / (G(G−1))`` where ``ζ2`` is the degenerate
second-order Hoeffding component.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .. import policy as pol
from ..env import EnumerationCapError, Environment
from ..grad import (BaselineKind, baseline_per_prompt, meta_gradients_many,
                    practical_gradients_many, sample_indices)
from ..policy import PolicyParams

DEFAULT_BRUTE_FORCE_CAP = 2_000_000
NORMALIZED = "normalized"


@dataclass
class MseReport:
    estimator: str
    B: int
    G: int
    replications: int
    mse_mean: float
    ci_halfwidth: float
    exact_mse: float | None = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())

    @property
    def ci(self) -> tuple[float, float]:
        return self.mse_mean - self.ci_halfwidth, self.mse_mean + self.ci_halfwidth


@dataclass(frozen=True)
class PromptMoments:
    """Enumerated quantities for one prompt, in the prompt's local block."""

    probs: np.ndarray  # (K,)
    scores: np.ndarray  # (K, D)
    rewards: np.ndarray  # (K,)
    value: float
    gradient: np.ndarray  # (D,)

    @property
    def centred(self) -> np.ndarray:
        """``W (z − V)`` per output, the oracle-baseline summand."""
        return self.scores * (self.rewards - self.value)[:, None]

    def trace_oracle(self) -> float:
        """``tr Σ_oracle = E‖W(Z − V)‖² − ‖g‖²``."""
        c = self.centred
        return float(self.probs @ np.einsum("kd,kd->k", c, c) - self.gradient @ self.gradient)

    def h1(self) -> np.ndarray:
        return 0.5 * (self.centred + self.gradient)

    def kernel_moment(self) -> float:
        """``E‖h‖²`` over independent pairs."""
        W, z, pr = self.scores, self.rewards, self.probs
        sq = np.einsum("kd,kd->k", W, W)
        gram = W @ W.T
        dist = sq[:, None] + sq[None, :] - 2 * gram
        dz = (z[:, None] - z[None, :]) ** 2
        return float(0.25 * pr @ (dist * dz) @ pr)

    def second_order_moment(self) -> float:
        """``E‖ζ2‖² = E‖h‖² − 2E‖h1‖² + ‖h0‖²``."""
        h1 = self.h1()
        e_h1 = float(self.probs @ np.einsum("kd,kd->k", h1, h1))
        return self.kernel_moment() - 2 * e_h1 + float(self.gradient @ self.gradient)


def prompt_moments(p: PolicyParams, env: Environment, x: int) -> PromptMoments:
    probs = pol.output_probs(p, env)[x]
    W = pol.local_scores(p, env, x)
    z = env.rewards[x]
    return PromptMoments(probs, W, z, float(probs @ z), (probs * z) @ W)


def _parse_estimator(estimator):
    if isinstance(estimator, str) and estimator in (NORMALIZED, "practical"):
        return NORMALIZED
    return BaselineKind.parse(estimator)


def per_prompt_mse(p: PolicyParams, env: Environment, x: int, estimator, G: int,
                   moments: PromptMoments | None = None) -> float:
    """Exact MSE of the single-group estimator conditional on prompt ``x``."""
    kind = _parse_estimator(estimator)
    if kind == NORMALIZED:
        raise ValueError("no closed form for the normalized estimator; use mse_exact_small")
    if G < kind.min_group:
        raise ValueError(f"{kind.tag} baseline requires G >= {kind.min_group}")
    m = moments or prompt_moments(p, env, x)
    gg = float(m.gradient @ m.gradient)
    if kind.tag == "leave_one_out":
        return m.trace_oracle() / G + 2 * m.second_order_moment() / (G * (G - 1))
    c = baseline_per_prompt(kind, p, env)[x]
    v = m.scores * (m.rewards - c)[:, None]
    return (float(m.probs @ np.einsum("kd,kd->k", v, v)) - gg) / G


def prompt_variance(p: PolicyParams, env: Environment) -> float:
    """``E_X‖g(X; θ) − g(θ)‖²`` with ``X`` drawn from the prompt weights."""
    g, per = pol.exact_gradient(p, env, per_prompt=True)
    diff = per - g
    return float(env.weights @ np.einsum("pd,pd->p", diff, diff))


def mse_exact(p: PolicyParams, env: Environment, estimator, B: int, G: int) -> float:
    """Exact minibatch MSE ``E‖ĝ − g‖²`` from enumerated moments."""
    if B < 1:
        raise ValueError("B must be >= 1")
    inner = sum(env.weights[x] * per_prompt_mse(p, env, x, estimator, G)
                for x in range(env.n_prompts))
    return float((prompt_variance(p, env) + inner) / B)


def mse_split(p: PolicyParams, env: Environment, estimator, B: int, G: int) -> dict:
    """Prompt-variance and averaged per-prompt parts of the minibatch MSE."""
    pv = prompt_variance(p, env)
    pp = sum(env.weights[x] * per_prompt_mse(p, env, x, estimator, G) for x in range(env.n_prompts))
    return {"prompt_variance": pv / B, "per_prompt": pp / B, "total": (pv + pp) / B}


def _all_slots(p, env, G):
    """Every (prompt, group) realization with its probability."""
    probs = pol.output_probs(p, env)
    K = len(env.outputs)
    xs, ks, w = [], [], []
    for x in range(env.n_prompts):
        if env.weights[x] == 0:
            continue
        for combo in itertools.product(range(K), repeat=G):
            pr = env.weights[x] * np.prod(probs[x, list(combo)])
            if pr > 0:
                xs.append(x)
                ks.append(combo)
                w.append(pr)
    return np.array(xs), np.array(ks, dtype=np.intp), np.array(w)


def brute_force_count(env: Environment, B: int, G: int) -> int:
    return (env.n_prompts * len(env.outputs) ** G) ** B


def _estimates(p, env, estimator, xs, ks):
    if estimator == NORMALIZED:
        return practical_gradients_many(p, p, p, env, xs, ks, 0.0, floor=0.0)
    return meta_gradients_many(p, env, xs, ks, estimator)


def mse_exact_small(p: PolicyParams, env: Environment, estimator, B: int, G: int,
                    cap: int = DEFAULT_BRUTE_FORCE_CAP, chunk: int = 20000) -> float:
    """Exact MSE by summing over all ``(P·K^G)^B`` batch realizations.

    Raises
    ------
    EnumerationCapError
        When the number of realizations exceeds ``cap``.
    """
    kind = _parse_estimator(estimator)
    count = brute_force_count(env, B, G)
    if count > cap:
        raise EnumerationCapError(count, cap, "batch realizations")
    g = pol.exact_gradient(p, env)
    sx, sk, sw = _all_slots(p, env, G)
    n_slots = len(sw)
    total = 0.0
    tuples = itertools.product(range(n_slots), repeat=B)
    while True:
        block = np.array(list(itertools.islice(tuples, chunk)), dtype=np.intp)
        if block.size == 0:
            break
        est = _estimates(p, env, kind, sx[block], sk[block])
        err = np.einsum("rd,rd->r", est - g, est - g)
        total += float(np.prod(sw[block], axis=1) @ err)
    return total


def mse_monte_carlo(p: PolicyParams, env: Environment, estimator, B: int, G: int, reps: int,
                    rng, chunk: int = 20000, with_exact: bool = True) -> MseReport:
    """Monte-Carlo MSE with a 95% normal confidence interval."""
    if reps < 100:
        raise ValueError("mse_monte_carlo needs reps >= 100")
    kind = _parse_estimator(estimator)
    rng = np.random.default_rng(rng)
    g = pol.exact_gradient(p, env)
    errs = []
    done = 0
    while done < reps:
        r = min(chunk, reps - done)
        xs, ks = sample_indices(p, env, B, G, rng, reps=r)
        est = _estimates(p, env, kind, xs, ks)
        errs.append(np.einsum("rd,rd->r", est - g, est - g))
        done += r
    errs = np.concatenate(errs)
    half = 1.959963984540054 * errs.std(ddof=1) / np.sqrt(reps)
    exact = None
    if with_exact and kind != NORMALIZED:
        exact = mse_exact(p, env, kind, B, G)
    name = kind if isinstance(kind, str) else kind.tag
    return MseReport(name, B, G, reps, float(errs.mean()), float(half), exact)


def oracle_convergence_curve(p: PolicyParams, env: Environment, G_list, reps: int | None = None,
                             rng=None) -> dict:
    """Per-prompt MSE of the leave-one-out and oracle estimators across G.

    MSEs are conditional on the prompt and averaged over the prompt weights
    (so the prompt-variance term, which is common to both, is excluded).
    With ``reps`` given, Monte-Carlo estimates at ``B = 1`` are reported
    alongside.

    Returns a dict with columns ``G``, ``mse_loo``, ``mse_oracle``,
    ``difference`` and the log-log ``slope`` of the difference.
    """
    G_list = sorted(int(G) for G in G_list)
    if len(G_list) < 3 or G_list[-1] < 10 * G_list[0]:
        raise ValueError("G list needs at least 3 points spanning a decade")
    moms = [prompt_moments(p, env, x) for x in range(env.n_prompts)]
    w = env.weights
    loo, orc = [], []
    for G in G_list:
        loo.append(sum(w[x] * per_prompt_mse(p, env, x, "leave_one_out", G, moms[x]) for x in range(len(w))))
        orc.append(sum(w[x] * per_prompt_mse(p, env, x, "oracle_value", G, moms[x]) for x in range(len(w))))
    loo, orc = np.array(loo), np.array(orc)
    diff = loo - orc
    out = {"G": G_list, "mse_loo": loo.tolist(), "mse_oracle": orc.tolist(), "difference": diff.tolist()}
    if np.all(diff > 0):
        out["slope"] = float(np.polyfit(np.log(G_list), np.log(diff), 1)[0])
    else:
        out["slope"] = float("nan")
    if reps:
        rng = np.random.default_rng(rng)
        pv = prompt_variance(p, env)
        mc = {"leave_one_out": [], "oracle_value": []}
        for G in G_list:
            for est in mc:
                rep = mse_monte_carlo(p, env, est, 1, G, reps, rng, with_exact=False)
                mc[est].append(rep.mse_mean - pv)
        out["mc_loo"], out["mc_oracle"] = mc["leave_one_out"], mc["oracle_value"]
    return out


def _outer_mean(pr, vecs):
    return np.einsum("k,ki,kj->ij", pr, vecs, vecs)


def per_prompt_covariance(p: PolicyParams, env: Environment, x: int, estimator, G: int,
                          moments: PromptMoments | None = None) -> np.ndarray:
    """Exact covariance of the single-group estimator given ``x`` (local block)."""
    kind = _parse_estimator(estimator)
    if kind == NORMALIZED:
        raise ValueError("no closed form for the normalized estimator")
    m = moments or prompt_moments(p, env, x)
    g0 = np.outer(m.gradient, m.gradient)
    if kind.tag == "leave_one_out":
        if G < 2:
            raise ValueError("leave_one_out baseline requires G >= 2")
        n_pairs = G * (G - 1) / 2
        return (kernel_covariance(m) + 2 * (G - 2) * (_outer_mean(m.probs, m.h1()) - g0)) / n_pairs
    c = baseline_per_prompt(kind, p, env)[x]
    v = m.scores * (m.rewards - c)[:, None]
    return (_outer_mean(m.probs, v) - g0) / G


def kernel_covariance(m: PromptMoments) -> np.ndarray:
    """``Cov(h)`` over independent pairs."""
    W, z, pr = m.scores, m.rewards, m.probs
    diffs = 0.5 * (W[:, None, :] - W[None, :, :]) * (z[:, None] - z[None, :])[..., None]
    second = np.einsum("k,l,kli,klj->ij", pr, pr, diffs, diffs)
    return second - np.outer(m.gradient, m.gradient)


def second_order_covariance(m: PromptMoments) -> np.ndarray:
    """``E[ζ2 ζ2ᵀ] = Cov(h) − 2 Cov(h1)``."""
    g0 = np.outer(m.gradient, m.gradient)
    return kernel_covariance(m) - 2 * (_outer_mean(m.probs, m.h1()) - g0)


def gradient_covariance(p, env, estimator, B: int, G: int, mode: str = "exact",
                        reps: int = 100000, rng=None) -> np.ndarray:
    """Covariance of the minibatch gradient estimate at fixed parameters.

    Parameters
    ----------
    p, env : PolicyParams, Environment
        Or ``p=None`` and a :class:`~grpolab.analysis.asymptotics.SyntheticQuadratic`
        as ``env``, in which case its noise covariance is returned.
    mode : {"exact", "monte_carlo"}
    """
    if hasattr(env, "gamma") and not isinstance(env, Environment):
        return np.array(env.gamma, dtype=float)
    kind = _parse_estimator(estimator)
    if mode == "monte_carlo":
        rng = np.random.default_rng(rng)
        xs, ks = sample_indices(p, env, B, G, rng, reps=reps)
        est = _estimates(p, env, kind, xs, ks)
        return np.cov(est, rowvar=False)
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    g, per = pol.exact_gradient(p, env, per_prompt=True)
    diff = per - g
    cov = np.einsum("p,pi,pj->ij", env.weights, diff, diff)
    for x in range(env.n_prompts):
        sl = pol.block_slice(env, x)
        cov[sl, sl] += env.weights[x] * per_prompt_covariance(p, env, x, kind, G)
    return cov / B


def score_reward_correlation(p: PolicyParams, env: Environment) -> np.ndarray:
    """Per-prompt correlation between ``‖score‖²`` and ``Z`` under ``π(·|x)``.

    A diagnostic for the conditional-uncorrelation hypothesis; zero
    variance in either quantity gives ``nan``.
    """
    out = np.full(env.n_prompts, np.nan)
    for x in range(env.n_prompts):
        m = prompt_moments(p, env, x)
        s = np.einsum("kd,kd->k", m.scores, m.scores)
        ms, mz = m.probs @ s, m.value
        cov = m.probs @ ((s - ms) * (m.rewards - mz))
        vs, vz = m.probs @ (s - ms) ** 2, m.probs @ (m.rewards - mz) ** 2
        if vs > 0 and vz > 0:
            out[x] = cov / np.sqrt(vs * vz)
    return out
