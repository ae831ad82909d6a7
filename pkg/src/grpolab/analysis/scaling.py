"""Fixed-budget group-size trade-off.

With ``N = B·G`` samples per step the leave-one-out MSE behaves like
``c1·G/N + c2/N + c3/(N·G)``: ``c1`` is the prompt-to-prompt gradient
variance, ``c2`` the oracle (first-order) variance and ``c3`` the
second-order coefficient. The minimizing group size is ``G* = √(c3/c1)``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..env import Environment
from ..optim import TrainConfig, train_meta_batched
from ..policy import PolicyParams
from .mse import mse_exact, per_prompt_mse, prompt_moments, prompt_variance

DEFAULT_G_PAIR = (2, 32)


@dataclass
class ScalingEstimate:
    c1: float
    c2: float
    c3: float
    g_star: float
    probes: str
    G_pair: tuple
    single_prompt: bool = False

    def to_dict(self):
        d = asdict(self)
        d["G_pair"] = list(self.G_pair)
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    def model_mse(self, N: int, G) -> np.ndarray:
        """``c1·G/N + c2/N + c3/(N·G)``."""
        G = np.asarray(G, dtype=float)
        return (self.c1 * G + self.c2 + self.c3 / G) / N


def _per_prompt_parts(p, env):
    moms = [prompt_moments(p, env, x) for x in range(env.n_prompts)]
    return moms, float(sum(env.weights[x] * moms[x].trace_oracle() for x in range(env.n_prompts)))


def _scaled_per_prompt_mse(p, env, moms, G):
    """``G · E_X MSE_X(G)`` for the leave-one-out estimator."""
    return G * sum(env.weights[x] * per_prompt_mse(p, env, x, "leave_one_out", G, moms[x])
                   for x in range(env.n_prompts))


def estimate_constants(p_set, env: Environment, G_pair=DEFAULT_G_PAIR) -> ScalingEstimate:
    """Scaling-law constants, each maximized over the probe policies.

    ``c1`` and ``c2`` are exact. ``c3`` comes from the exact per-prompt
    leave-one-out MSE at the two group sizes in ``G_pair`` by solving
    ``G·MSE(G) = c2' + c3/G`` at both points.
    """
    if isinstance(p_set, PolicyParams):
        p_set = [p_set]
    if not p_set:
        raise ValueError("estimate_constants needs at least one probe policy")
    Ga, Gb = sorted(int(g) for g in G_pair)
    if Ga < 2 or Ga == Gb:
        raise ValueError("G_pair needs two distinct group sizes >= 2")
    c1 = c2 = c3 = 0.0
    for p in p_set:
        moms, tr = _per_prompt_parts(p, env)
        ma = _scaled_per_prompt_mse(p, env, moms, Ga)
        mb = _scaled_per_prompt_mse(p, env, moms, Gb)
        c1 = max(c1, prompt_variance(p, env))
        c2 = max(c2, tr)
        c3 = max(c3, (ma - mb) / (1.0 / Ga - 1.0 / Gb))
    single = c1 <= 0.0
    g_star = float("inf") if single else float(np.sqrt(c3 / c1))
    return ScalingEstimate(float(c1), float(c2), float(c3), g_star, f"{len(p_set)} probe(s)",
                           (Ga, Gb), single)


def second_order_coefficient(p: PolicyParams, env: Environment) -> float:
    """``2 E_X E‖ζ2‖²``, the exact coefficient of ``1/(G(G−1))`` in the per-prompt MSE."""
    return float(2 * sum(env.weights[x] * prompt_moments(p, env, x).second_order_moment()
                         for x in range(env.n_prompts)))


def fixed_budget_curve(p: PolicyParams, env: Environment, N: int, G_list,
                       estimate: ScalingEstimate | None = None) -> dict:
    """Exact leave-one-out MSE at ``B = N/G`` next to the three-constant model."""
    est = estimate or estimate_constants(p, env)
    G_list = [int(G) for G in G_list]
    for G in G_list:
        if N % G:
            raise ValueError(f"N={N} is not divisible by G={G}")
    exact = np.array([mse_exact(p, env, "leave_one_out", N // G, G) for G in G_list])
    model = est.model_mse(N, G_list)
    rel = np.abs(model - exact) / exact
    return {"G": G_list, "B": [N // G for G in G_list], "exact": exact.tolist(),
            "model": model.tolist(), "rel_error": rel.tolist(), "max_rel_error": float(rel.max()),
            "exact_argmin": G_list[int(np.argmin(exact))]}


def _sweep_cell(args):
    env, config, runs, seed, p0, checkpoints = args
    out = train_meta_batched(env, config, runs, np.random.default_rng(seed), p0, checkpoints)
    return out["J"], out["final_gap"], out["clipped"]


def _ci(values):
    values = np.asarray(values, dtype=float)
    half = 1.959963984540054 * values.std(ddof=1) / np.sqrt(len(values)) if len(values) > 1 else 0.0
    m = float(values.mean())
    return m, m - half, m + half


def group_size_sweep(env: Environment, N: int, G_list, config: TrainConfig, runs: int, seed=0,
                     p0: PolicyParams | None = None, n_list=None, workers: int = 1) -> dict:
    """Train at every ``G`` with ``B = N/G`` and compare final objectives.

    Parameters
    ----------
    config : TrainConfig
        Template; its ``B`` and ``G`` are overwritten per cell and its ``n``
        is replaced by ``max(n_list)`` when ``n_list`` is given.
    n_list : sequence of int, optional
        Horizons at which the final objective is read off (all from the same
        runs). Defaults to ``[config.n]``.
    seed : int
        Cell ``j`` uses the stream ``SeedSequence(seed, spawn_key=(j,))``.

    Returns
    -------
    dict
        ``rows`` with one entry per (n, G) holding mean final J and gap with
        95% CIs, and ``argmax_G`` per horizon.
    """
    G_list = [int(G) for G in G_list]
    for G in G_list:
        if N % G:
            raise ValueError(f"N={N} is not divisible by G={G}")
    n_list = sorted(int(n) for n in (n_list or [config.n]))
    jobs = []
    for j, G in enumerate(G_list):
        cfg = replace(config, B=N // G, G=G, n=n_list[-1])
        seq = np.random.SeedSequence(seed, spawn_key=(j,))
        jobs.append((env, cfg, runs, seq, p0, n_list))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(job) for job in jobs]
    j_star = float(env.weights @ env.optimal_values())
    rows, argmax = [], {}
    for c, n in enumerate(n_list):
        means = []
        for G, (J, _, clipped) in zip(G_list, results):
            mj, lo, hi = _ci(J[c])
            mg, glo, ghi = _ci(np.maximum(j_star - J[c], 0.0))
            rows.append({"n": n, "G": G, "B": N // G, "runs": runs, "mean": mj, "ci_lo": lo, "ci_hi": hi,
                         "gap_mean": mg, "gap_ci_lo": glo, "gap_ci_hi": ghi, "clipped": clipped})
            means.append(mj)
        argmax[n] = G_list[int(np.argmax(means))]
    return {"N": N, "G_list": G_list, "n_list": n_list, "rows": rows, "argmax_G": argmax}


def rows_to_csv(rows, columns=("n", "G", "B", "runs", "mean", "ci_lo", "ci_hi")) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"
