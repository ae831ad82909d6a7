"""Tabular autoregressive softmax policies and exact enumeration oracles.

One softmax over the full alphabet sits at every (prompt, decision prefix)
pair. Parameters are stored as a ``(n_prompts, n_states, alphabet_size)``
logit array; the flat vector view is the θ every estimator works with, with
index ``(x * n_states + s) * alphabet_size + a``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .env import Environment

DEFAULT_HESSIAN_CAP = 200


@dataclass(frozen=True, eq=False)
class PolicyParams:
    logits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.logits, dtype=float)
        if arr.ndim != 3:
            raise ValueError(f"logits must be 3-d (prompts, states, tokens), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @property
    def dim(self) -> int:
        return self.logits.size

    @property
    def vector(self) -> np.ndarray:
        return self.logits.reshape(-1)

    def with_vector(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.asarray(theta, dtype=float).reshape(self.logits.shape))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy())

    def flat_index(self, x: int, s: int, a: int) -> int:
        _, n_s, n_a = self.logits.shape
        return (x * n_s + s) * n_a + a


def _shape(env: Environment) -> tuple[int, int, int]:
    return env.n_prompts, env.n_states, env.alphabet.size


def zeros(env: Environment) -> PolicyParams:
    return PolicyParams(np.zeros(_shape(env)))


def random_params(env: Environment, scale: float = 1.0, rng=None) -> PolicyParams:
    rng = np.random.default_rng(rng)
    return PolicyParams(scale * rng.standard_normal(_shape(env)))


def from_vector(env: Environment, theta) -> PolicyParams:
    theta = np.asarray(theta, dtype=float)
    if theta.size != env.n_params:
        raise ValueError(f"expected {env.n_params} parameters, got {theta.size}")
    return PolicyParams(theta.reshape(_shape(env)))


def _check(p: PolicyParams, env: Environment):
    if p.logits.shape != _shape(env):
        raise ValueError(f"params shape {p.logits.shape} does not match environment {_shape(env)}")


def token_probs(p: PolicyParams) -> np.ndarray:
    """Softmax probabilities at every state, shape ``(prompts, states, tokens)``."""
    return softmax(p.logits, axis=-1)


def output_log_probs(p: PolicyParams, env: Environment) -> np.ndarray:
    """``log π(y_k | x)`` for every prompt and enumerated output, shape ``(P, K)``."""
    _check(p, env)
    space = env.outputs
    if env.n_states == 0:
        return np.zeros((env.n_prompts, len(space)))
    logp = log_softmax(p.logits, axis=-1)
    terms = logp[:, space.path_states, space.path_tokens]
    return np.where(space.path_mask[None], terms, 0.0).sum(axis=-1)


def output_probs(p: PolicyParams, env: Environment) -> np.ndarray:
    return np.exp(output_log_probs(p, env))


def step_probs(p: PolicyParams, env: Environment) -> np.ndarray:
    """Probability of the token taken at each decision step, shape ``(P, K, T-1)``.

    Steps that do not exist are filled with 1.
    """
    space = env.outputs
    probs = token_probs(p)[:, space.path_states, space.path_tokens]
    return np.where(space.path_mask[None], probs, 1.0)


def local_scores(p: PolicyParams, env: Environment, x: int) -> np.ndarray:
    """Total score of every output within prompt ``x``'s parameter block.

    Returns shape ``(K, n_states * alphabet_size)``; the score is zero
    outside the block.
    """
    return local_step_scores(p, env, x).sum(axis=1).reshape(len(env.outputs), -1)


def local_step_scores(p: PolicyParams, env: Environment, x: int) -> np.ndarray:
    """Per-step scores ``∇ log π_t`` within prompt ``x``'s block.

    Shape ``(K, T-1, n_states, alphabet_size)``; missing steps are zero.
    """
    _check(p, env)
    space = env.outputs
    n_k, n_t = space.path_mask.shape
    _, n_s, n_a = _shape(env)
    out = np.zeros((n_k, n_t, n_s, n_a))
    if n_s == 0:
        return out
    probs = softmax(p.logits[x], axis=-1)
    ks, ts = np.nonzero(space.path_mask)
    ss = space.path_states[ks, ts]
    out[ks, ts, ss, :] -= probs[ss]
    out[ks, ts, ss, space.path_tokens[ks, ts]] += 1.0
    return out


def block_slice(env: Environment, x: int) -> slice:
    size = env.n_states * env.alphabet.size
    return slice(x * size, (x + 1) * size)


def embed(env: Environment, x: int, local: np.ndarray) -> np.ndarray:
    """Place a local block vector (or stack of them) into the full parameter space."""
    local = np.asarray(local)
    full = np.zeros(local.shape[:-1] + (env.n_params,))
    full[..., block_slice(env, x)] = local
    return full


def _seq_index(env: Environment, y: Sequence[int]) -> int:
    key = tuple(int(t) for t in y)
    k = env.outputs.index.get(key)
    if k is None:
        raise ValueError(f"{key} is not a terminating sequence within max_len={env.max_len}")
    return k


def sample_output(p: PolicyParams, env: Environment, x: int, rng) -> tuple[int, ...]:
    """Draw one sequence token by token from the per-prefix softmax."""
    _check(p, env)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    eos = env.alphabet.eos_id
    states = {s: i for i, s in enumerate(env.outputs.states)}
    seq: list[int] = []
    while len(seq) < env.max_len - 1:
        probs = softmax(p.logits[x, states[tuple(seq)]])
        token = int(rng.choice(env.alphabet.size, p=probs))
        seq.append(token)
        if token == eos:
            return tuple(seq)
    return tuple(seq) + (eos,)


def sample_output_indices(p: PolicyParams, env: Environment, x, size, rng) -> np.ndarray:
    """Draw enumerated output indices from ``π(· | x)`` by inverse CDF.

    ``x`` may be an int or an integer array broadcastable against ``size``.
    """
    probs = output_probs(p, env)
    return _inverse_cdf(probs, x, size, rng)


def _inverse_cdf(probs: np.ndarray, x, size, rng) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(size)
    x = np.broadcast_to(np.asarray(x), np.shape(u))
    out = np.empty(np.shape(u), dtype=np.intp)
    for xi in np.unique(x):
        m = x == xi
        out[m] = np.searchsorted(cdf[xi], u[m], side="right")
    return out


def log_prob(p: PolicyParams, env: Environment, x: int, y: Sequence[int]) -> float:
    return float(output_log_probs(p, env)[x, _seq_index(env, y)])


def score(p: PolicyParams, env: Environment, x: int, y: Sequence[int]) -> np.ndarray:
    """Total score ``Σ_t ∇_θ log π(y_t | x, y_<t)`` as a full-length vector."""
    k = _seq_index(env, y)
    return embed(env, x, local_scores(p, env, x)[k])


def value_exact(p: PolicyParams, env: Environment, x: int | None = None):
    """``V(x) = E[Z | x]`` by enumeration; all prompts when ``x`` is None."""
    v = (output_probs(p, env) * env.rewards).sum(axis=1)
    return v if x is None else float(v[x])


def objective(p: PolicyParams, env: Environment) -> float:
    """Expected reward ``J(θ) = Σ_x f(x) V(x)``."""
    return float(env.weights @ value_exact(p, env))


def exact_gradient(p: PolicyParams, env: Environment, per_prompt: bool = False):
    """``g(θ) = Σ_x f(x) g(x; θ)`` by enumeration.

    With ``per_prompt=True`` also returns the ``(P, d)`` array of
    unweighted per-prompt gradients ``g(x; θ)``.
    """
    probs = output_probs(p, env)
    per = np.zeros((env.n_prompts, env.n_params))
    for x in range(env.n_prompts):
        w = local_scores(p, env, x)
        per[x, block_slice(env, x)] = (probs[x] * env.rewards[x]) @ w
    total = env.weights @ per
    return (total, per) if per_prompt else total


def finite_difference_hessian(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    step: float = 1e-4,
    return_asymmetry: bool = False,
):
    """Central differences of a gradient oracle, symmetrized as (H + Hᵀ)/2."""
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    h = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        h[:, i] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * step)
    asym = float(np.max(np.abs(h - h.T))) if d else 0.0
    sym = (h + h.T) / 2
    return (sym, asym) if return_asymmetry else sym


def exact_hessian(
    p: PolicyParams,
    env: Environment,
    step: float = 1e-4,
    cap: int = DEFAULT_HESSIAN_CAP,
    return_asymmetry: bool = False,
):
    """Hessian of ``J`` by central differences of :func:`exact_gradient`."""
    if p.dim > cap:
        raise ValueError(f"parameter dimension {p.dim} exceeds Hessian cap {cap}")
    return finite_difference_hessian(
        lambda th: exact_gradient(p.with_vector(th), env),
        p.vector,
        step=step,
        return_asymmetry=return_asymmetry,
    )


def kl_exact(p: PolicyParams, p_ref: PolicyParams, env: Environment) -> float:
    """``KL(π_θ ‖ π_ref)`` averaged over the prompt distribution."""
    lp = output_log_probs(p, env)
    lr = output_log_probs(p_ref, env)
    per = (np.exp(lp) * (lp - lr)).sum(axis=1)
    return float(env.weights @ per)


def total_variation(p: PolicyParams, q: PolicyParams, env: Environment) -> np.ndarray:
    """Per-prompt total-variation distance between two policies."""
    return 0.5 * np.abs(output_probs(p, env) - output_probs(q, env)).sum(axis=1)


def save_csv(p: PolicyParams, env: Environment, path: str | Path) -> None:
    """Write one ``(prompt_id, state_id, token_id, logit)`` record per parameter."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prompt_id", "state_id", "token_id", "logit"])
        n_p, n_s, n_a = p.logits.shape
        for x in range(n_p):
            for s in range(n_s):
                for a in range(n_a):
                    w.writerow([env.prompt_ids[x], s, a, repr(float(p.logits[x, s, a]))])


def load_csv(env: Environment, path: str | Path) -> PolicyParams:
    logits = np.full(_shape(env), np.nan)
    lookup = {str(pid): x for x, pid in enumerate(env.prompt_ids)}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            x = lookup[row["prompt_id"]]
            logits[x, int(row["state_id"]), int(row["token_id"])] = float(row["logit"])
    if np.isnan(logits).any():
        raise ValueError(f"checkpoint {path} does not cover every parameter")
    return PolicyParams(logits)


# ---------------------------------------------------------------------------
# stacked evaluation over many parameter settings at once


def visit_tables(env: Environment) -> tuple[np.ndarray, np.ndarray]:
    """Static visit structure of every output.

    Returns ``taken`` of shape ``(K, S, V)`` with 1 where the output picks
    token ``a`` at state ``s``, and ``visits`` of shape ``(K, S)`` counting
    how often each state is visited (0 or 1 for full-prefix states). The
    score of output ``k`` is then ``taken[k] − visits[k][:, None] * π``.
    """
    space = env.outputs
    K = len(space)
    taken = np.zeros((K, env.n_states, env.alphabet.size))
    visits = np.zeros((K, env.n_states))
    ks, ts = np.nonzero(space.path_mask)
    np.add.at(taken, (ks, space.path_states[ks, ts], space.path_tokens[ks, ts]), 1.0)
    np.add.at(visits, (ks, space.path_states[ks, ts]), 1.0)
    return taken, visits


def stacked_output_log_probs(logits: np.ndarray, env: Environment) -> np.ndarray:
    """``log π(y_k | x)`` for a stack of logits ``(..., P, S, V)`` → ``(..., P, K)``."""
    taken, _ = visit_tables(env)
    logp = log_softmax(logits, axis=-1)
    return np.einsum("...psv,ksv->...pk", logp, taken)
