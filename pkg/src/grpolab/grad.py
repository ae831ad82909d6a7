"""Group-based policy-gradient estimators.

Two families live here:

* the meta estimator ``(1/(BG)) Σ_b Σ_g score(y_bg) (z_bg − C_bg)`` with a
  vanilla, leave-one-out, oracle-value or custom per-prompt baseline;
* the practical GRPO estimator with normalized advantages, token-level
  importance ratios against the sampling snapshot, and the token-level
  K3 KL-gradient term.

Each has a readable per-batch entry point working on :class:`GroupBatch`
objects and an array-based counterpart (``*_many``) that evaluates many
independent replications at once from enumerated output indices.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import policy as pol
from .env import Environment
from .policy import PolicyParams

DEFAULT_COVERAGE_FLOOR = 1e-8


class CoverageError(ValueError):
    """A token probability fell below the coverage floor."""

    def __init__(self, which: str, prompt, state, token: int, prob: float, floor: float):
        self.prompt, self.state, self.token, self.prob = prompt, state, token, prob
        super().__init__(
            f"coverage violation under {which} policy: prompt {prompt!r}, state {state!r}, "
            f"token {token} has probability {prob:.3e} < floor {floor:.3e}"
        )


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class BaselineKind:
    """Baseline subtracted from each reward.

    Use the constructors :meth:`vanilla`, :meth:`leave_one_out`,
    :meth:`oracle_value` and :meth:`custom`.
    """

    tag: str
    values: Mapping | None = field(default=None, compare=False)

    TAGS = ("vanilla", "leave_one_out", "oracle_value", "custom")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown baseline {self.tag!r}; expected one of {self.TAGS}")
        if (self.tag == "custom") != (self.values is not None):
            raise ValueError("custom baseline needs a prompt->value map (and only custom takes one)")

    @classmethod
    def vanilla(cls):
        return cls("vanilla")

    @classmethod
    def leave_one_out(cls):
        return cls("leave_one_out")

    @classmethod
    def oracle_value(cls):
        return cls("oracle_value")

    @classmethod
    def custom(cls, values: Mapping):
        return cls("custom", dict(values))

    @classmethod
    def parse(cls, spec) -> "BaselineKind":
        if isinstance(spec, BaselineKind):
            return spec
        if isinstance(spec, Mapping):
            return cls.custom(spec["custom"]) if "custom" in spec else cls(spec["tag"])
        aliases = {"loo": "leave_one_out", "oracle": "oracle_value"}
        return cls(aliases.get(spec, spec))

    @property
    def prompt_only(self) -> bool:
        return self.tag != "leave_one_out"

    @property
    def min_group(self) -> int:
        return 2 if self.tag == "leave_one_out" else 1

    def __str__(self):
        return self.tag


def baseline_per_prompt(kind: BaselineKind, p: PolicyParams, env: Environment) -> np.ndarray:
    """Per-prompt baseline values for prompt-only kinds, shape ``(P,)``."""
    if kind.tag == "vanilla":
        return np.zeros(env.n_prompts)
    if kind.tag == "oracle_value":
        return pol.value_exact(p, env)
    if kind.tag == "custom":
        out = np.empty(env.n_prompts)
        for x, pid in enumerate(env.prompt_ids):
            if pid in kind.values:
                out[x] = kind.values[pid]
            elif str(pid) in kind.values:
                out[x] = kind.values[str(pid)]
            else:
                raise ValueError(f"custom baseline has no value for prompt {pid!r}")
        return out
    raise ValueError("leave_one_out depends on the group, not only on the prompt")


@dataclass(frozen=True)
class GroupSample:
    """One prompt (by index into ``env.prompt_ids``) and its G scored outputs."""

    prompt: int
    outputs: tuple
    rewards: tuple

    def __post_init__(self):
        object.__setattr__(self, "outputs", tuple(tuple(int(t) for t in y) for y in self.outputs))
        object.__setattr__(self, "rewards", tuple(float(z) for z in self.rewards))
        if len(self.outputs) == 0 or len(self.outputs) != len(self.rewards):
            raise ValueError("a group needs G >= 1 outputs with one reward each")

    @property
    def G(self) -> int:
        return len(self.outputs)

    def indices(self, env: Environment) -> np.ndarray:
        try:
            return np.array([env.outputs.index[y] for y in self.outputs], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"output {exc.args[0]} is outside the environment horizon") from None


@dataclass(frozen=True)
class GroupBatch:
    groups: tuple
    snapshot_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ValueError("a batch needs B >= 1 groups")
        sizes = {g.G for g in self.groups}
        if len(sizes) != 1:
            raise ValueError(f"groups have unequal sizes {sorted(sizes)}")

    @property
    def B(self) -> int:
        return len(self.groups)

    @property
    def G(self) -> int:
        return self.groups[0].G

    def arrays(self, env: Environment):
        """``(prompts (B,), output indices (B, G), rewards (B, G))``."""
        xs = np.array([g.prompt for g in self.groups], dtype=np.intp)
        ks = np.stack([g.indices(env) for g in self.groups])
        zs = np.array([g.rewards for g in self.groups], dtype=float)
        return xs, ks, zs


@dataclass
class GradientEstimate:
    vector: np.ndarray
    estimator: str
    B: int
    G: int
    seed: int | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("gradient estimate has non-finite entries")

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "B": self.B, "G": self.G, "seed": self.seed,
                "vector": self.vector.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GradientEstimate":
        d = json.loads(text)
        return cls(np.array(d["vector"]), d["estimator"], d["B"], d["G"], d.get("seed"))


def snapshot_id(p: PolicyParams) -> str:
    return hashlib.sha1(p.logits.tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# sampling


def _as_generator(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_indices(p: PolicyParams, env: Environment, B: int, G: int, rng, reps: int | None = None):
    """Draw prompts and enumerated output indices.

    Returns ``xs`` of shape ``(B,)`` and ``ks`` of shape ``(B, G)``, or with a
    leading ``reps`` axis when ``reps`` is given.
    """
    if B < 1 or G < 1:
        raise ValueError(f"B and G must be >= 1, got B={B}, G={G}")
    rng = _as_generator(rng)
    lead = () if reps is None else (int(reps),)
    xs = rng.choice(env.n_prompts, size=lead + (B,), p=env.weights)
    ks = pol._inverse_cdf(pol.output_probs(p, env), xs[..., None], lead + (B, G), rng)
    return xs, ks


def collect_batch(p: PolicyParams, env: Environment, B: int, G: int, rng) -> GroupBatch:
    """Sample B prompts by weight and G i.i.d. outputs per prompt."""
    xs, ks = sample_indices(p, env, B, G, rng)
    seqs = env.outputs.sequences
    groups = [
        GroupSample(int(x), [seqs[k] for k in row], env.rewards[x, row])
        for x, row in zip(xs, ks)
    ]
    return GroupBatch(groups, snapshot_id(p))


# ---------------------------------------------------------------------------
# reward transforms


def leave_one_out_means(rewards) -> np.ndarray:
    """Mean of the other G−1 rewards in the group (last axis)."""
    z = np.asarray(rewards, dtype=float)
    G = z.shape[-1]
    if G < 2:
        raise ValueError("leave-one-out baseline is undefined for G = 1")
    return (z.sum(axis=-1, keepdims=True) - z) / (G - 1)


def group_standard_error(rewards) -> np.ndarray:
    """Sample standard deviation with the G−1 divisor along the last axis."""
    z = np.asarray(rewards, dtype=float)
    if z.shape[-1] < 2:
        raise ValueError("the group standard error needs G >= 2")
    return z.std(axis=-1, ddof=1)


def advantage_normalized(rewards, eps_policy: float = 0.0) -> np.ndarray:
    """Leave-one-out centred rewards divided by the group standard error.

    Parameters
    ----------
    rewards : array_like, shape (..., G)
    eps_policy : float
        Additive regulariser on the standard error. With the default 0 a
        group whose rewards are all equal gets all-zero advantages.
    """
    if eps_policy < 0:
        raise ValueError("eps_policy must be >= 0")
    z = np.asarray(rewards, dtype=float)
    centred = z - leave_one_out_means(z)
    se = group_standard_error(z)[..., None] + eps_policy
    safe = np.where(se > 0, se, 1.0)
    return np.where(se > 0, centred / safe, 0.0)


def _coefficients(p, env, xs, ks, zs, baseline: BaselineKind) -> np.ndarray:
    if zs.shape[-1] < baseline.min_group:
        raise ValueError(f"{baseline.tag} baseline requires G >= {baseline.min_group}")
    if baseline.tag == "leave_one_out":
        return zs - leave_one_out_means(zs)
    return zs - baseline_per_prompt(baseline, p, env)[xs][..., None]


# ---------------------------------------------------------------------------
# meta estimator


def _score_table(p: PolicyParams, env: Environment) -> np.ndarray:
    """Local score blocks stacked over prompts, shape ``(P, K, S*V)``."""
    return np.stack([pol.local_scores(p, env, x) for x in range(env.n_prompts)])


def _weighted_scores(env, table, xs, ks, coef) -> np.ndarray:
    """``Σ coef · score(x, k)`` per replication, as full-length vectors.

    ``xs`` is ``(R, B)``, ``ks`` and ``coef`` are ``(R, B, G)``.
    """
    R = xs.shape[0]
    P, K, D = table.shape
    acc = np.zeros((R, P, K))
    rows = np.broadcast_to(np.arange(R)[:, None, None], ks.shape)
    np.add.at(acc, (rows, np.broadcast_to(xs[..., None], ks.shape), ks), coef)
    return np.einsum("rpk,pkd->rpd", acc, table).reshape(R, P * D)


def meta_gradients_many(p: PolicyParams, env: Environment, xs, ks, baseline) -> np.ndarray:
    """Meta estimator for many replications at once.

    Parameters
    ----------
    xs : ndarray, shape (R, B) or (B,)
    ks : ndarray, shape (R, B, G) or (B, G)
        Enumerated output indices as returned by :func:`sample_indices`.

    Returns
    -------
    ndarray, shape (R, d), or (d,) for a single batch
    """
    baseline = BaselineKind.parse(baseline)
    xs, ks = np.asarray(xs), np.asarray(ks)
    squeeze = xs.ndim == 1
    if squeeze:
        xs, ks = xs[None], ks[None]
    zs = env.rewards[xs[..., None], ks]
    coef = _coefficients(p, env, xs, ks, zs, baseline)
    B, G = ks.shape[-2:]
    out = _weighted_scores(env, _score_table(p, env), xs, ks, coef / (B * G))
    return out[0] if squeeze else out


def estimate_gradient_meta(p: PolicyParams, env: Environment, batch: GroupBatch,
                           baseline, seed: int | None = None) -> GradientEstimate:
    """Meta estimator ``(1/(BG)) Σ score · (z − C)`` on one batch.

    The oracle baseline is evaluated at ``p``, which must be the policy that
    generated the batch.
    """
    baseline = BaselineKind.parse(baseline)
    if baseline.tag == "oracle_value" and batch.snapshot_id not in (None, snapshot_id(p)):
        raise ValueError("oracle baseline must use the policy snapshot that generated the batch")
    xs, ks, zs = batch.arrays(env)
    coef = _coefficients(p, env, xs, ks, zs, baseline) / (batch.B * batch.G)
    vec = _weighted_scores(env, _score_table(p, env), xs[None], ks[None], coef[None])[0]
    return GradientEstimate(vec, baseline.tag, batch.B, batch.G, seed)


# ---------------------------------------------------------------------------
# practical estimator


def _check_coverage(which, probs, env, xs, ks, floor):
    space = env.outputs
    mask = space.path_mask[ks]
    vals = np.where(mask, probs[xs[..., None], ks], 1.0)
    if np.any(vals < floor):
        idx = np.unravel_index(np.argmin(vals), vals.shape)
        b, g, t = idx[-3:]
        lead = idx[:-3]
        x = int(xs[lead + (b,)])
        k = int(ks[lead + (b, g)])
        state = space.states[space.path_states[k, t]]
        raise CoverageError(which, env.prompt_ids[x], state, int(space.path_tokens[k, t]),
                            float(vals[idx]), floor)


def practical_gradients_many(p_cur, p_old, p_ref, env, xs, ks, kappa: float,
                             eps_policy: float = 0.0,
                             floor: float = DEFAULT_COVERAGE_FLOOR,
                             ratio: str = "token") -> np.ndarray:
    """Practical GRPO estimator for many replications; see :func:`estimate_gradient_practical`.

    With ``ratio="sequence"`` every token of an output uses the whole-sequence
    ratio ``π_cur(y)/π_old(y)`` in place of the per-token ratio, and the KL
    term is weighted by the same ratio. That variant is the importance-weighted
    reference the per-token estimator approximates; it is used to measure the
    per-token estimator's bias.
    """
    if ratio not in ("token", "sequence"):
        raise ValueError(f"ratio must be 'token' or 'sequence', got {ratio!r}")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    xs, ks = np.asarray(xs), np.asarray(ks)
    squeeze = xs.ndim == 1
    if squeeze:
        xs, ks = xs[None], ks[None]
    R, B, G = ks.shape
    step_cur = pol.step_probs(p_cur, env)
    step_old = pol.step_probs(p_old, env)
    step_ref = pol.step_probs(p_ref, env)
    for name, sp in (("current", step_cur), ("old", step_old), ("reference", step_ref)):
        _check_coverage(name, sp, env, xs, ks, floor)

    adv = advantage_normalized(env.rewards[xs[..., None], ks], eps_policy)  # (R, B, G)
    # per-(prompt, output, step) coefficient tables, then gather
    mask = env.outputs.path_mask[None]
    kl_part = np.where(mask, kappa * (step_ref / step_cur - 1.0), 0.0)  # (P, K, T)
    if ratio == "token":
        ratio = np.where(mask, step_cur / step_old, 0.0)
    else:
        seq = np.exp(pol.output_log_probs(p_cur, env) - pol.output_log_probs(p_old, env))
        ratio = np.where(mask, seq[..., None], 0.0)
        kl_part = kl_part * seq[..., None]

    P, K, T = ratio.shape
    n_s, n_a = env.n_states, env.alphabet.size
    step_scores = np.stack([pol.local_step_scores(p_cur, env, x) for x in range(P)])
    step_scores = step_scores.reshape(P, K, T, n_s * n_a)
    # accumulate Σ adv·ratio_t and Σ kl_t per (prompt, output, step)
    acc = np.zeros((R, P, K))
    cnt = np.zeros((R, P, K))
    rows = np.broadcast_to(np.arange(R)[:, None, None], ks.shape)
    xb = np.broadcast_to(xs[..., None], ks.shape)
    np.add.at(acc, (rows, xb, ks), adv)
    np.add.at(cnt, (rows, xb, ks), 1.0)
    coef = acc[..., None] * ratio[None] + cnt[..., None] * kl_part[None]  # (R, P, K, T)
    out = np.einsum("rpkt,pktd->rpd", coef, step_scores).reshape(R, P * n_s * n_a) / (B * G)
    return out[0] if squeeze else out


def estimate_gradient_practical(p_cur: PolicyParams, p_old: PolicyParams, p_ref: PolicyParams,
                                env: Environment, batch: GroupBatch, kappa: float,
                                eps_policy: float = 0.0, floor: float = DEFAULT_COVERAGE_FLOOR,
                                seed: int | None = None) -> GradientEstimate:
    """Practical GRPO gradient on a batch generated under ``p_old``.

    Every token contributes ``∇log π_cur,t · [(π_cur,t/π_old,t)·A + κ(π_ref,t/π_cur,t − 1)]``
    where ``A`` is the group's normalized advantage; contributions are
    summed over tokens and averaged over the group and the batch.

    Raises
    ------
    CoverageError
        When any visited token probability under the current, old or
        reference policy is below ``floor``.
    """
    if batch.G < 2:
        raise ValueError("normalized advantages require G >= 2")
    xs, ks, _ = batch.arrays(env)
    vec = practical_gradients_many(p_cur, p_old, p_ref, env, xs, ks, kappa, eps_policy, floor)
    return GradientEstimate(vec, "practical", batch.B, batch.G, seed)


# ---------------------------------------------------------------------------
# KL diagnostic


def k3_terms(p: PolicyParams, p_ref: PolicyParams, env: Environment, xs, ks) -> np.ndarray:
    """Per-sample ``r − log r − 1`` with whole-sequence ``r = π_ref/π``."""
    lp = pol.output_log_probs(p, env)
    lr = pol.output_log_probs(p_ref, env)
    xs, ks = np.asarray(xs), np.asarray(ks)
    a = lp[xs[..., None], ks] if ks.ndim > xs.ndim else lp[xs, ks]
    b = lr[xs[..., None], ks] if ks.ndim > xs.ndim else lr[xs, ks]
    if np.any(~np.isfinite(a)) or np.any(np.exp(a) == 0):
        raise ValueError("sampled output has zero probability under the sampling policy")
    log_r = b - a
    # expm1 keeps precision when r is near 1
    return np.expm1(log_r) - log_r


def k3_kl_estimate(p: PolicyParams, p_ref: PolicyParams, env: Environment, batch: GroupBatch) -> float:
    """K3 estimate of ``KL(π ‖ π_ref)`` averaged over the batch."""
    xs, ks, _ = batch.arrays(env)
    return float(k3_terms(p, p_ref, env, xs, ks).mean())
