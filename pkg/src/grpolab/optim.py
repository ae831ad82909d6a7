"""Training loops, step-size schedules and suboptimality bounds.

``train_meta`` is plain stochastic gradient ascent with the meta estimator
(fresh batch every step). ``train_grpo_practical`` samples once per outer
iteration under a frozen snapshot and then takes ``m`` minibatch steps with
the practical estimator. Both are wrapped as scikit-learn style estimators
(:class:`MetaPolicyGradient`, :class:`PracticalGRPO`) whose ``fit`` takes an
environment instead of a design matrix.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state

from . import policy as pol
from .env import Environment
from .grad import (BaselineKind, advantage_normalized, estimate_gradient_meta,
                   estimate_gradient_practical, collect_batch, leave_one_out_means)
from .policy import PolicyParams

DEFAULT_BOX_RADIUS = 30.0


# ---------------------------------------------------------------------------
# schedules and bounds


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    beta: float

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_iter"):
            raise ValueError(f"unknown schedule {self.kind!r}; expected constant or inverse_iter")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")

    def rate(self, i: int) -> float:
        """Step size ``η_i`` for the update producing ``θ_i`` (``i ≥ 1``)."""
        return self.beta if self.kind == "constant" else self.beta / i

    def check_stable(self, mu: float) -> None:
        if self.kind == "inverse_iter" and not self.beta > 1.0 / (2.0 * mu):
            raise ValueError(f"inverse_iter needs beta > 1/(2 mu) = {1 / (2 * mu):.6g}, got {self.beta}")


@dataclass(frozen=True)
class BoundParams:
    mu: float
    L: float
    M: float
    beta: float
    delta0: float

    def __post_init__(self):
        for name in ("mu", "L", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.M < 0 or self.delta0 < 0:
            raise ValueError("M and delta0 must be nonnegative")
        if self.mu > self.L * (1 + 1e-12):
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")


def _schedule_kind(schedule) -> str:
    return schedule.kind if isinstance(schedule, LrSchedule) else str(schedule)


def lemma2_recursion(schedule, params: BoundParams, n: int) -> np.ndarray:
    """The one-step bound iterated: ``u_i = (1 − 2μη_i + μLη_i²) u_{i−1} + ½Lη_i²M``.

    Returns ``u_0..u_n``.
    """
    kind = _schedule_kind(schedule)
    sched = LrSchedule(kind, params.beta)
    u = np.empty(n + 1)
    u[0] = params.delta0
    mu, L, M = params.mu, params.L, params.M
    for i in range(1, n + 1):
        eta = sched.rate(i)
        u[i] = (1 - 2 * mu * eta + mu * L * eta ** 2) * u[i - 1] + 0.5 * L * eta ** 2 * M
    return u


def lemma2_inverse_terms(params: BoundParams, n: int, eps: float = 0.1,
                         horizon: int | None = None) -> dict:
    """Both branches of the inverse-iteration bound at ``n``.

    The first branch is ``(1+ε)Lβ²M/((4μβ−2)n)``. The constant ``c`` of the
    second branch is measured as ``max_i i·u_i`` over the iterated one-step
    bound up to ``horizon`` (default ``n``), so that ``c/n ≥ u_n``.
    """
    mu, L, M, beta = params.mu, params.L, params.M, params.beta
    if not beta > 1 / (2 * mu):
        raise ValueError(f"inverse_iter requires beta > 1/(2 mu) = {1 / (2 * mu):.6g}")
    first = (1 + eps) * L * beta ** 2 * M / ((4 * mu * beta - 2) * n)
    u = lemma2_recursion("inverse_iter", params, max(n, horizon or n))
    c = float(np.max(np.arange(len(u))[1:] * u[1:]))
    return {"first_branch": first, "c": c, "c_branch": c / n, "bound": max(first, c / n),
            "recursion": float(u[n])}


def lemma2_bound(schedule, params: BoundParams, n: int, eps: float = 0.1,
                 horizon: int | None = None) -> float:
    """Suboptimality bound after ``n`` steps.

    Constant schedule: ``ρⁿΔ0 + Lβ²M/(4μβ − 2Lμβ²)`` with
    ``ρ = 1 − 2μβ + Lμβ²``, valid for ``0 < β < 1/(2L)``. Inverse schedule:
    ``max((1+ε)Lβ²M/((4μβ−2)n), c/n)``; see :func:`lemma2_inverse_terms`.
    """
    kind = _schedule_kind(schedule)
    mu, L, M, beta = params.mu, params.L, params.M, params.beta
    if kind == "constant":
        if not 0 < beta < 1 / (2 * L):
            raise ValueError(f"constant schedule requires 0 < beta < 1/(2L) = {1 / (2 * L):.6g}")
        rho = 1 - 2 * mu * beta + L * mu * beta ** 2
        return float(rho ** n * params.delta0 + L * beta ** 2 * M / (4 * mu * beta - 2 * L * mu * beta ** 2))
    if kind == "inverse_iter":
        return float(lemma2_inverse_terms(params, n, eps, horizon)["bound"])
    raise ValueError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------------------
# objectives


class BanditObjective:
    """Expected reward of the tabular policy as a function of the flat logit vector."""

    def __init__(self, env: Environment):
        self.env = env
        self.dim = env.n_params
        self.optimum_value = float(env.weights @ env.optimal_values())

    def _p(self, theta):
        return pol.from_vector(self.env, theta)

    def value(self, theta) -> float:
        return pol.objective(self._p(theta), self.env)

    def gap(self, theta) -> float:
        return max(self.optimum_value - self.value(theta), 0.0)

    def gradient(self, theta) -> np.ndarray:
        return pol.exact_gradient(self._p(theta), self.env)

    def sample_probe(self, rng, scale: float = 1.0) -> np.ndarray:
        return scale * rng.standard_normal(self.dim)


def as_objective(target):
    if isinstance(target, Environment):
        return BanditObjective(target)
    for attr in ("value", "gradient", "gap", "dim", "sample_probe"):
        if not hasattr(target, attr):
            raise TypeError(f"objective lacks {attr!r}")
    return target


def suboptimality_gap(p: PolicyParams, env: Environment) -> float:
    """``J* − J(θ)`` with ``J* = Σ_x f(x) max_y z(x, y)``; never negative."""
    j_star = float(env.weights @ env.optimal_values())
    return max(j_star - pol.objective(p, env), 0.0)


def estimate_smoothness_and_pl(target, probes=100, rng=None, scale: float = 1.0,
                               axis_step: float = 1e-3, min_gap: float = 1e-6):
    """Measured smoothness ``L̂`` and PL constant ``μ̂``.

    Parameters
    ----------
    target : Environment or objective
        Anything with ``value``, ``gradient``, ``gap``, ``dim`` and ``sample_probe``.
    probes : int or array_like
        Number of random probes, or the probe points themselves (rows).
    axis_step : float
        Each probe is also paired with its perturbations along every
        coordinate axis, so that ``L̂`` sees the principal curvature
        directions; set to 0 to use only probe-to-probe pairs.

    Returns
    -------
    L_hat, mu_hat : float
        ``L̂ = max ‖g(θ1) − g(θ2)‖ / ‖θ1 − θ2‖`` over pairs and
        ``μ̂ = min ‖g(θ)‖² / (2Δ(θ))`` over probes with ``Δ > min_gap``.
    """
    obj = as_objective(target)
    rng = check_random_state(rng) if not isinstance(rng, np.random.Generator) else rng
    if np.isscalar(probes):
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng.randint(2 ** 31))
        thetas = np.array([obj.sample_probe(gen, scale) for _ in range(int(probes))])
    else:
        thetas = np.atleast_2d(np.asarray(probes, dtype=float))
    grads = np.array([obj.gradient(t) for t in thetas])
    gaps = np.array([obj.gap(t) for t in thetas])
    ok = gaps > min_gap
    if not np.any(ok):
        raise ValueError("no admissible probes: every probe has suboptimality below "
                         f"{min_gap:g}, so the PL ratio is undefined")
    mu_hat = float(np.min(np.einsum("pd,pd->p", grads[ok], grads[ok]) / (2 * gaps[ok])))
    L_hat = 0.0
    if len(thetas) > 1:
        dth = thetas[:, None, :] - thetas[None, :, :]
        dg = grads[:, None, :] - grads[None, :, :]
        num = np.linalg.norm(dg, axis=-1)
        den = np.linalg.norm(dth, axis=-1)
        mask = den > 0
        L_hat = float(np.max(num[mask] / den[mask])) if np.any(mask) else 0.0
    if axis_step > 0:
        for t, g in zip(thetas, grads):
            for i in range(obj.dim):
                e = np.zeros(obj.dim)
                e[i] = axis_step
                L_hat = max(L_hat, float(np.linalg.norm(obj.gradient(t + e) - g) / axis_step))
    return L_hat, mu_hat


def measure_mse_bound(quad, probes, reps: int, rng) -> float:
    """Largest Monte-Carlo ``E‖ĝ − g‖²`` over probe points of a noisy objective."""
    rng = np.random.default_rng(rng)
    best = 0.0
    for theta in np.atleast_2d(probes):
        th = np.broadcast_to(theta, (reps, len(theta)))
        err = quad.noisy_gradient(th, rng) - quad.gradient(th)
        best = max(best, float(np.einsum("rd,rd->r", err, err).mean()))
    return best


# ---------------------------------------------------------------------------
# configuration and traces


@dataclass
class TrainConfig:
    B: int
    G: int
    n: int
    schedule: LrSchedule
    baseline: BaselineKind | str = "leave_one_out"
    kappa: float = 0.0
    m: int = 1
    seed: int | None = None
    box_radius: float | None = DEFAULT_BOX_RADIUS
    snapshot_stride: int = 0
    record_every: int = 1
    eps_policy: float = 0.0
    floor: float = 1e-8

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = LrSchedule(**self.schedule)
        for name in ("B", "G", "n", "m", "record_every"):
            v = getattr(self, name)
            if (name == "n" and v < 0) or (name != "n" and v < 1):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.practical:
            if self.B % self.m:
                raise ValueError(f"m={self.m} must divide B={self.B}")
            if self.G < 2:
                raise ValueError("practical GRPO requires G >= 2")
            if self.kappa < 0:
                raise ValueError("kappa must be >= 0")
        else:
            self.baseline = BaselineKind.parse(self.baseline)
            if self.G < self.baseline.min_group:
                raise ValueError(f"{self.baseline.tag} baseline requires G >= {self.baseline.min_group}")

    @property
    def practical(self) -> bool:
        return self.baseline == "practical"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        d["baseline"] = str(self.baseline) if not isinstance(self.baseline, BaselineKind) else (
            {"custom": self.baseline.values} if self.baseline.tag == "custom" else self.baseline.tag)
        return d


@dataclass
class TrainTrace:
    iteration: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    clipped: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    error: str | None = None

    def record(self, i, p, env, gnorm, clipped):
        if self.iteration and i <= self.iteration[-1]:
            raise ValueError("trace iterations must be strictly increasing")
        j = pol.objective(p, env)
        self.iteration.append(int(i))
        self.objective.append(j)
        self.gap.append(max(float(env.weights @ env.optimal_values()) - j, 0.0))
        self.grad_norm.append(float(gnorm))
        self.clipped.append(bool(clipped))

    @property
    def n_clipped(self) -> int:
        return int(sum(self.clipped))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["iter", "J", "gap", "grad_norm", "clipped"])
        for row in zip(self.iteration, self.objective, self.gap, self.grad_norm, self.clipped):
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), int(row[4])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def header_json(self) -> str:
        return json.dumps({"config": self.config, "error": self.error, "n_clipped": self.n_clipped})

    def save(self, directory, env: Environment) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.to_csv(d / "trace.csv")
        (d / "trace_header.json").write_text(self.header_json())
        for i, logits in self.snapshots.items():
            pol.save_csv(PolicyParams(logits), env, d / f"snapshot_{i:06d}.csv")


def _project(theta: np.ndarray, radius):
    if radius is None:
        return theta, False
    clipped = bool(np.any(np.abs(theta) > radius))
    return (np.clip(theta, -radius, radius) if clipped else theta), clipped


def _generator(rng, seed):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(seed if rng is None else rng)


def _should_record(i, config):
    return i % config.record_every == 0 or i == config.n


def train_meta(env: Environment, config: TrainConfig, rng=None, p0: PolicyParams | None = None) -> TrainTrace:
    """Stochastic gradient ascent with the meta estimator and a fresh batch per step."""
    if config.practical:
        raise ValueError("use train_grpo_practical for the practical estimator")
    rng = _generator(rng, config.seed)
    p = p0 if p0 is not None else pol.zeros(env)
    trace = TrainTrace(config=config.to_dict())
    trace.record(0, p, env, 0.0, False)
    for i in range(1, config.n + 1):
        batch = collect_batch(p, env, config.B, config.G, rng)
        g = estimate_gradient_meta(p, env, batch, config.baseline).vector
        theta, clipped = _project(p.vector + config.schedule.rate(i) * g, config.box_radius)
        if not np.all(np.isfinite(theta)):
            trace.error = f"non-finite parameters at iteration {i}"
            break
        p = p.with_vector(theta)
        if _should_record(i, config):
            trace.record(i, p, env, np.linalg.norm(g), clipped)
        if config.snapshot_stride and i % config.snapshot_stride == 0:
            trace.snapshots[i] = p.logits.copy()
    trace.final_params = p
    return trace


def train_grpo_practical(env: Environment, config: TrainConfig, rng=None, p0: PolicyParams | None = None,
                         p_ref: PolicyParams | None = None) -> TrainTrace:
    """Minibatched GRPO: sample under a frozen snapshot, then ``m`` sequential updates.

    All ``m`` inner steps of outer iteration ``i`` use ``η_i``. Minibatches
    follow the sampled prompt order.
    """
    if not config.practical:
        raise ValueError("config.baseline must be 'practical'")
    rng = _generator(rng, config.seed)
    p = p0 if p0 is not None else pol.zeros(env)
    p_ref = p_ref if p_ref is not None else p
    trace = TrainTrace(config=config.to_dict())
    trace.record(0, p, env, 0.0, False)
    size = config.B // config.m
    from .grad import GroupBatch

    for i in range(1, config.n + 1):
        p_old = p
        batch = collect_batch(p_old, env, config.B, config.G, rng)
        eta = config.schedule.rate(i)
        any_clip, gnorm = False, 0.0
        for j in range(config.m):
            mini = GroupBatch(batch.groups[j * size:(j + 1) * size], batch.snapshot_id)
            g = estimate_gradient_practical(p, p_old, p_ref, env, mini, config.kappa,
                                            config.eps_policy, config.floor).vector
            theta, clipped = _project(p.vector + eta * g, config.box_radius)
            any_clip |= clipped
            gnorm = np.linalg.norm(g)
            if not np.all(np.isfinite(theta)):
                trace.error = f"non-finite parameters at iteration {i}"
                trace.final_params = p
                return trace
            p = p.with_vector(theta)
        if _should_record(i, config):
            trace.record(i, p, env, gnorm, any_clip)
        if config.snapshot_stride and i % config.snapshot_stride == 0:
            trace.snapshots[i] = p.logits.copy()
    trace.final_params = p
    return trace


# ---------------------------------------------------------------------------
# many independent runs at once (meta estimator)


def train_meta_batched(env: Environment, config: TrainConfig, runs: int, rng=None,
                       p0: PolicyParams | None = None, checkpoints=None) -> dict:
    """Run ``runs`` independent meta-estimator trainings in lock step.

    Every run draws its own batches; the runs only share array operations.
    Results are deterministic given ``rng`` but are not bit-identical to
    :func:`train_meta` with the same seed (the streams are laid out
    differently).

    Returns
    -------
    dict
        ``final_J`` (runs,), ``final_gap`` (runs,), ``checkpoints``, the
        per-run objective at each checkpoint ``J`` (len(checkpoints), runs),
        its mean ``mean_J`` and the number of clipped steps ``clipped``.
    """
    if config.practical:
        raise ValueError("batched training supports the meta estimator only")
    rng = _generator(rng, config.seed)
    kind = config.baseline
    taken, visits = pol.visit_tables(env)
    P, S, V = env.n_prompts, env.n_states, env.alphabet.size
    K = len(env.outputs)
    base = (p0 or pol.zeros(env)).logits
    logits = np.broadcast_to(base, (runs,) + base.shape).copy()
    checkpoints = sorted(set(checkpoints or [config.n]))
    B, G = config.B, config.G
    j_star = float(env.weights @ env.optimal_values())
    run_idx = np.arange(runs)[:, None, None]
    custom = None
    if kind.tag == "custom":
        from .grad import baseline_per_prompt
        custom = baseline_per_prompt(kind, PolicyParams(base), env)

    def objective(lg):
        pr = np.exp(pol.stacked_output_log_probs(lg, env))
        return np.einsum("p,rpk,pk->r", env.weights, pr, env.rewards), pr

    j_at, clipped = [], 0
    for i in range(1, config.n + 1):
        _, probs_out = objective(logits)
        cdf = np.cumsum(probs_out, axis=-1)
        cdf[..., -1] = 1.0
        xs = rng.choice(P, size=(runs, B), p=env.weights)
        u = rng.random((runs, B, G))
        rows = cdf[np.arange(runs)[:, None], xs]  # (R, B, K)
        ks = (rows[:, :, None, :] <= u[..., None]).sum(-1)
        ks = np.minimum(ks, K - 1)
        zs = env.rewards[xs[..., None], ks]
        if kind.tag == "leave_one_out":
            coef = zs - leave_one_out_means(zs)
        elif kind.tag == "vanilla":
            coef = zs
        elif kind.tag == "oracle_value":
            vals = np.einsum("rpk,pk->rp", probs_out, env.rewards)
            coef = zs - vals[np.arange(runs)[:, None], xs][..., None]
        else:
            coef = zs - custom[xs][..., None]
        acc = np.zeros((runs, P, K))
        np.add.at(acc, (np.broadcast_to(run_idx, ks.shape), np.broadcast_to(xs[..., None], ks.shape), ks),
                  coef / (B * G))
        pi = softmax(logits, axis=-1)
        grad = np.einsum("rpk,ksv->rpsv", acc, taken) - np.einsum("rpk,ks->rps", acc, visits)[..., None] * pi
        logits = logits + config.schedule.rate(i) * grad
        if config.box_radius is not None:
            over = np.abs(logits) > config.box_radius
            if over.any():
                clipped += int(over.any(axis=(1, 2, 3)).sum())
                logits = np.clip(logits, -config.box_radius, config.box_radius)
        if i in checkpoints:
            j_at.append(objective(logits)[0])
    final_j = objective(logits)[0]
    j_at = np.array(j_at).reshape(len(j_at), runs)
    return {"final_J": final_j, "final_gap": np.maximum(j_star - final_j, 0.0),
            "checkpoints": checkpoints, "J": j_at, "mean_J": j_at.mean(axis=1).tolist(),
            "clipped": clipped, "final_logits": logits}


# ---------------------------------------------------------------------------
# scikit-learn style wrappers


class _PolicyTrainer(BaseEstimator):
    def _config(self):
        raise NotImplementedError

    def _init_params(self, env):
        if self.init_scale:
            rs = check_random_state(self.random_state)
            return pol.random_params(env, self.init_scale, rs.randint(2 ** 31))
        return pol.zeros(env)

    def predict(self, env: Environment, x=None):
        """Output distribution ``π(·|x)`` for every prompt (or one prompt)."""
        probs = pol.output_probs(self.params_, env)
        return probs if x is None else probs[x]

    def score(self, env: Environment, y=None) -> float:
        """Expected reward ``J`` of the fitted policy."""
        return pol.objective(self.params_, env)


class MetaPolicyGradient(_PolicyTrainer):
    """Stochastic policy-gradient ascent with a group baseline.

    Parameters
    ----------
    B, G : int
        Prompts per batch and outputs per prompt.
    n_iter : int
        Number of ascent steps.
    beta : float
        Step-size constant.
    schedule : {"constant", "inverse_iter"}
    baseline : {"vanilla", "leave_one_out", "oracle_value"} or BaselineKind
    box_radius : float or None
        Projection radius applied after each step.
    init_scale : float
        Standard deviation of random initial logits (0 gives uniform).
    random_state : int, RandomState or None
    """

    def __init__(self, B=4, G=4, n_iter=100, beta=0.5, schedule="constant",
                 baseline="leave_one_out", box_radius=DEFAULT_BOX_RADIUS, record_every=1,
                 init_scale=0.0, random_state=None):
        self.B = B
        self.G = G
        self.n_iter = n_iter
        self.beta = beta
        self.schedule = schedule
        self.baseline = baseline
        self.box_radius = box_radius
        self.record_every = record_every
        self.init_scale = init_scale
        self.random_state = random_state

    def _config(self):
        return TrainConfig(self.B, self.G, self.n_iter, LrSchedule(self.schedule, self.beta),
                           self.baseline, box_radius=self.box_radius, record_every=self.record_every)

    def fit(self, env: Environment, y=None, p0: PolicyParams | None = None):
        config = self._config()
        rs = check_random_state(self.random_state)
        rng = np.random.default_rng(rs.randint(2 ** 31))
        p0 = p0 if p0 is not None else self._init_params(env)
        self.trace_ = train_meta(env, config, rng, p0)
        self.params_ = self.trace_.final_params
        return self


class PracticalGRPO(_PolicyTrainer):
    """Minibatched GRPO with normalized advantages and a K3 KL penalty.

    Parameters
    ----------
    B, G : int
        Prompts per sampling pass and outputs per prompt.
    m : int
        Number of minibatch updates per sampling pass; must divide ``B``.
    kappa : float
        KL penalty weight towards the reference policy (the initial policy
        unless one is passed to ``fit``).
    eps_policy : float
        Additive regulariser of the group standard error.
    """

    def __init__(self, B=4, G=4, m=1, n_iter=100, beta=0.5, schedule="constant", kappa=0.0,
                 eps_policy=0.0, floor=1e-8, box_radius=DEFAULT_BOX_RADIUS, record_every=1,
                 init_scale=0.0, random_state=None):
        self.B = B
        self.G = G
        self.m = m
        self.n_iter = n_iter
        self.beta = beta
        self.schedule = schedule
        self.kappa = kappa
        self.eps_policy = eps_policy
        self.floor = floor
        self.box_radius = box_radius
        self.record_every = record_every
        self.init_scale = init_scale
        self.random_state = random_state

    def _config(self):
        return TrainConfig(self.B, self.G, self.n_iter, LrSchedule(self.schedule, self.beta),
                           "practical", kappa=self.kappa, m=self.m, box_radius=self.box_radius,
                           record_every=self.record_every, eps_policy=self.eps_policy, floor=self.floor)

    def fit(self, env: Environment, y=None, p0: PolicyParams | None = None,
            p_ref: PolicyParams | None = None):
        config = self._config()
        rs = check_random_state(self.random_state)
        rng = np.random.default_rng(rs.randint(2 ** 31))
        p0 = p0 if p0 is not None else self._init_params(env)
        self.trace_ = train_grpo_practical(env, config, rng, p0, p_ref)
        self.params_ = self.trace_.final_params
        return self
