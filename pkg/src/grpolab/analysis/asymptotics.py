"""Limit law of ``n·Δ(θ_n)`` for stochastic ascent with ``η_i = β/i``.

Pipeline, on a quadratic objective whose optimum set may be a subspace:

1. spectrum of the negated Hessian → rank ``r``, eigenvalues ``λ``, basis ``Q``;
2. projected noise ``Ω = QᵀΓQ``;
3. ``Σ`` solving ``AᵀΣ + ΣA = β²Ω`` with ``A = β·diag(λ) − ½I``;
4. weights ``w`` = eigenvalues of ``½ Σ^{1/2} diag(λ) Σ^{1/2}``;
5. compare simulated ``n·Δ`` against ``Σ_k w_k χ²_1`` with a two-sample KS test.

The right-hand side in step 3 carries ``β²`` because the martingale increment
of the rescaled iterate is ``β Qᵀ(ĝ − g)``; with ``β = 1`` it reduces to ``Ω``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, stats

from .. import policy as pol
from ..env import Environment
from ..policy import PolicyParams


class StabilityError(ValueError):
    """The linearized recursion is not stable (some eigenvalue too small)."""


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


@dataclass(frozen=True, eq=False)
class SyntheticQuadratic:
    """``J(θ) = −½(θ−θ*)ᵀM(θ−θ*)`` with additive Gaussian gradient noise of covariance Γ.

    Parameters
    ----------
    M : array_like, shape (d, d)
        Symmetric positive semidefinite curvature; may be singular.
    theta_star : array_like, shape (d,), optional
        A maximizer; defaults to the origin.
    gamma : array_like, shape (d, d), optional
        Noise covariance; defaults to zero (deterministic gradients).
    """

    M: np.ndarray
    theta_star: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        d = M.shape[0]
        if M.shape != (d, d) or not np.allclose(M, M.T, atol=1e-12):
            raise ValueError("M must be a symmetric square matrix")
        if np.linalg.eigvalsh(M).min() < -1e-10 * max(1.0, np.abs(M).max()):
            raise ValueError("M must be positive semidefinite")
        ts = np.zeros(d) if self.theta_star is None else np.asarray(self.theta_star, dtype=float)
        gam = np.zeros((d, d)) if self.gamma is None else np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if ts.shape != (d,) or gam.shape != (d, d):
            raise ValueError("theta_star and gamma must match the dimension of M")
        if not np.allclose(gam, gam.T, atol=1e-12) or np.linalg.eigvalsh(gam).min() < -1e-10:
            raise ValueError("gamma must be symmetric positive semidefinite")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "theta_star", ts)
        object.__setattr__(self, "gamma", gam)

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    @property
    def optimum_value(self) -> float:
        return 0.0

    def value(self, theta) -> np.ndarray | float:
        e = np.asarray(theta, dtype=float) - self.theta_star
        return -0.5 * np.einsum("...i,ij,...j->...", e, self.M, e)

    def gap(self, theta):
        return self.optimum_value - self.value(theta)

    def gradient(self, theta) -> np.ndarray:
        return -(np.asarray(theta, dtype=float) - self.theta_star) @ self.M

    def hessian(self) -> np.ndarray:
        return -self.M

    def noise_factor(self) -> np.ndarray:
        return _psd_sqrt(self.gamma)

    def noisy_gradient(self, theta, rng) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        xi = rng.standard_normal(theta.shape) @ self.noise_factor()
        return self.gradient(theta) + xi

    def with_gamma(self, gamma) -> "SyntheticQuadratic":
        return SyntheticQuadratic(self.M, self.theta_star, gamma)

    @property
    def mu(self) -> float:
        """Smallest positive eigenvalue of M (the PL constant)."""
        vals = np.linalg.eigvalsh(self.M)
        pos = vals[vals > 1e-10 * max(1.0, vals.max())]
        return float(pos.min()) if pos.size else 0.0

    @property
    def L(self) -> float:
        return float(np.linalg.eigvalsh(self.M).max())

    def sample_probe(self, rng, scale: float = 1.0) -> np.ndarray:
        return self.theta_star + scale * rng.standard_normal(self.dim)


def hessian_spectrum(H, rank_tol: float | None = None):
    """Rank, positive eigenvalues (descending) and eigenvectors of ``−H``.

    Raises
    ------
    ValueError
        If ``H`` is not symmetric or ``−H`` has a clearly negative eigenvalue.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if np.abs(H - H.T).max() > 1e-6:
        raise ValueError("H must be symmetric within 1e-6")
    vals, vecs = np.linalg.eigh(-(H + H.T) / 2)
    scale = np.abs(vals).max() if vals.size else 0.0
    tol = 1e-6 * scale if rank_tol is None else rank_tol
    if vals.size and vals.min() < -tol:
        raise ValueError(f"H is not negative semidefinite: −H has eigenvalue {vals.min():.6g}")
    keep = np.nonzero(vals > tol)[0][::-1]
    return int(keep.size), vals[keep], vecs[:, keep]


def solve_lyapunov(A, Omega) -> np.ndarray:
    """Solve ``AᵀΣ + ΣA = Ω`` for symmetric ``Σ``.

    Raises
    ------
    StabilityError
        If some eigenvalue of ``A`` has non-positive real part.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    eig = np.linalg.eigvals(A)
    bad = eig[eig.real <= 0]
    if bad.size:
        raise StabilityError(f"A has eigenvalue {bad[0]:.6g} with non-positive real part")
    # scipy solves a X + X a^H = q
    sigma = linalg.solve_continuous_lyapunov(A.T, Omega)
    sigma = (sigma + sigma.T) / 2
    resid = np.abs(A.T @ sigma + sigma @ A - Omega).max()
    if resid > 1e-8 * max(np.abs(Omega).max(), 1e-300) and np.abs(Omega).max() > 0:
        raise RuntimeError(f"Lyapunov residual {resid:.3e} too large")
    return sigma


def chi2_mixture_weights(Sigma, lambdas) -> np.ndarray:
    """Eigenvalues of ``½ Σ^{1/2} diag(λ) Σ^{1/2}``, non-increasing and clamped at 0."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if Sigma.shape != (lambdas.size, lambdas.size):
        raise ValueError(f"Sigma shape {Sigma.shape} does not match {lambdas.size} eigenvalues")
    root = _psd_sqrt(Sigma)
    w = np.linalg.eigvalsh(0.5 * root @ np.diag(lambdas) @ root)[::-1]
    if w.size and w.min() < -1e-10:
        raise ValueError(f"mixture weight {w.min():.3e} is negative; Sigma is not psd")
    return np.clip(w, 0, None)


def chi2_mixture_sample(weights, count: int, rng) -> np.ndarray:
    """Draws of ``Σ_k w_k χ²_{1,k}`` with independent components."""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    rng = np.random.default_rng(rng)
    return rng.chisquare(1.0, size=(int(count), w.size)) @ w


@dataclass
class AsymptoticsReport:
    r: int
    lambdas: np.ndarray
    Q: np.ndarray
    Gamma: np.ndarray
    Omega: np.ndarray
    Sigma: np.ndarray
    weights: np.ndarray
    beta: float
    n: int
    runs: int
    mixture_samples: int
    ks_stat: float | None = None
    ks_pvalue: float | None = None
    scaled_gaps: np.ndarray | None = field(default=None, repr=False)

    @property
    def omega_min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.Omega).min()) if self.r else 0.0

    def to_dict(self) -> dict:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        d.pop("scaled_gaps")
        d["omega_min_eig"] = self.omega_min_eig
        d["mixture_mean"] = float(np.sum(self.weights))
        if self.scaled_gaps is not None:
            d["scaled_gap_mean"] = float(np.mean(self.scaled_gaps))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def limit_weights(quad: SyntheticQuadratic, beta: float):
    """Steps (i)–(iv) of the pipeline; returns ``(r, λ, Q, Ω, Σ, w)``."""
    r, lambdas, Q = hessian_spectrum(quad.hessian())
    if r == 0:
        return r, lambdas, Q, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0)
    bound = 1.0 / (2.0 * lambdas.min())
    if beta <= bound:
        raise StabilityError(
            f"step constant beta={beta:.6g} violates beta > 1/(2*lambda_min) = {bound:.6g} "
            f"(eigenvalue beta*lambda_min - 1/2 = {beta * lambdas.min() - 0.5:.6g} <= 0)"
        )
    omega = Q.T @ quad.gamma @ Q
    A = beta * np.diag(lambdas) - 0.5 * np.eye(r)
    sigma = solve_lyapunov(A, beta ** 2 * omega)
    return r, lambdas, Q, omega, sigma, chi2_mixture_weights(sigma, lambdas)


def run_ascent(quad: SyntheticQuadratic, schedule, n_checkpoints, runs: int, rng,
               theta0=None) -> np.ndarray:
    """Simulate ``θ_i = θ_{i−1} + η_i·ĝ(θ_{i−1})`` for many runs at once.

    ``schedule`` is an :class:`~grpolab.optim.LrSchedule` (anything with a
    ``rate(i)`` method). Returns the gaps ``Δ(θ_n)`` at every requested
    ``n``, shape ``(len(n_checkpoints), runs)``.
    """
    rng = np.random.default_rng(rng)
    checkpoints = sorted(int(c) for c in np.atleast_1d(n_checkpoints))
    start = quad.theta_star + 1.0 if theta0 is None else np.asarray(theta0, dtype=float)
    theta = np.broadcast_to(start, (runs, quad.dim)).copy()
    factor = quad.noise_factor()
    noisy = np.any(factor != 0)
    out = np.empty((len(checkpoints), runs))
    j = 0
    while j < len(checkpoints) and checkpoints[j] == 0:
        out[j] = quad.gap(theta)
        j += 1
    for i in range(1, checkpoints[-1] + 1):
        grad = -(theta - quad.theta_star) @ quad.M
        if noisy:
            grad += rng.standard_normal(theta.shape) @ factor
        theta += schedule.rate(i) * grad
        while j < len(checkpoints) and checkpoints[j] == i:
            out[j] = quad.gap(theta)
            j += 1
    return out


def run_inverse_ascent(quad: SyntheticQuadratic, beta: float, n_checkpoints, runs: int, rng,
                       theta0=None) -> np.ndarray:
    """:func:`run_ascent` with ``η_i = β/i``."""
    from ..optim import LrSchedule

    return run_ascent(quad, LrSchedule("inverse_iter", beta), n_checkpoints, runs, rng, theta0)


def asymptotics_pipeline(quad: SyntheticQuadratic, beta: float, n: int, runs: int, rng,
                         mixture_samples: int = 100_000, theta0=None) -> AsymptoticsReport:
    """Full pipeline: limit weights, simulated ``n·Δ`` and the KS distance between them."""
    rng = np.random.default_rng(rng)
    r, lambdas, Q, omega, sigma, w = limit_weights(quad, beta)
    scaled = n * run_inverse_ascent(quad, beta, [n], runs, rng, theta0)[0]
    mix = chi2_mixture_sample(w, mixture_samples, rng) if r else np.zeros(mixture_samples)
    ks = stats.ks_2samp(scaled, mix)
    return AsymptoticsReport(r, lambdas, Q, quad.gamma, omega, sigma, w, float(beta), int(n),
                             int(runs), int(mixture_samples), float(ks.statistic),
                             float(ks.pvalue), scaled)


def weight_gap_curve(p: PolicyParams, env: Environment, G_list, B: int = 1, beta: float = 1.0,
                     M=None) -> dict:
    """Limit weights driven by leave-one-out vs oracle-baseline noise covariances.

    The bandit's exact gradient covariances at ``p`` serve as Γ for a
    quadratic with curvature ``M`` (identity by default); the weight gap
    ``‖w_loo − w_oracle‖`` is reported per G with its log-log slope.
    """
    from .mse import gradient_covariance

    d = env.n_params
    M = np.eye(d) if M is None else np.asarray(M, dtype=float)
    rows = []
    for G in G_list:
        gl = gradient_covariance(p, env, "leave_one_out", B, G)
        go = gradient_covariance(p, env, "oracle_value", B, G)
        wl = limit_weights(SyntheticQuadratic(M, gamma=gl), beta)[-1]
        wo = limit_weights(SyntheticQuadratic(M, gamma=go), beta)[-1]
        rows.append((int(G), float(np.linalg.norm(wl - wo)), float(np.abs(gl - go).max())))
    G_arr = np.array([r[0] for r in rows], dtype=float)
    gaps = np.array([r[1] for r in rows])
    slope = float(np.polyfit(np.log(G_arr), np.log(gaps), 1)[0]) if np.all(gaps > 0) else float("nan")
    pair = [float(np.log(gaps[i + 1] / gaps[i]) / np.log(G_arr[i + 1] / G_arr[i]))
            for i in range(len(rows) - 1)]
    return {"G": G_arr.astype(int).tolist(), "weight_gap": gaps.tolist(),
            "gamma_gap": [r[2] for r in rows], "slope": slope, "pairwise_slopes": pair}
