"""Second-order U-statistic view of the leave-one-out group estimator.

For a single prompt ``x`` the leave-one-out estimator equals the average of
the symmetric kernel

    h((y_i, z_i), (y_j, z_j)) = ½ [W(y_i) − W(y_j)] (z_i − z_j)

over all unordered pairs, where ``W`` is the total score. Its Hoeffding
decomposition splits the estimate into the mean ``h0 = g(x)``, a first-order
projection (exactly the oracle-baseline estimator minus ``g(x)``) and a
degenerate second-order remainder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import policy as pol
from .env import Environment
from .grad import GroupSample
from .policy import PolicyParams


@dataclass
class HoeffdingParts:
    h0: np.ndarray
    first_order: np.ndarray
    second_order: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.h0 + self.first_order + self.second_order

    def to_dict(self) -> dict:
        return {
            "h0": self.h0.tolist(),
            "first_order": self.first_order.tolist(),
            "second_order": self.second_order.tolist(),
            "h0_sqnorm": float(self.h0 @ self.h0),
            "first_order_sqnorm": float(self.first_order @ self.first_order),
            "second_order_sqnorm": float(self.second_order @ self.second_order),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def kernel_h(p: PolicyParams, env: Environment, x: int, yz_i, yz_j) -> np.ndarray:
    """Symmetric pair kernel as a full-length parameter vector."""
    (y_i, z_i), (y_j, z_j) = yz_i, yz_j
    w_i = pol.score(p, env, x, y_i)
    w_j = pol.score(p, env, x, y_j)
    return 0.5 * (w_i - w_j) * (float(z_i) - float(z_j))


def _group_arrays(p, env, group: GroupSample):
    if group.G < 2:
        raise ValueError("a U-statistic of order 2 needs G >= 2")
    ks = group.indices(env)
    W = pol.local_scores(p, env, group.prompt)[ks]
    return W, np.asarray(group.rewards, dtype=float)


def pairwise_average(W: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Average of the kernel over all ``i < j`` from scores ``W`` (G, D) and rewards ``z``."""
    G = len(z)
    iu, ju = np.triu_indices(G, k=1)
    terms = 0.5 * (W[iu] - W[ju]) * (z[iu] - z[ju])[:, None]
    return terms.sum(axis=0) / len(iu)


def ustat_average(p: PolicyParams, env: Environment, group: GroupSample) -> np.ndarray:
    """Kernel averaged over the ``C(G, 2)`` unordered pairs of the group."""
    W, z = _group_arrays(p, env, group)
    return pol.embed(env, group.prompt, pairwise_average(W, z))


def first_order_projection(p: PolicyParams, env: Environment, x: int) -> np.ndarray:
    """``h1`` for every enumerated output of prompt ``x``, shape ``(K, D)`` (local block).

    ``h1(y) = E[h((y, z(y)), (Y', Z'))] = ½[W(y)(z(y) − V(x)) + g(x)]``, with the
    inner expectation taken by enumeration.
    """
    W = pol.local_scores(p, env, x)
    probs = pol.output_probs(p, env)[x]
    z = env.rewards[x]
    v = probs @ z
    g = (probs * z) @ W
    return 0.5 * (W * (z - v)[:, None] + g)


def hoeffding_decompose(p: PolicyParams, env: Environment, x: int, group: GroupSample) -> HoeffdingParts:
    """Exact Hoeffding decomposition of the group's U-statistic."""
    if group.prompt != x:
        raise ValueError(f"group was drawn for prompt {group.prompt}, not {x}")
    W, z = _group_arrays(p, env, group)
    probs = pol.output_probs(p, env)[x]
    h0 = (probs * env.rewards[x]) @ pol.local_scores(p, env, x)
    h1 = first_order_projection(p, env, x)[group.indices(env)]
    first = (2.0 / group.G) * (h1 - h0).sum(axis=0)
    u = pairwise_average(W, z)
    second = u - h0 - first
    emb = lambda v: pol.embed(env, x, v)
    return HoeffdingParts(emb(h0), emb(first), emb(second))
