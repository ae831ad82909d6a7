"""Synthetic verifiable-reward environments with enumerable output spaces.

Generation is autoregressive over a finite alphabet that contains a
designated end-of-sequence token. ``max_len`` counts every position of a
sequence, the terminating eos included: the policy chooses freely at
positions ``1 .. max_len - 1`` (choosing eos stops early) and the final
position is always eos. A prefix that reaches ``max_len - 1`` content
tokens is truncated and closed with an implicit eos.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

DEFAULT_ENUMERATION_CAP = 10**6
DEFAULT_Z_MAX = 2.0
REWARD_RULES = ("match-target", "bounded-random", "binary-random", "table")


class EnumerationCapError(ValueError):
    """Raised when an output space (or batch space) is too large to enumerate."""

    def __init__(self, count: int, cap: int, what: str = "output sequences"):
        self.count = count
        self.cap = cap
        super().__init__(f"{what}: {count} exceeds enumeration cap {cap}")


@dataclass(frozen=True)
class TokenAlphabet:
    size: int
    eos_id: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"alphabet size must be >= 2, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} outside [0, {self.size})")

    @property
    def content_tokens(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.size) if t != self.eos_id)


def count_outputs(alphabet_size: int, max_len: int) -> int:
    """Number of terminating sequences of length <= ``max_len``."""
    k = alphabet_size - 1
    return sum(k**j for j in range(max_len))


def count_states(alphabet_size: int, max_len: int) -> int:
    """Number of decision prefixes (prefixes shorter than ``max_len - 1``)."""
    k = alphabet_size - 1
    return sum(k**j for j in range(max_len - 1))


@dataclass(frozen=True)
class OutputSpace:
    """Every terminating sequence in a stable (breadth-first) order.

    ``path_states[k, t]`` / ``path_tokens[k, t]`` give the decision state
    and chosen token at step ``t`` of sequence ``k``; ``path_mask`` marks
    the steps that exist. The forced final eos is not a decision.
    """

    sequences: tuple[tuple[int, ...], ...]
    states: tuple[tuple[int, ...], ...]
    path_states: np.ndarray
    path_tokens: np.ndarray
    path_mask: np.ndarray
    index: Mapping[tuple[int, ...], int] = field(repr=False)

    def __len__(self):
        return len(self.sequences)

    @property
    def n_states(self) -> int:
        return len(self.states)


def _build_output_space(alphabet: TokenAlphabet, max_len: int) -> OutputSpace:
    content = alphabet.content_tokens
    eos = alphabet.eos_id
    states: list[tuple[int, ...]] = [()]
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(max_len - 2):
        frontier = [p + (a,) for p in frontier for a in content]
        states.extend(frontier)
    state_index = {s: i for i, s in enumerate(states)}

    sequences: list[tuple[int, ...]] = []
    prefixes: list[tuple[int, ...]] = [()]
    for length in range(max_len):
        for p in prefixes:
            sequences.append(p + (eos,))
        if length < max_len - 1:
            prefixes = [p + (a,) for p in prefixes for a in content]

    n_steps = max(max_len - 1, 0)
    n = len(sequences)
    path_states = np.zeros((n, max(n_steps, 1)), dtype=np.intp)
    path_tokens = np.zeros((n, max(n_steps, 1)), dtype=np.intp)
    path_mask = np.zeros((n, max(n_steps, 1)), dtype=bool)
    for k, seq in enumerate(sequences):
        body = seq[:-1]
        steps = [(body[:t], body[t]) for t in range(len(body))]
        if len(body) < n_steps:
            steps.append((body, eos))  # eos chosen, not forced
        for t, (prefix, token) in enumerate(steps):
            path_states[k, t] = state_index[prefix]
            path_tokens[k, t] = token
            path_mask[k, t] = True
    for arr in (path_states, path_tokens, path_mask):
        arr.setflags(write=False)
    return OutputSpace(
        sequences=tuple(sequences),
        states=tuple(states),
        path_states=path_states,
        path_tokens=path_tokens,
        path_mask=path_mask,
        index={s: i for i, s in enumerate(sequences)},
    )


@dataclass(frozen=True, eq=False)
class Environment:
    """A finite prompt set with weights, a horizon and a total reward table.

    Prompts are addressed by position ``x`` in ``0 .. n_prompts - 1``;
    ``prompt_ids`` keeps the user-facing identifiers. ``rewards[x, k]`` is
    the reward of output ``k`` (in ``outputs`` order) under prompt ``x``.
    """

    alphabet: TokenAlphabet
    prompt_ids: tuple
    weights: np.ndarray
    max_len: int
    rewards: np.ndarray
    z_max: float
    outputs: OutputSpace = field(repr=False)
    description: Mapping = field(default_factory=dict, repr=False)

    @property
    def n_prompts(self) -> int:
        return len(self.prompt_ids)

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    @property
    def n_states(self) -> int:
        return self.outputs.n_states

    @property
    def n_params(self) -> int:
        return self.n_prompts * self.n_states * self.alphabet.size

    @property
    def reward_table(self) -> dict:
        return {
            (self.prompt_ids[x], seq): float(self.rewards[x, k])
            for x in range(self.n_prompts)
            for k, seq in enumerate(self.outputs.sequences)
        }

    def optimal_values(self) -> np.ndarray:
        """Per-prompt best achievable reward ``max_y reward(x, y)``."""
        return self.rewards.max(axis=1)


def build_env(
    alphabet_size: int,
    max_len: int,
    prompts: Sequence | int = 1,
    *,
    eos_id: int | None = None,
    reward_rule: str = "match-target",
    reward_seed: int = 0,
    z_max: float = DEFAULT_Z_MAX,
    targets: Mapping | None = None,
    reward_density: float = 0.5,
    table: Mapping | Callable | None = None,
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
) -> Environment:
    """Materialize an environment.

    Parameters
    ----------
    alphabet_size : int
        Number of tokens, eos included.
    max_len : int
        Horizon; sequence length including the terminating eos.
    prompts : int or sequence
        Either a prompt count (uniform weights), a sequence of ids (uniform
        weights) or a sequence of ``(id, weight)`` pairs.
    eos_id : int, optional
        Defaults to the last token.
    reward_rule : {"match-target", "bounded-random", "binary-random", "table"}
        ``match-target`` pays ``z_max``-independent reward 1 when the
        sequence equals the prompt's target (``targets[id]``, given as
        content tokens; drawn from ``reward_seed`` when absent).
        ``bounded-random`` draws Uniform[0, z_max] once per (prompt, output).
        ``binary-random`` draws Bernoulli(reward_density) once per pair.
        ``table`` reads ``table[(id, sequence)]`` or calls ``table(id, seq)``.
    """
    eos_id = alphabet_size - 1 if eos_id is None else eos_id
    alphabet = TokenAlphabet(alphabet_size, eos_id)
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    count = count_outputs(alphabet_size, max_len)
    if count > enumeration_cap:
        raise EnumerationCapError(count, enumeration_cap)
    if not np.isfinite(z_max) or z_max <= 0:
        raise ValueError(f"z_max must be positive and finite, got {z_max}")

    ids, weights = _parse_prompts(prompts)
    space = _build_output_space(alphabet, max_len)
    rng = np.random.default_rng(reward_seed)
    n_p, n_o = len(ids), len(space)

    if reward_rule == "match-target":
        rewards = np.zeros((n_p, n_o))
        for x, pid in enumerate(ids):
            if targets is not None and pid in targets:
                target = tuple(int(t) for t in targets[pid]) + (eos_id,)
                if target not in space.index:
                    raise ValueError(f"target {targets[pid]} for prompt {pid!r} is not a valid output")
                k = space.index[target]
            else:
                k = int(rng.integers(n_o))
            rewards[x, k] = 1.0
    elif reward_rule == "bounded-random":
        rewards = rng.uniform(0.0, z_max, size=(n_p, n_o))
    elif reward_rule == "binary-random":
        if not 0.0 <= reward_density <= 1.0:
            raise ValueError("reward_density must lie in [0, 1]")
        rewards = (rng.random((n_p, n_o)) < reward_density).astype(float)
    elif reward_rule == "table":
        if table is None:
            raise ValueError("reward_rule 'table' needs a table")
        rewards = np.empty((n_p, n_o))
        for x, pid in enumerate(ids):
            for k, seq in enumerate(space.sequences):
                if callable(table):
                    rewards[x, k] = table(pid, seq)
                else:
                    key = (pid, seq)
                    if key not in table:
                        raise KeyError(f"reward table has no entry for {key}")
                    rewards[x, k] = table[key]
    else:
        raise ValueError(f"unknown reward_rule {reward_rule!r}; expected one of {REWARD_RULES}")

    if not np.all(np.isfinite(rewards)) or rewards.min() < 0 or rewards.max() > z_max:
        raise ValueError(f"rewards must lie in [0, z_max={z_max}]")
    rewards.setflags(write=False)
    weights.setflags(write=False)
    description = dict(
        alphabet_size=alphabet_size,
        eos_id=eos_id,
        prompts=[[pid, float(w)] for pid, w in zip(ids, weights)],
        max_len=max_len,
        reward_rule=reward_rule,
        reward_seed=reward_seed,
        z_max=z_max,
    )
    if targets is not None:
        description["targets"] = {str(k): list(v) for k, v in targets.items()}
    if reward_rule == "binary-random":
        description["reward_density"] = reward_density
    return Environment(
        alphabet=alphabet,
        prompt_ids=tuple(ids),
        weights=weights,
        max_len=max_len,
        rewards=rewards,
        z_max=float(z_max),
        outputs=space,
        description=description,
    )


def _parse_prompts(prompts) -> tuple[list, np.ndarray]:
    if isinstance(prompts, (int, np.integer)):
        if prompts < 1:
            raise ValueError("need at least one prompt")
        ids = list(range(int(prompts)))
        return ids, np.full(len(ids), 1.0 / len(ids))
    items = list(prompts)
    if not items:
        raise ValueError("need at least one prompt")
    if all(isinstance(p, (tuple, list)) and len(p) == 2 for p in items):
        ids = [p[0] for p in items]
        weights = np.array([float(p[1]) for p in items])
    else:
        ids = list(items)
        weights = np.full(len(ids), 1.0 / len(ids))
    if len(set(ids)) != len(ids):
        raise ValueError("prompt ids must be unique")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"prompt weights must be nonnegative and sum to 1, got sum {weights.sum()!r}")
    return ids, weights


def reward(env: Environment, x: int, y: Sequence[int]) -> float:
    """Reward of token sequence ``y`` under prompt index ``x``."""
    key = tuple(int(t) for t in y)
    k = env.outputs.index.get(key)
    if k is None or not 0 <= x < env.n_prompts:
        raise KeyError(f"no reward entry for prompt {x} and sequence {key}")
    return float(env.rewards[x, k])


def enumerate_outputs(env: Environment, cap: int = DEFAULT_ENUMERATION_CAP) -> OutputSpace:
    if len(env.outputs) > cap:
        raise EnumerationCapError(len(env.outputs), cap)
    return env.outputs


ENV_SPEC_KEYS = {
    "alphabet_size", "eos_id", "prompts", "max_len", "reward_rule", "reward_seed",
    "z_max", "targets", "reward_density", "enumeration_cap",
}


def env_from_dict(spec: Mapping) -> Environment:
    unknown = set(spec) - ENV_SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown environment keys: {sorted(unknown)}")
    missing = {"alphabet_size", "max_len"} - set(spec)
    if missing:
        raise ValueError(f"environment spec missing keys: {sorted(missing)}")
    prompts = spec.get("prompts", 1)
    if isinstance(prompts, Mapping):
        prompts = list(prompts.items())
    targets = spec.get("targets")
    if targets is not None:
        # yaml may key targets by int or str; match against the prompt ids
        ids, _ = _parse_prompts(prompts)
        by_str = {str(k): v for k, v in targets.items()}
        targets = {pid: by_str[str(pid)] for pid in ids if str(pid) in by_str}
    return build_env(
        alphabet_size=int(spec["alphabet_size"]),
        max_len=int(spec["max_len"]),
        prompts=prompts,
        eos_id=spec.get("eos_id"),
        reward_rule=spec.get("reward_rule", "match-target"),
        reward_seed=int(spec.get("reward_seed", 0)),
        z_max=float(spec.get("z_max", DEFAULT_Z_MAX)),
        targets=targets,
        reward_density=float(spec.get("reward_density", 0.5)),
        enumeration_cap=int(spec.get("enumeration_cap", DEFAULT_ENUMERATION_CAP)),
    )


def load_env(path: str | Path) -> Environment:
    """Read an environment spec (YAML or JSON) and build it."""
    text = Path(path).read_text()
    spec = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return env_from_dict(spec)
