"""Finite episodic MDPs, exact dynamic programming and low-rank task ensembles.

Array conventions used throughout the package (stages are 0-based):

- transitions ``P[h, s, a, s']`` with shape ``(H, S, K, S)``
- rewards ``r[h, s, a]`` with shape ``(H, S, K)``
- Q tables and occupancy measures have shape ``(H, S, K)``
- a deterministic policy is an integer array ``(H, S)``; a stochastic
  policy is a probability table ``(H, S, K)``
- feature tables have one row per ``(s, a)`` pair, row index ``s * K + a``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DegenerateFeaturesError",
    "EnsembleSpec",
    "TabularMDP",
    "TaskEnsemble",
    "generate_ensemble",
    "greedy_policy",
    "occupancy",
    "optimal_q",
    "policy_q",
    "q_max",
    "recover_true_decoders",
    "state_occupancy",
]

STOCHASTIC_ATOL = 1e-12


class DegenerateFeaturesError(ValueError):
    """Feature table does not have full column rank."""


def q_max(gamma: float, horizon: int) -> float:
    """Largest achievable return with rewards in [0, 1]."""
    if gamma == 1.0:
        return float(horizon)
    return (1.0 - gamma**horizon) / (1.0 - gamma)


@dataclass(frozen=True)
class TabularMDP:
    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float = 1.0
    initial_state: int = 0

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        r = np.asarray(self.rewards, dtype=float)
        if P.ndim != 4 or P.shape[1] != P.shape[3] or P.shape[:3] != r.shape:
            raise ValueError(
                f"inconsistent shapes: transitions {P.shape}, rewards {r.shape}"
            )
        if np.any(P < 0) or not np.allclose(P.sum(-1), 1.0, rtol=0, atol=STOCHASTIC_ATOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.initial_state < P.shape[1]:
            raise ValueError(f"initial state {self.initial_state} out of range")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_states(self) -> int:
        return self.rewards.shape[1]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[2]


def _check_policy_table(policy: np.ndarray, mdp: TabularMDP) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != mdp.rewards.shape:
        raise ValueError(f"policy shape {pi.shape} != {mdp.rewards.shape}")
    if np.any(pi < 0) or not np.allclose(pi.sum(-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("policy rows must be probability vectors")
    return pi


def _as_policy_table(policy: np.ndarray, mdp: TabularMDP) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.ndim == 2:
        if policy.shape != (mdp.horizon, mdp.num_states):
            raise ValueError(f"deterministic policy shape {policy.shape} is wrong")
        if np.any(policy < 0) or np.any(policy >= mdp.num_actions):
            raise ValueError("policy actions out of range")
        return np.eye(mdp.num_actions)[policy]
    return _check_policy_table(policy, mdp)


def optimal_q(mdp: TabularMDP) -> np.ndarray:
    """Optimal Q table by backward induction, ``Q[H] = 0``."""
    H = mdp.horizon
    q = np.empty_like(mdp.rewards)
    v_next = np.zeros(mdp.num_states)
    for h in range(H - 1, -1, -1):
        q[h] = mdp.rewards[h] + mdp.gamma * (mdp.transitions[h] @ v_next)
        v_next = q[h].max(axis=1)
    return q


def policy_q(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Q table of a deterministic ``(H, S)`` or stochastic ``(H, S, K)`` policy."""
    pi = _as_policy_table(policy, mdp)
    q = np.empty_like(mdp.rewards)
    v_next = np.zeros(mdp.num_states)
    for h in range(mdp.horizon - 1, -1, -1):
        q[h] = mdp.rewards[h] + mdp.gamma * (mdp.transitions[h] @ v_next)
        v_next = (pi[h] * q[h]).sum(axis=1)
    return q


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Stage-indexed greedy policy; ties go to the lowest action index."""
    return np.argmax(q, axis=-1)


def state_occupancy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Per-stage state distributions ``(H, S)`` started from the fixed initial state."""
    pi = _as_policy_table(policy, mdp)
    dist = np.zeros((mdp.horizon, mdp.num_states))
    dist[0, mdp.initial_state] = 1.0
    for h in range(mdp.horizon - 1):
        sa = dist[h][:, None] * pi[h]
        dist[h + 1] = np.einsum("sa,sap->p", sa, mdp.transitions[h])
    return dist


def occupancy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """State-action occupancy ``mu[h, s, a]`` of a (stochastic) policy.

    Each stage sums to one. Rows of a stochastic ``policy`` that are not
    probability vectors raise ``ValueError``.
    """
    pi = _as_policy_table(policy, mdp)
    return state_occupancy(mdp, pi)[:, :, None] * pi


@dataclass(frozen=True)
class EnsembleSpec:
    num_states: int
    num_actions: int
    horizon: int
    num_tasks: int
    latent_dim: int
    gamma: float = 1.0
    w_max: float = 1.0

    def __post_init__(self):
        for name in ("num_states", "num_actions", "horizon", "num_tasks", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.latent_dim > self.num_states * self.num_actions:
            raise ValueError(
                f"latent_dim={self.latent_dim} exceeds S*K="
                f"{self.num_states * self.num_actions}"
            )
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.w_max <= 0:
            raise ValueError("w_max must be positive")


@dataclass(frozen=True, eq=False)
class TaskEnsemble:
    """Tasks sharing a feature table under which every Q function is linear.

    ``features`` is the single shared ``(S*K, d)`` table; ``decoders`` holds
    the true per-task, per-stage weights ``(T, H, d)``. ``reward_params``
    express rewards in the same feature coordinates, ``r = features @ theta``.
    """

    spec: EnsembleSpec
    seed: int
    tasks: list
    features: np.ndarray
    decoders: np.ndarray
    reward_params: np.ndarray
    next_state_measures: np.ndarray
    feature_scale: float = 1.0
    reward_scale: float = 1.0
    encoders: object = field(default=None, compare=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def optimal_q(self) -> np.ndarray:
        """Optimal Q tables of every task, shape ``(T, H, S, K)``."""
        return np.stack([optimal_q(m) for m in self.tasks]) if self.tasks else np.zeros(
            (0, self.spec.horizon, self.spec.num_states, self.spec.num_actions)
        )

    def linear_q(self) -> np.ndarray:
        """``<features, decoders>`` reshaped to ``(T, H, S, K)``."""
        S, K = self.spec.num_states, self.spec.num_actions
        q = np.einsum("xd,thd->thx", self.features, self.decoders)
        return q.reshape(len(self.tasks), self.spec.horizon, S, K)

    def realizability_residual(self) -> float:
        if not self.tasks:
            return 0.0
        return float(np.abs(self.optimal_q() - self.linear_q()).max())


def recover_true_decoders(features: np.ndarray, q_tables, tol: float = 1e-8) -> np.ndarray:
    """Least-squares decoders reproducing each task's optimal Q.

    Parameters
    ----------
    features : array (S*K, d)
    q_tables : array (T, H, S, K), or a TaskEnsemble (its optimal Q is used)
    tol : float
        Largest accepted absolute residual per entry.

    Returns
    -------
    array (T, H, d)
    """
    if isinstance(q_tables, TaskEnsemble):
        features, q_tables = q_tables.features, q_tables.optimal_q()
    features = np.asarray(features, dtype=float)
    q_tables = np.asarray(q_tables, dtype=float)
    d = features.shape[1]
    if np.linalg.matrix_rank(features) < d:
        raise DegenerateFeaturesError("degenerate features")
    T, H = q_tables.shape[:2]
    targets = q_tables.reshape(T * H, -1).T
    sol, *_ = np.linalg.lstsq(features, targets, rcond=None)
    residual = np.abs(features @ sol - targets).max() if T else 0.0
    if residual > tol:
        raise ValueError(f"Q tables are not linear in the features (residual {residual:.3e})")
    return sol.T.reshape(T, H, d)


def generate_ensemble(spec: EnsembleSpec, seed: int) -> TaskEnsemble:
    """Draw a linear-MDP task ensemble with realizable optimal Q functions.

    Simplex features ``f(s, a)`` are shared by every task. Task ``t`` has
    next-state measures ``nu_j`` (rows of the state simplex) and reward
    weights ``theta_h`` in ``[0, 1]^d``, with

        P_h(s' | s, a) = sum_j f_j(s, a) nu_j(s'),    r_h(s, a) = <f(s, a), theta_h>.

    The stored feature table is ``f`` scaled so its largest row has unit
    norm. If the recovered decoders exceed ``spec.w_max`` in norm, every
    reward is multiplied by a common factor below one (``reward_scale``).
    """
    S, K, H, T, d = (
        spec.num_states, spec.num_actions, spec.horizon, spec.num_tasks, spec.latent_dim,
    )
    rng = np.random.default_rng(seed)
    for _ in range(100):
        simplex = rng.dirichlet(np.ones(d), size=S * K)
        if np.linalg.matrix_rank(simplex) == d:
            break
    else:  # pragma: no cover - measure-zero event repeated 100 times
        raise DegenerateFeaturesError("degenerate features")
    feature_scale = 1.0 / np.linalg.norm(simplex, axis=1).max()
    features = simplex * feature_scale

    nus = rng.dirichlet(np.ones(S), size=(T, d))
    thetas = rng.uniform(0.0, 1.0, size=(T, H, d))

    P = np.einsum("xj,tjp->txp", simplex, nus).reshape(T, S, K, S)
    r = np.einsum("xj,thj->thx", simplex, thetas).reshape(T, H, S, K)
    assert np.all(P >= 0) and np.all((r >= 0) & (r <= 1))

    def build(reward_scale):
        return [
            TabularMDP(np.broadcast_to(P[t], (H, S, K, S)), np.clip(r[t] * reward_scale, 0, 1), spec.gamma)
            for t in range(T)
        ]

    tasks = build(1.0)
    qs = np.stack([optimal_q(m) for m in tasks])
    decoders = recover_true_decoders(features, qs)
    reward_scale = 1.0
    largest = np.linalg.norm(decoders, axis=-1).max()
    if largest > spec.w_max:
        reward_scale = spec.w_max / largest
        tasks = build(reward_scale)
        qs = np.stack([optimal_q(m) for m in tasks])
        decoders = recover_true_decoders(features, qs)

    return TaskEnsemble(
        spec=spec,
        seed=seed,
        tasks=tasks,
        features=features,
        decoders=decoders,
        reward_params=thetas * (reward_scale / feature_scale),
        next_state_measures=nus,
        feature_scale=float(feature_scale),
        reward_scale=float(reward_scale),
    )
