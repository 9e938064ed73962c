"""Feature maps, finite encoder classes and linear Q evaluation."""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

__all__ = ["FeatureMap", "EncoderClass", "build_encoder_class", "linear_q", "psi_eff"]

NORM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """An ``(S*K, d)`` table of embeddings; row ``s * K + a`` is ``phi(s, a)``."""

    table: np.ndarray
    num_actions: int
    label: str = "phi"

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.ndim != 2 or table.shape[0] % self.num_actions:
            raise ValueError(f"feature table of shape {table.shape} does not fit K={self.num_actions}")
        if not np.all(np.isfinite(table)):
            raise ValueError("feature table has non-finite entries")
        if np.linalg.norm(table, axis=1).max(initial=0.0) > 1.0 + NORM_TOL:
            raise ValueError(f"feature map {self.label!r} has a row with norm > 1")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def num_states(self) -> int:
        return self.table.shape[0] // self.num_actions

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def by_state(self) -> np.ndarray:
        """View of the table as ``(S, K, d)``."""
        return self.table.reshape(self.num_states, self.num_actions, self.dim)

    def __call__(self, s, a):
        return self.by_state()[s, a]

    def q_values(self, w: np.ndarray) -> np.ndarray:
        """``<phi(s, a), w>`` for all pairs; ``w`` may carry leading batch axes."""
        w = np.asarray(w, dtype=float)
        return np.einsum("skd,...d->...sk", self.by_state(), w)


@dataclass(frozen=True)
class EncoderClass:
    members: tuple
    contains_truth: bool = False

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("encoder class must not be empty")
        shape = members[0].table.shape
        K = members[0].num_actions
        if any(m.table.shape != shape or m.num_actions != K for m in members):
            raise ValueError("encoder class members must share (S, K, d)")
        labels = [m.label for m in members]
        if len(set(labels)) != len(labels):
            raise ValueError("encoder labels must be unique")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def index_of(self, label: str) -> int:
        for i, m in enumerate(self.members):
            if m.label == label:
                return i
        raise KeyError(label)


def build_encoder_class(
    truth: FeatureMap, num_distractors: int, corruption: float = 1.0, seed: int = 0
) -> EncoderClass:
    """The true feature map plus ``num_distractors`` corrupted copies.

    Each distractor blends the truth with an independent random simplex
    table (scaled to unit largest row norm) with weight ``corruption``;
    ``corruption = 1`` gives a fully random table. Rows that end up longer
    than one are renormalised. Member order is shuffled with ``seed``.
    """
    if num_distractors < 0:
        raise ValueError("num_distractors must be >= 0")
    if not 0.0 <= corruption <= 1.0:
        raise ValueError("corruption must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_rows, d = truth.table.shape
    members = [FeatureMap(truth.table, truth.num_actions, "truth")]
    for i in range(num_distractors):
        noise = rng.dirichlet(np.ones(d), size=n_rows)
        noise /= np.linalg.norm(noise, axis=1).max()
        table = (1.0 - corruption) * truth.table + corruption * noise
        norms = np.linalg.norm(table, axis=1, keepdims=True)
        table = np.where(norms > 1.0, table / norms, table)
        members.append(FeatureMap(table, truth.num_actions, f"distractor-{i + 1}"))
    order = rng.permutation(len(members))
    return EncoderClass(tuple(members[i] for i in order), contains_truth=True)


def linear_q(phi: FeatureMap, w: np.ndarray, s: int, a: int) -> float:
    S, K = phi.num_states, phi.num_actions
    if not (0 <= s < S and 0 <= a < K):
        raise IndexError(f"(s, a) = ({s}, {a}) outside {S} x {K}")
    w = np.asarray(w, dtype=float)
    if w.shape != (phi.dim,):
        raise ValueError(f"decoder of shape {w.shape} does not match d={phi.dim}")
    return float(phi.table[s * K + a] @ w)


def psi_eff(n: int, d: int, w_max: float = 1.0) -> int:
    """Size of a ``1/(2 sqrt(n))`` grid covering the decoder ball, ``(1 + ceil(2 W sqrt(n)))^d``."""
    return (1 + math.ceil(2.0 * w_max * math.sqrt(n))) ** d
