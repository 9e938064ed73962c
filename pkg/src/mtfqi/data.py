"""Behavior policies, offline dataset collection and the bundle file format.

Datasets are stored per stage as ``(H, n)`` integer/float arrays so a whole
stage slice across tasks can be stacked into ``(T, n)`` arrays for the
vectorised regressions in :mod:`mtfqi.fqi`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .mdp import TabularMDP, TaskEnsemble, optimal_q

__all__ = [
    "BUNDLE_SCHEMA_VERSION",
    "BehaviorPolicy",
    "BundleFormatError",
    "DatasetBundle",
    "SchemaVersionError",
    "StageSlice",
    "TaskDataset",
    "Transition",
    "collect",
    "collect_bundle",
    "derive_seed",
    "load_bundle",
    "save_bundle",
]

BUNDLE_SCHEMA_VERSION = 1


class SchemaVersionError(ValueError):
    pass


class BundleFormatError(ValueError):
    pass


def derive_seed(master_seed: int, *keys: int) -> int:
    """Independent child seed for ``(master_seed, *keys)``."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class BehaviorPolicy:
    """Stochastic stage-indexed behavior policy.

    ``descriptor`` is ``"uniform"`` or ``"eps:<epsilon>"``; the epsilon-greedy
    variant is greedy with respect to the task's optimal Q table.
    """

    descriptor: str
    table: np.ndarray

    @property
    def kind(self) -> str:
        return "uniform" if self.descriptor == "uniform" else "epsilon_greedy"

    @classmethod
    def uniform(cls, mdp: TabularMDP) -> "BehaviorPolicy":
        table = np.full(mdp.rewards.shape, 1.0 / mdp.num_actions)
        return cls("uniform", table)

    @classmethod
    def epsilon_greedy(cls, mdp: TabularMDP, epsilon: float, reference_q=None) -> "BehaviorPolicy":
        if not 0.0 < epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        q = optimal_q(mdp) if reference_q is None else np.asarray(reference_q)
        K = mdp.num_actions
        table = np.full(mdp.rewards.shape, epsilon / K)
        greedy = np.argmax(q, axis=-1)
        np.put_along_axis(table, greedy[..., None], epsilon / K + 1.0 - epsilon, axis=-1)
        return cls(f"eps:{epsilon!r}", table)

    @classmethod
    def from_descriptor(cls, descriptor: str, mdp: TabularMDP) -> "BehaviorPolicy":
        if descriptor == "uniform":
            return cls.uniform(mdp)
        if descriptor.startswith("eps:"):
            return cls.epsilon_greedy(mdp, float(descriptor[4:]))
        raise ValueError(f"unknown behavior {descriptor!r}; expected 'uniform' or 'eps:<float>'")


class Transition(NamedTuple):
    h: int
    s: int
    a: int
    r: float
    s_next: int


@dataclass(eq=False)
class TaskDataset:
    task: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    behavior: str = "uniform"
    seed: int = 0

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def transitions(self, h: int | None = None) -> Iterator[Transition]:
        stages = range(self.horizon) if h is None else [h]
        for k in stages:
            for i in range(self.n):
                yield Transition(
                    k, int(self.states[k, i]), int(self.actions[k, i]),
                    float(self.rewards[k, i]), int(self.next_states[k, i]),
                )

    def __eq__(self, other):
        if not isinstance(other, TaskDataset):
            return NotImplemented
        return (
            self.task == other.task and self.behavior == other.behavior and self.seed == other.seed
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("states", "actions", "rewards", "next_states")
            )
        )


class StageSlice(NamedTuple):
    """Stage-``h`` transitions of every task, each array ``(T, n)``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray


@dataclass
class DatasetBundle:
    datasets: list
    n: int
    horizon: int
    seed: int = 0
    ensemble_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for ds in self.datasets:
            if ds.n != self.n or ds.horizon != self.horizon:
                raise ValueError("every dataset in a bundle must have n samples on H stages")

    @property
    def num_tasks(self) -> int:
        return len(self.datasets)

    @property
    def task_ids(self) -> list:
        return [ds.task for ds in self.datasets]

    def stage(self, h: int) -> StageSlice:
        return StageSlice(*(
            np.stack([getattr(ds, k)[h] for ds in self.datasets])
            for k in ("states", "actions", "rewards", "next_states")
        ))


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((probs.shape[0], 1))
    idx = (np.cumsum(probs, axis=1) < u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def collect(
    ensemble: TaskEnsemble, task: int, behavior: BehaviorPolicy | str, n: int, seed: int
) -> TaskDataset:
    """Roll out ``n`` episodes of the behavior policy and slice them by stage.

    The stage-``h`` tuples of different episodes are i.i.d. draws from the
    stage-``h`` behavior occupancy; tuples of one episode across stages are
    dependent, which is harmless because each stage is regressed separately.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mdp = ensemble.tasks[task]
    if isinstance(behavior, str):
        behavior = BehaviorPolicy.from_descriptor(behavior, mdp)
    rng = np.random.default_rng(seed)
    H = mdp.horizon
    states = np.empty((H, n), dtype=np.int64)
    actions = np.empty((H, n), dtype=np.int64)
    next_states = np.empty((H, n), dtype=np.int64)
    s = np.full(n, mdp.initial_state, dtype=np.int64)
    for h in range(H):
        a = _sample_rows(behavior.table[h][s], rng)
        s_next = _sample_rows(mdp.transitions[h][s, a], rng)
        states[h], actions[h], next_states[h] = s, a, s_next
        s = s_next
    rewards = mdp.rewards[np.arange(H)[:, None], states, actions]
    return TaskDataset(task, states, actions, rewards, next_states, behavior.descriptor, int(seed))


def collect_bundle(
    ensemble: TaskEnsemble, behavior: str, n: int, seed: int, tasks=None
) -> DatasetBundle:
    """One dataset per task, task ``t`` seeded with ``derive_seed(seed, t)``."""
    from .serialize import ensemble_hash

    tasks = range(ensemble.num_tasks) if tasks is None else tasks
    datasets = [collect(ensemble, t, behavior, n, derive_seed(seed, t)) for t in tasks]
    return DatasetBundle(datasets, n, ensemble.spec.horizon, seed, ensemble_hash(ensemble))


def save_bundle(bundle: DatasetBundle, path) -> None:
    header = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "kind": "mtfqi-bundle",
        "ensemble_hash": bundle.ensemble_hash,
        "T": bundle.num_tasks,
        "n": bundle.n,
        "H": bundle.horizon,
        "seed": bundle.seed,
        "tasks": [
            {"task": ds.task, "behavior": ds.behavior, "seed": ds.seed} for ds in bundle.datasets
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for ds in bundle.datasets:
            for tr in ds.transitions():
                fh.write(json.dumps({"t": ds.task, **tr._asdict()}) + "\n")


def load_bundle(path) -> DatasetBundle:
    raw = Path(path).read_bytes()
    offset = 0
    records = []
    for line in raw.splitlines(keepends=True):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise BundleFormatError(
                    f"{path}: malformed record at byte offset {offset + exc.pos}: {exc.msg}"
                ) from None
            if not isinstance(records[-1], dict):
                raise BundleFormatError(f"{path}: expected an object at byte offset {offset}")
        offset += len(line)
    if not records:
        raise BundleFormatError(f"{path}: empty file (byte offset 0)")
    header, body = records[0], records[1:]
    version = header.get("schema_version")
    if version != BUNDLE_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: bundle schema_version {version!r} is not supported "
            f"(this library reads version {BUNDLE_SCHEMA_VERSION})"
        )
    try:
        T, n, H = int(header["T"]), int(header["n"]), int(header["H"])
        task_meta = header["tasks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError(f"{path}: bad header: {exc}") from None
    if len(body) != T * n * H:
        raise BundleFormatError(
            f"{path}: truncated bundle, expected {T * n * H} transitions but found "
            f"{len(body)} (file ends at byte offset {len(raw)})"
        )
    datasets = []
    for j, meta in enumerate(task_meta):
        chunk = body[j * n * H:(j + 1) * n * H]
        try:
            cols = {k: np.array([rec[k] for rec in chunk]).reshape(H, n) for k in ("s", "a", "r", "s_next")}
        except KeyError as exc:
            raise BundleFormatError(f"{path}: transition record missing field {exc}") from None
        datasets.append(TaskDataset(
            int(meta["task"]),
            cols["s"].astype(np.int64),
            cols["a"].astype(np.int64),
            cols["r"].astype(float),
            cols["s_next"].astype(np.int64),
            meta.get("behavior", "uniform"),
            int(meta.get("seed", 0)),
        ))
    return DatasetBundle(datasets, n, H, int(header.get("seed", 0)), header.get("ensemble_hash", ""))
