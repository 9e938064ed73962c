"""Multitask fitted Q-iteration with an exact ERM oracle over a finite encoder class.

For a fixed encoder the pooled Bellman loss separates across tasks, so the
joint minimisation is solved by enumerating the encoder class and fitting
closed-form ridge decoders for every task.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetBundle, StageSlice, TaskDataset
from .features import EncoderClass, FeatureMap
from .mdp import TaskEnsemble, q_max
from .serialize import MODEL_SCHEMA_VERSION, SchemaError

__all__ = [
    "FitReport",
    "LearnedModel",
    "RankDeficientDesign",
    "SolverConfig",
    "StageFit",
    "bootstrap_values",
    "empirical_bellman_loss",
    "fit_downstream",
    "fit_stage",
    "model_from_dict",
    "model_to_dict",
    "run_exact_mtfqi",
    "run_mtfqi",
]

MODES = ("per-stage", "global")


class RankDeficientDesign(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``tol`` and ``max_iter`` drive the inner repeat loop at each stage;
    ``psi_eff`` is only carried through to bound reporting.
    """

    ridge: float = 1e-8
    max_iter: int = 10
    tol: float = 1e-10
    gamma: float = 1.0
    mode: str = "per-stage"
    psi_eff: int | None = None

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class StageFit:
    decoders: np.ndarray
    loss: float
    residuals: np.ndarray


@dataclass
class LearnedModel:
    """Fitted encoders (one per stage) and decoders ``(T, H, d)``."""

    encoders: list
    encoder_index: np.ndarray
    decoders: np.ndarray
    stage_losses: np.ndarray
    selection_trace: np.ndarray
    gamma: float
    q_cap: float
    task_ids: list
    mode: str = "per-stage"

    @property
    def horizon(self) -> int:
        return len(self.encoders)

    @property
    def num_tasks(self) -> int:
        return self.decoders.shape[0]

    def q_values(self, clamp: bool = True) -> np.ndarray:
        """Implied Q tables ``(T, H, S, K)``, clipped to ``[0, q_cap]`` by default."""
        q = np.stack(
            [phi.q_values(self.decoders[:, h]) for h, phi in enumerate(self.encoders)], axis=1
        )
        return np.clip(q, 0.0, self.q_cap) if clamp else q


@dataclass
class FitReport:
    stage_losses: np.ndarray
    iterations: np.ndarray
    dtheta: list
    residual_var: np.ndarray
    ridge: float
    extras: dict = field(default_factory=dict)


def bootstrap_values(phi: FeatureMap, w: np.ndarray, next_states: np.ndarray, q_cap=None) -> np.ndarray:
    """``max_a' <phi(s', a'), w_t>`` for next states ``(T, n)`` and decoders ``(T, d)``."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != phi.dim:
        raise ValueError(f"decoder dimension {w.shape[-1]} does not match encoder dimension {phi.dim}")
    q_next = np.einsum("tnkd,td->tnk", phi.by_state()[next_states], w)
    if q_cap is not None:
        q_next = np.clip(q_next, 0.0, q_cap)
    return q_next.max(axis=-1)


def _design(phi: FeatureMap, stage: StageSlice) -> np.ndarray:
    return phi.by_state()[stage.states, stage.actions]


def empirical_bellman_loss(
    phi: FeatureMap,
    w_h: np.ndarray,
    w_next: np.ndarray | None,
    stage: StageSlice,
    gamma: float = 1.0,
    phi_next: FeatureMap | None = None,
    q_cap: float | None = None,
) -> float:
    """Pooled squared Bellman residual over the ``T * n`` stage transitions.

    Pass ``w_next=None`` at the last stage, where the bootstrap term is zero.
    """
    w_h = np.atleast_2d(np.asarray(w_h, dtype=float))
    if w_h.shape[-1] != phi.dim:
        raise ValueError(f"decoder dimension {w_h.shape[-1]} does not match encoder dimension {phi.dim}")
    pred = np.einsum("tnd,td->tn", _design(phi, stage), w_h)
    target = np.asarray(stage.rewards, dtype=float)
    if w_next is not None:
        w_next = np.atleast_2d(w_next)
        target = target + gamma * bootstrap_values(phi_next or phi, w_next, stage.next_states, q_cap)
    return float(np.mean((pred - target) ** 2))


def fit_stage(phi: FeatureMap, stage: StageSlice, targets: np.ndarray, ridge: float = 1e-8) -> StageFit:
    """Per-task ridge regression of ``targets`` on ``phi(s, a)`` via the normal equations."""
    X = _design(phi, stage)
    y = np.asarray(targets, dtype=float)
    T, n, d = X.shape
    if n < 1:
        raise ValueError("need at least one transition per task")
    if ridge == 0.0:
        ranks = [np.linalg.matrix_rank(X[t]) for t in range(T)]
        if min(ranks, default=d) < d:
            raise RankDeficientDesign("rank-deficient design; increase n or ridge")
    gram = np.einsum("tnd,tne->tde", X, X) + ridge * np.eye(d)
    rhs = np.einsum("tnd,tn->td", X, y)
    try:
        w = np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise RankDeficientDesign("rank-deficient design; increase n or ridge") from None
    residuals = np.einsum("tnd,td->tn", X, w) - y
    return StageFit(w, float(np.mean(residuals**2)), residuals)


def _select(candidates, fit_one, T, d, config, trace_row):
    """Inner repeat loop of one stage: fit every candidate, keep the lowest loss."""
    theta = np.zeros((T, d))
    dthetas = []
    while True:
        best = None
        for j, phi in candidates:
            fit = fit_one(phi)
            trace_row[j] = fit.loss
            if best is None or fit.loss < best[2].loss:
                best = (j, phi, fit)
        dtheta = float(np.linalg.norm(best[2].decoders - theta))
        dthetas.append(dtheta)
        theta = best[2].decoders
        if dtheta < config.tol or len(dthetas) >= config.max_iter:
            return best, dthetas


def _backward(bundle: DatasetBundle, candidates, n_members, config, task_ids):
    H, T = bundle.horizon, bundle.num_tasks
    d = candidates[0][0][1].dim
    q_cap = q_max(config.gamma, H)
    decoders = np.zeros((T, H, d))
    encoders = [None] * H
    index = np.zeros(H, dtype=int)
    losses = np.zeros(H)
    resid_var = np.zeros(H)
    trace = np.full((H, n_members), np.nan)
    iterations = np.zeros(H, dtype=int)
    dtheta = [None] * H
    for h in reversed(range(H)):
        stage = bundle.stage(h)
        targets = stage.rewards.astype(float)
        if h < H - 1:
            targets = targets + config.gamma * bootstrap_values(
                encoders[h + 1], decoders[:, h + 1], stage.next_states, q_cap
            )

        def fit_one(phi):
            try:
                return fit_stage(phi, stage, targets, config.ridge)
            except RankDeficientDesign as exc:
                raise RankDeficientDesign(f"stage {h}, encoder {phi.label!r}: {exc}") from None

        (j, phi, fit), dthetas = _select(candidates[h], fit_one, T, d, config, trace[h])
        encoders[h], index[h], decoders[:, h] = phi, j, fit.decoders
        losses[h] = fit.loss
        resid_var[h] = float(np.var(fit.residuals**2))
        iterations[h] = len(dthetas)
        dtheta[h] = dthetas
    model = LearnedModel(encoders, index, decoders, losses, trace, config.gamma, q_cap, task_ids, config.mode)
    report = FitReport(losses.copy(), iterations, dtheta, resid_var, config.ridge)
    return model, report


def _check_compatible(bundle: DatasetBundle, encoders: EncoderClass):
    if bundle.num_tasks == 0:
        raise ValueError("bundle has no tasks")
    S, K = encoders[0].num_states, encoders[0].num_actions
    for ds in bundle.datasets:
        if ds.states.max() >= S or ds.next_states.max() >= S or ds.actions.max() >= K:
            raise ValueError("bundle indices exceed the encoder's (S, K)")


def run_mtfqi(bundle: DatasetBundle, encoders: EncoderClass, config: SolverConfig = SolverConfig()):
    """Fit the multitask model backward from the last stage.

    Parameters
    ----------
    bundle : DatasetBundle
        ``n`` transitions per stage for each of ``T`` tasks.
    encoders : EncoderClass
        Finite encoder class searched exhaustively.
    config : SolverConfig
        ``mode="per-stage"`` picks an encoder at every stage; ``"global"``
        runs the backward pass once per encoder and keeps the one with the
        smallest summed stage loss.

    Returns
    -------
    (LearnedModel, FitReport)
    """
    _check_compatible(bundle, encoders)
    members = list(enumerate(encoders))
    H = bundle.horizon
    if config.mode == "per-stage":
        return _backward(bundle, [members] * H, len(members), config, bundle.task_ids)

    runs = [_backward(bundle, [[m]] * H, len(members), config, bundle.task_ids) for m in members]
    totals = [float(run[0].stage_losses.sum()) for run in runs]
    best = int(np.argmin(totals))
    model, report = runs[best]
    trace = np.stack([run[0].stage_losses for run in runs], axis=1)
    model = replace(model, selection_trace=trace)
    report.extras["global_totals"] = totals
    return model, report


def fit_downstream(phi_hat, dataset: TaskDataset, config: SolverConfig = SolverConfig()):
    """Backward FQI on one new task with the encoder frozen.

    ``phi_hat`` is a single FeatureMap, a per-stage list of them, or an
    upstream LearnedModel whose stage encoders are reused.
    """
    H = dataset.horizon
    if isinstance(phi_hat, LearnedModel):
        stage_encoders = list(phi_hat.encoders)
    elif isinstance(phi_hat, FeatureMap):
        stage_encoders = [phi_hat] * H
    else:
        stage_encoders = list(phi_hat)
    if len(stage_encoders) != H:
        raise ValueError(f"need {H} stage encoders, got {len(stage_encoders)}")
    bundle = DatasetBundle([dataset], dataset.n, H, dataset.seed)
    candidates = [[(0, phi)] for phi in stage_encoders]
    return _backward(bundle, candidates, 1, config, [dataset.task])


def run_exact_mtfqi(
    ensemble: TaskEnsemble,
    encoders: EncoderClass,
    weights: np.ndarray,
    config: SolverConfig = SolverConfig(),
    tasks=None,
):
    """Population version of :func:`run_mtfqi`.

    Sample averages are replaced by expectations: regression points are all
    ``(s, a)`` pairs weighted by ``weights[t, h]`` (usually the behavior
    occupancy) and targets are the conditional means
    ``r + gamma * E[max_a' Q_next(s', a')]``. Each weighted least-squares
    problem is solved exactly (minimum-norm when the support is smaller than
    ``d``), so ``config.ridge`` is not used. Stage losses are the weighted
    squared deviations from the conditional-mean targets, which vanish when
    the class can represent them.
    """
    tasks = list(range(ensemble.num_tasks)) if tasks is None else list(tasks)
    mdps = [ensemble.tasks[t] for t in tasks]
    weights = np.asarray(weights, dtype=float)
    T = len(mdps)
    H, S, K = mdps[0].rewards.shape
    if weights.shape != (T, H, S, K):
        raise ValueError(f"weights must have shape {(T, H, S, K)}, got {weights.shape}")
    d = encoders[0].dim
    q_cap = q_max(config.gamma, H)
    members = list(enumerate(encoders))
    decoders = np.zeros((T, H, d))
    stage_enc = [None] * H
    index = np.zeros(H, dtype=int)
    losses = np.zeros(H)
    trace = np.full((H, len(members)), np.nan)
    iterations = np.zeros(H, dtype=int)
    dtheta = [None] * H

    for h in reversed(range(H)):
        y = np.stack([m.rewards[h] for m in mdps])
        if h < H - 1:
            q_next = np.clip(stage_enc[h + 1].q_values(decoders[:, h + 1]), 0.0, q_cap)
            v_next = q_next.max(axis=-1)
            y = y + config.gamma * np.einsum("tsap,tp->tsa", np.stack([m.transitions[h] for m in mdps]), v_next)
        y = y.reshape(T, S * K)
        w = weights[:, h].reshape(T, S * K)

        def fit_one(phi):
            dec = np.zeros((T, d))
            loss = 0.0
            for t in range(T):
                sup = w[t] > 0
                sw = np.sqrt(w[t, sup])
                dec[t], *_ = np.linalg.lstsq(sw[:, None] * phi.table[sup], sw * y[t, sup], rcond=None)
                loss += float(np.sum(w[t] * (phi.table @ dec[t] - y[t]) ** 2))
            return StageFit(dec, loss / T, np.empty(0))

        (j, phi, fit), dthetas = _select(members, fit_one, T, d, config, trace[h])
        stage_enc[h], index[h], decoders[:, h] = phi, j, fit.decoders
        losses[h] = fit.loss
        iterations[h] = len(dthetas)
        dtheta[h] = dthetas

    model = LearnedModel(stage_enc, index, decoders, losses, trace, config.gamma, q_cap, tasks, "per-stage")
    report = FitReport(losses.copy(), iterations, dtheta, np.zeros(H), 0.0)
    return model, report


def model_to_dict(model: LearnedModel, report: FitReport | None = None) -> dict:
    tables = {}
    for phi in model.encoders:
        tables.setdefault(phi.label, phi.table.tolist())
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": "mtfqi-model",
        "mode": model.mode,
        "gamma": model.gamma,
        "q_cap": model.q_cap,
        "K": model.encoders[0].num_actions,
        "task_ids": list(map(int, model.task_ids)),
        "stage_encoders": [phi.label for phi in model.encoders],
        "encoder_index": model.encoder_index.tolist(),
        "encoder_tables": tables,
        "decoders": model.decoders.tolist(),
        "stage_losses": model.stage_losses.tolist(),
        "selection_trace": [[None if np.isnan(v) else v for v in row] for row in model.selection_trace.tolist()],
    }
    if report is not None:
        doc["report"] = {
            "stage_losses": report.stage_losses.tolist(),
            "iterations": report.iterations.tolist(),
            "dtheta": report.dtheta,
            "residual_var": report.residual_var.tolist(),
            "ridge": report.ridge,
        }
    return doc


def model_from_dict(doc: dict):
    """Inverse of :func:`model_to_dict`; returns ``(model, report_or_None)``."""
    if not isinstance(doc, dict) or doc.get("kind") != "mtfqi-model":
        raise SchemaError("not a mtfqi-model document")
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise SchemaError(
            f"mtfqi-model schema_version {doc.get('schema_version')!r} is not supported "
            f"(this library reads version {MODEL_SCHEMA_VERSION})"
        )
    K = int(doc["K"])
    maps = {label: FeatureMap(np.array(t), K, label) for label, t in doc["encoder_tables"].items()}
    trace = np.array([[np.nan if v is None else v for v in row] for row in doc["selection_trace"]], dtype=float)
    model = LearnedModel(
        encoders=[maps[label] for label in doc["stage_encoders"]],
        encoder_index=np.array(doc["encoder_index"], dtype=int),
        decoders=np.array(doc["decoders"], dtype=float),
        stage_losses=np.array(doc["stage_losses"], dtype=float),
        selection_trace=trace,
        gamma=float(doc["gamma"]),
        q_cap=float(doc["q_cap"]),
        task_ids=list(doc["task_ids"]),
        mode=doc.get("mode", "per-stage"),
    )
    report = None
    if "report" in doc:
        r = doc["report"]
        report = FitReport(
            np.array(r["stage_losses"]), np.array(r["iterations"]), r["dtheta"],
            np.array(r["residual_var"]), float(r["ridge"]),
        )
    return model, report
