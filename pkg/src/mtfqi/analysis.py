"""Error metrics, concentrability coefficients and finite-sample bound calculators.

The bounds written with an unspecified constant are evaluated with every
constant set to one; their outputs are meaningful up to constants only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import itertools
import math

import numpy as np

from .data import BehaviorPolicy, DatasetBundle
from .features import EncoderClass, psi_eff
from .fqi import FitReport, LearnedModel, SolverConfig, run_exact_mtfqi
from .mdp import TabularMDP, TaskEnsemble, occupancy, optimal_q, policy_q, q_max, state_occupancy

__all__ = [
    "BoundInputs",
    "ErrorReport",
    "RademacherEstimate",
    "UnboundedConcentrability",
    "behavior_occupancies",
    "bernstein_term",
    "decoder_budget",
    "error_report",
    "evaluate",
    "lambda_max",
    "lambda_max_bruteforce",
    "log_class_size",
    "rademacher_estimate",
    "theorem1a_bound",
    "theorem1b_recursion_step",
    "theorem1c_bound",
    "theorem2_bound",
    "weighted_q_error",
]

BRUTEFORCE_LIMIT = 10_000
SUPPORT_TOL = 1e-15


class UnboundedConcentrability(ValueError):
    pass


def weighted_q_error(q_hat: np.ndarray, q_ref: np.ndarray, mu: np.ndarray, h: int | None = None) -> float:
    """``sqrt(sum_{s,a} mu(s,a) (q_hat - q_ref)^2)`` at stage ``h``.

    With ``h=None`` the arguments are single-stage ``(S, K)`` tables.
    """
    q_hat, q_ref, mu = (np.asarray(x, dtype=float) for x in (q_hat, q_ref, mu))
    if not q_hat.shape == q_ref.shape == mu.shape:
        raise ValueError(f"shape mismatch: {q_hat.shape}, {q_ref.shape}, {mu.shape}")
    if h is not None:
        q_hat, q_ref, mu = q_hat[h], q_ref[h], mu[h]
    return float(np.sqrt(np.sum(mu * (q_hat - q_ref) ** 2)))


def behavior_occupancies(ensemble: TaskEnsemble, bundle: DatasetBundle) -> np.ndarray:
    """Behavior occupancy of every dataset in ``bundle``, shape ``(T, H, S, K)``."""
    return np.stack([
        occupancy(ensemble.tasks[ds.task], BehaviorPolicy.from_descriptor(ds.behavior, ensemble.tasks[ds.task]).table)
        for ds in bundle.datasets
    ])


@dataclass
class ErrorReport:
    """``errors[h, t]`` is the L2(mu_b) error of task ``t`` at stage ``h``."""

    errors: np.ndarray
    comparator: str

    @property
    def delta(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    @property
    def squared(self) -> np.ndarray:
        """Task-averaged squared errors per stage."""
        return (self.errors**2).mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "comparator": self.comparator,
            "errors": self.errors.tolist(),
            "delta": self.delta.tolist(),
            "mean_squared": self.squared.tolist(),
        }


def error_report(
    model: LearnedModel, ensemble: TaskEnsemble, bundle: DatasetBundle, comparator: str = "optimal",
    mu_b: np.ndarray | None = None,
) -> ErrorReport:
    """Per-stage, per-task errors of the model against Q* or the behavior policy's Q."""
    if comparator not in ("optimal", "behavior"):
        raise ValueError("comparator must be 'optimal' or 'behavior'")
    if mu_b is None:
        mu_b = behavior_occupancies(ensemble, bundle)
    q_hat = model.q_values()
    H = model.horizon
    errors = np.zeros((H, bundle.num_tasks))
    for j, ds in enumerate(bundle.datasets):
        mdp = ensemble.tasks[ds.task]
        if comparator == "optimal":
            ref = optimal_q(mdp)
        else:
            ref = policy_q(mdp, BehaviorPolicy.from_descriptor(ds.behavior, mdp).table)
        for h in range(H):
            errors[h, j] = weighted_q_error(q_hat[j], ref, mu_b[j], h)
    return ErrorReport(errors, comparator)


def _max_reach(mdp: TabularMDP, h: int, target: int):
    """Best probability of standing in ``target`` at stage ``h`` and a policy achieving it."""
    H, S, K = mdp.rewards.shape
    policy = np.zeros((H, S), dtype=int)
    v = np.zeros(S)
    v[target] = 1.0
    for k in range(h - 1, -1, -1):
        q = mdp.transitions[k] @ v
        policy[k] = np.argmax(q, axis=1)
        v = q.max(axis=1)
    return v[mdp.initial_state], policy


def _ratio_max(reach: np.ndarray, mu_b: np.ndarray) -> float:
    """``max reach[h, s] / mu_b[h, s, a]`` over pairs any policy can reach."""
    reach = np.broadcast_to(reach[:, :, None], mu_b.shape)
    live = reach > 0
    uncovered = live & (mu_b <= SUPPORT_TOL)
    if np.any(uncovered):
        h, s, a = map(int, np.argwhere(uncovered)[0])
        raise UnboundedConcentrability(
            f"unbounded concentrability: (h={h}, s={s}, a={a}) is reachable but has no behavior mass"
        )
    return float((reach[live] / mu_b[live]).max())


def lambda_max(mdp: TabularMDP, mu_b: np.ndarray) -> float:
    """Exact concentrability ``max_h max_pi ||mu_h^pi / mu_b,h||_inf``.

    For every ``(h, s)`` a backward recursion over reach probabilities finds
    a deterministic policy that maximises the chance of being in ``s`` at
    stage ``h``; choosing action ``a`` there puts all of that mass on
    ``(s, a)``. The maximising policy is then evaluated forward. Pairs that
    no policy can reach are skipped.
    """
    mu_b = np.asarray(mu_b, dtype=float)
    H, S, _ = mdp.rewards.shape
    reach = np.zeros((H, S))
    for h in range(H):
        for s in range(S):
            best, policy = _max_reach(mdp, h, s)
            if best > 0:
                reach[h, s] = state_occupancy(mdp, policy)[h, s]
    return _ratio_max(reach, mu_b)


def lambda_max_bruteforce(mdp: TabularMDP, mu_b: np.ndarray) -> float:
    """Concentrability by enumerating every deterministic stage-indexed policy."""
    H, S, K = mdp.rewards.shape
    if K ** (S * H) > BRUTEFORCE_LIMIT:
        raise ValueError(f"(K^S)^H = {K ** (S * H)} policies exceeds the limit {BRUTEFORCE_LIMIT}")
    mu_b = np.asarray(mu_b, dtype=float)
    reach = np.zeros((H, S))
    for flat in itertools.product(range(K), repeat=S * H):
        policy = np.array(flat).reshape(H, S)
        reach = np.maximum(reach, state_occupancy(mdp, policy))
    return _ratio_max(reach, mu_b)


@dataclass
class BoundInputs:
    """Ingredients of the finite-sample bounds.

    ``psi_eff`` may be an arbitrarily large Python int; only its logarithm
    is used.
    """

    B: float
    phi_size: int
    psi_eff: int
    T: int
    n: int
    H: int
    delta: float = 0.05
    lam: float = 1.0
    sigma2: float = 0.0
    eps_irred: float = 0.0
    rademacher: float = 0.0

    @classmethod
    def default_B(cls, gamma: float, horizon: int) -> float:
        return q_max(gamma, horizon) ** 2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["psi_eff"] = str(self.psi_eff)
        out["log_psi_eff"] = math.log(self.psi_eff)
        return out


def _check(inputs: BoundInputs):
    if not 0.0 < inputs.delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {inputs.delta}")
    for name in ("phi_size", "psi_eff", "T", "n", "H"):
        if getattr(inputs, name) < 1:
            raise ValueError(f"{name} must be >= 1")


def log_class_size(inputs: BoundInputs) -> float:
    """``log(|Phi| |Psi_eff|^T)``."""
    return math.log(inputs.phi_size) + inputs.T * math.log(inputs.psi_eff)


def theorem1a_bound(inputs: BoundInputs) -> float:
    """``B sqrt(2 log(2 |Phi| |Psi|^T H / delta) / (n T))`` (explicit constants)."""
    _check(inputs)
    log_term = math.log(2) + log_class_size(inputs) + math.log(inputs.H) - math.log(inputs.delta)
    return inputs.B * math.sqrt(2.0 * log_term / (inputs.n * inputs.T))


def bernstein_term(B: float, sigma2: float, log_term: float) -> float:
    return 2 * B / 3 * log_term + math.sqrt(4 * B**2 / 9 * log_term**2 + 8 * sigma2 * log_term)


def theorem1b_recursion_step(err_next: float, inputs: BoundInputs) -> float:
    """One backward step of the per-stage error recursion."""
    if err_next < 0:
        raise ValueError("err_next must be >= 0")
    _check(inputs)
    log_term = math.log(2) + log_class_size(inputs) - math.log(inputs.delta)
    local = math.sqrt(inputs.eps_irred) + math.sqrt(bernstein_term(inputs.B, inputs.sigma2, log_term))
    return math.sqrt(2 * inputs.lam) * err_next + local


def theorem1c_bound(inputs: BoundInputs) -> float:
    """``H lam eps + H^2 lam sqrt(log|F| / nT) + H^3 lam log|F| / nT`` (constants 1)."""
    _check(inputs)
    H, lam = inputs.H, inputs.lam
    rate = log_class_size(inputs) / (inputs.n * inputs.T)
    return H * lam * inputs.eps_irred + H**2 * lam * math.sqrt(rate) + H**3 * lam * rate


def theorem2_bound(inputs: BoundInputs) -> float:
    """``H lam eps_eff + H^2 lam R(G) + H^3 lam log(1/delta) / n`` (constants 1)."""
    _check(inputs)
    H, lam = inputs.H, inputs.lam
    return (
        H * lam * inputs.eps_irred
        + H**2 * lam * inputs.rademacher
        + H**3 * lam * math.log(1 / inputs.delta) / inputs.n
    )


@dataclass
class RademacherEstimate:
    estimate: float
    std_error: float
    analytic_bound: float


def rademacher_estimate(
    embeddings: np.ndarray, w_max: float = 1.0, num_draws: int = 1000, seed: int = 0, chunk: int = 256
) -> RademacherEstimate:
    """Monte Carlo Rademacher complexity of ``{z -> <w, z> : ||w|| <= w_max}``.

    For this class the supremum is ``(w_max / n) ||sum_i sigma_i z_i||``; the
    analytic bound is ``(w_max / n) sqrt(sum_i ||z_i||^2)``. Sign vectors are
    drawn in fixed-size chunks so results do not depend on ``num_draws``
    being split differently.
    """
    z = np.asarray(embeddings, dtype=float)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) array of embeddings")
    if num_draws < 1:
        raise ValueError("num_draws must be >= 1")
    n = z.shape[0]
    rng = np.random.default_rng(seed)
    sups = []
    for start in range(0, num_draws, chunk):
        m = min(chunk, num_draws - start)
        signs = rng.integers(0, 2, size=(m, n)) * 2.0 - 1.0
        sups.append(np.linalg.norm(signs @ z, axis=1) * (w_max / n))
    sups = np.concatenate(sups)
    se = float(sups.std(ddof=1) / math.sqrt(num_draws)) if num_draws > 1 else 0.0
    analytic = w_max / n * math.sqrt(float(np.sum(z**2)))
    return RademacherEstimate(float(sups.mean()), se, analytic)


def decoder_budget(ensemble: TaskEnsemble) -> float:
    """``spec.w_max``, or the largest true decoder norm when the budget is unbounded."""
    if math.isfinite(ensemble.spec.w_max):
        return ensemble.spec.w_max
    return float(np.linalg.norm(ensemble.decoders, axis=-1).max())


def evaluate(
    model: LearnedModel,
    ensemble: TaskEnsemble,
    bundle: DatasetBundle,
    report: FitReport | None = None,
    encoders: EncoderClass | None = None,
    delta: float = 0.05,
    rademacher_draws: int = 200,
    seed: int = 0,
) -> dict:
    """Error reports under both comparators, bound inputs and bound values.

    ``eps_irred`` is the largest stage loss of the exact (population) fit
    over ``encoders`` (default: the encoders the model selected); ``sigma2``
    is the largest per-stage residual variance from ``report``.
    """
    mu_b = behavior_occupancies(ensemble, bundle)
    opt = error_report(model, ensemble, bundle, "optimal", mu_b)
    beh = error_report(model, ensemble, bundle, "behavior", mu_b)

    lam = max(lambda_max(ensemble.tasks[ds.task], mu_b[j]) for j, ds in enumerate(bundle.datasets))
    if encoders is None:
        seen = {}
        for phi in model.encoders:
            seen.setdefault(phi.label, phi)
        encoders = EncoderClass(tuple(seen.values()))
    exact, _ = run_exact_mtfqi(
        ensemble, encoders, mu_b, SolverConfig(gamma=model.gamma), tasks=bundle.task_ids
    )
    eps_irred = float(max(exact.stage_losses.max(), 0.0))
    sigma2 = float(report.residual_var.max()) if report is not None else 0.0

    H, n, T = bundle.horizon, bundle.n, bundle.num_tasks
    w_max = decoder_budget(ensemble)
    stage0 = bundle.stage(0)
    z = model.encoders[0].by_state()[stage0.states, stage0.actions].reshape(-1, model.encoders[0].dim)
    rad = rademacher_estimate(z, w_max, rademacher_draws, seed)
    inputs = BoundInputs(
        B=BoundInputs.default_B(model.gamma, H),
        phi_size=len(encoders),
        psi_eff=psi_eff(n, ensemble.spec.latent_dim, w_max),
        T=T, n=n, H=H, delta=delta, lam=lam, sigma2=sigma2, eps_irred=eps_irred,
        rademacher=rad.estimate,
    )
    worst_case = BoundInputs(**{**asdict(inputs), "sigma2": inputs.B**2 / 4})
    return {
        "errors": {"optimal": opt.to_dict(), "behavior": beh.to_dict()},
        "bound_inputs": inputs.to_dict(),
        "rademacher": asdict(rad),
        "bounds": {
            "theorem1a": theorem1a_bound(inputs),
            "theorem1b_local": theorem1b_recursion_step(0.0, inputs),
            "theorem1b_local_worst_case_sigma2": theorem1b_recursion_step(0.0, worst_case),
            "theorem1c": theorem1c_bound(inputs),
            "theorem2": theorem2_bound(inputs),
            "note": "theorem1b/1c/2 are evaluated with unit constants (up to constants)",
        },
        "lambda_max": lam,
    }
