import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtfqi.analysis import (
    BoundInputs,
    UnboundedConcentrability,
    behavior_occupancies,
    bernstein_term,
    decoder_budget,
    error_report,
    evaluate,
    lambda_max,
    lambda_max_bruteforce,
    rademacher_estimate,
    theorem1a_bound,
    theorem1b_recursion_step,
    theorem1c_bound,
    theorem2_bound,
    weighted_q_error,
)
from mtfqi.data import collect_bundle
from mtfqi.features import FeatureMap, build_encoder_class
from mtfqi.fqi import run_mtfqi
from mtfqi.mdp import EnsembleSpec, TabularMDP, generate_ensemble, occupancy

from oracles import concentrability_loops, random_mdp


# -- weighted error ----------------------------------------------------------------

def test_weighted_error_basics():
    rng = np.random.default_rng(0)
    q = rng.random((3, 2))
    mu = rng.dirichlet(np.ones(6)).reshape(3, 2)
    assert weighted_q_error(q, q, mu) == 0.0
    point = np.zeros((3, 2))
    point[1, 0] = 1.0
    other = q.copy()
    other[1, 0] -= 2.5
    other[0, 1] += 100.0  # off the support
    assert weighted_q_error(other, q, point) == pytest.approx(2.5)


def test_weighted_error_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
    mu = rng.dirichlet(np.ones(15), size=4).reshape(4, 5, 3)
    for h in range(4):
        total = 0.0
        for s in range(5):
            for k in range(3):
                total += mu[h, s, k] * (a[h, s, k] - b[h, s, k]) ** 2
        assert weighted_q_error(a, b, mu, h) == pytest.approx(math.sqrt(total), rel=1e-12)


def test_weighted_error_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        weighted_q_error(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weighted_error_triangle(seed):
    rng = np.random.default_rng(seed)
    x, y, z = rng.normal(size=(3, 4, 3))
    mu = rng.dirichlet(np.ones(12)).reshape(4, 3)
    assert weighted_q_error(x, z, mu) <= weighted_q_error(x, y, mu) + weighted_q_error(y, z, mu) + 1e-12


# -- concentrability -----------------------------------------------------------------

def test_single_state_uniform_gives_k():
    K, H = 4, 3
    m = TabularMDP(np.ones((H, 1, K, 1)), np.zeros((H, 1, K)))
    mu = occupancy(m, np.full((H, 1, K), 1 / K))
    assert lambda_max(m, mu) == pytest.approx(K)
    assert lambda_max_bruteforce(m, mu) == pytest.approx(K)


def test_trivial_mdp_gives_one():
    m = TabularMDP(np.ones((3, 1, 1, 1)), np.zeros((3, 1, 1)))
    mu = occupancy(m, np.ones((3, 1, 1)))
    assert lambda_max(m, mu) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_bruteforce_and_loops(seed):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, 2, 2, 2, sparse=seed % 2 == 1)
    pi = rng.dirichlet(np.ones(2), size=(2, 2))
    mu = occupancy(m, pi)
    lam = lambda_max(m, mu)
    assert lam == lambda_max_bruteforce(m, mu)
    assert lam == pytest.approx(concentrability_loops(m, mu), rel=1e-12)
    assert lam >= 1.0


def test_unreachable_pairs_excluded():
    # state 1 can never be entered
    P = np.zeros((3, 2, 2, 2))
    P[..., 0] = 1.0
    m = TabularMDP(P, np.zeros((3, 2, 2)))
    mu = occupancy(m, np.full((3, 2, 2), 0.5))
    assert np.all(mu[:, 1] == 0)
    assert lambda_max(m, mu) == 2.0 == lambda_max_bruteforce(m, mu)


def test_uncovered_pair_raises():
    rng = np.random.default_rng(3)
    m = random_mdp(rng, 2, 2, 2)
    pi = np.zeros((2, 2, 2))
    pi[..., 0] = 1.0  # action 1 never taken
    mu = occupancy(m, pi)
    with pytest.raises(UnboundedConcentrability, match="unbounded concentrability"):
        lambda_max(m, mu)
    with pytest.raises(UnboundedConcentrability):
        lambda_max_bruteforce(m, mu)


def test_bruteforce_refuses_large():
    m = random_mdp(np.random.default_rng(0), 4, 3, 3)
    with pytest.raises(ValueError, match="exceeds"):
        lambda_max_bruteforce(m, occupancy(m, np.full((3, 4, 3), 1 / 3)))


def test_bruteforce_direction_from_policy():
    # the concentrability against the occupancy of a policy pi is at least
    # the ratio achieved by pi itself, i.e. 1
    rng = np.random.default_rng(4)
    m = random_mdp(rng, 3, 2, 2)
    mu = occupancy(m, rng.dirichlet(np.ones(2), size=(2, 3)))
    lam = lambda_max(m, mu)
    pi = rng.integers(0, 2, size=(2, 3))
    ratio = occupancy(m, pi)[mu > 0] / mu[mu > 0]
    assert ratio.max() <= lam + 1e-12


# -- bounds --------------------------------------------------------------------------

GOLDEN = BoundInputs(B=25.0, phi_size=8, psi_eff=16, T=5, n=200, H=5, delta=0.05)


def test_theorem1a_golden():
    log_term = math.log(2) + math.log(8) + 5 * math.log(16) + math.log(5) - math.log(0.05)
    expected = 25.0 * math.sqrt(2 * log_term / 1000)
    assert theorem1a_bound(GOLDEN) == pytest.approx(expected, rel=1e-15)
    assert theorem1a_bound(GOLDEN) == pytest.approx(5.152754423537, rel=1e-12)


def test_theorem1a_sqrt_scaling():
    four = BoundInputs(**{**GOLDEN.__dict__, "n": 800})
    assert theorem1a_bound(four) / theorem1a_bound(GOLDEN) == pytest.approx(0.5, rel=1e-14)


def test_default_b():
    assert BoundInputs.default_B(1.0, 5) == 25.0
    assert BoundInputs.default_B(0.5, 2) == pytest.approx(1.5**2)


def test_bound_input_checks():
    with pytest.raises(ValueError, match="delta"):
        theorem1a_bound(BoundInputs(**{**GOLDEN.__dict__, "delta": 1.0}))
    with pytest.raises(ValueError):
        theorem1c_bound(BoundInputs(**{**GOLDEN.__dict__, "n": 0}))
    with pytest.raises(ValueError):
        theorem1b_recursion_step(-1.0, GOLDEN)


def test_bernstein_term_value():
    L = 3.0
    assert bernstein_term(2.0, 0.5, L) == pytest.approx(4 / 3 * 3 + math.sqrt(16 / 9 * 9 + 12))
    assert bernstein_term(0.0, 0.0, L) == 0.0


def test_recursion_step_cases():
    bare = BoundInputs(B=0.0, phi_size=1, psi_eff=1, T=1, n=1, H=1, lam=3.0)
    assert theorem1b_recursion_step(0.7, bare) == pytest.approx(math.sqrt(6) * 0.7)
    inputs = BoundInputs(**{**GOLDEN.__dict__, "lam": 2.0, "eps_irred": 0.04, "sigma2": 1.0})
    L = math.log(2) + math.log(8) + 5 * math.log(16) - math.log(0.05)
    local = 0.2 + math.sqrt(bernstein_term(25.0, 1.0, L))
    assert theorem1b_recursion_step(0.0, inputs) == pytest.approx(local)
    assert theorem1b_recursion_step(1.0, inputs) == pytest.approx(2.0 + local)


def test_recursion_unrolled_vs_closed_form():
    # unrolling H steps gives a geometric sum in sqrt(2 lam); with lam >= 1 it
    # grows at least like H times the local term
    inputs = BoundInputs(B=1.0, phi_size=8, psi_eff=16, T=5, n=10_000, H=5, lam=1.0)
    err = 0.0
    for _ in range(inputs.H):
        err = theorem1b_recursion_step(err, inputs)
    local = theorem1b_recursion_step(0.0, inputs)
    r = math.sqrt(2 * inputs.lam)
    assert err == pytest.approx(local * (r**inputs.H - 1) / (r - 1))
    assert err >= inputs.H * local


def test_theorem1c_terms():
    a = BoundInputs(**{**GOLDEN.__dict__, "lam": 4.0})
    b = BoundInputs(**{**GOLDEN.__dict__, "lam": 4.0, "H": 10})
    rate = (math.log(8) + 5 * math.log(16)) / 1000
    assert theorem1c_bound(a) == pytest.approx(25 * 4 * math.sqrt(rate) + 125 * 4 * rate)
    cubic = lambda x: x.H**3 * x.lam * rate
    assert cubic(b) / cubic(a) == 8
    huge = BoundInputs(**{**GOLDEN.__dict__, "n": 10**15})
    assert theorem1c_bound(huge) < 1e-3


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 1000), st.integers(1, 50), st.integers(1, 20), st.floats(1.0, 50.0),
    st.integers(2, 100), st.floats(0.0, 1.0),
)
def test_theorem1c_monotone(n, T, H, lam, phi, eps):
    base = BoundInputs(B=1.0, phi_size=phi, psi_eff=16, T=T, n=n, H=H, lam=lam, eps_irred=eps)
    v = theorem1c_bound(base)
    assert theorem1c_bound(BoundInputs(**{**base.__dict__, "n": 2 * n})) <= v
    assert theorem1c_bound(BoundInputs(**{**base.__dict__, "H": H + 1})) >= v
    assert theorem1c_bound(BoundInputs(**{**base.__dict__, "lam": 2 * lam})) >= v
    # with |Psi|^T the log class size is linear in T, so the rate term
    # log|F| / (nT) tends to log|Psi| / n rather than to zero
    bigger_T = theorem1c_bound(BoundInputs(**{**base.__dict__, "T": 2 * T}))
    assert bigger_T <= v + 1e-12


def test_theorem1c_T_plateau():
    vals = [theorem1c_bound(BoundInputs(**{**GOLDEN.__dict__, "T": T})) for T in (1, 10, 100, 10_000)]
    assert vals[-1] > 0.9 * vals[-2]
    limit_rate = math.log(16) / 200
    assert vals[-1] == pytest.approx(25 * math.sqrt(limit_rate) + 125 * limit_rate, rel=1e-3)


def test_theorem2_golden_and_scaling():
    inputs = BoundInputs(B=25.0, phi_size=1, psi_eff=1, T=1, n=500, H=5, lam=2.0, rademacher=1 / math.sqrt(500))
    expected = 25 * 2 / math.sqrt(500) + 125 * 2 * math.log(20) / 500
    assert theorem2_bound(inputs) == pytest.approx(expected)
    a = BoundInputs(**{**inputs.__dict__, "rademacher": 1 / math.sqrt(100)})
    b = BoundInputs(**{**inputs.__dict__, "rademacher": 1 / math.sqrt(100 * 100)})
    mid = lambda x: theorem2_bound(x) - theorem2_bound(BoundInputs(**{**x.__dict__, "rademacher": 0.0}))
    assert mid(a) / mid(b) == pytest.approx(10)


def test_theorem2_below_theorem1c_for_small_rademacher():
    base = BoundInputs(B=25.0, phi_size=64, psi_eff=10**6, T=1, n=500, H=5, lam=2.0)
    log_f = math.log(64) + math.log(10**6)
    rad = 0.5 * math.sqrt(log_f / 500)
    down = BoundInputs(**{**base.__dict__, "rademacher": rad})
    assert theorem2_bound(down) < theorem1c_bound(base)


# -- Rademacher ----------------------------------------------------------------------

def test_rademacher_zero_embeddings():
    est = rademacher_estimate(np.zeros((10, 3)), 1.0, 50, 0)
    assert est.estimate == 0.0 and est.analytic_bound == 0.0


def test_rademacher_single_point():
    z = np.array([[0.3, 0.4]])
    est = rademacher_estimate(z, 2.0, 100, 1)
    assert est.estimate == pytest.approx(2.0 * 0.5, rel=1e-15)
    assert est.std_error == pytest.approx(0.0, abs=1e-15)


def test_rademacher_unit_norm_bound():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(400, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    est = rademacher_estimate(z, 1.0, 2000, 3)
    assert est.analytic_bound == pytest.approx(1 / 20)
    assert est.estimate <= 1 / 20 + 3 * est.std_error


def test_rademacher_matches_naive_monte_carlo():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(30, 3)) * 0.3
    est = rademacher_estimate(z, 1.5, 4000, 7)
    # the sup over the ball is attained at w = W * v / |v|; check against a
    # direct search over many random unit directions
    signs = np.random.default_rng(8).choice([-1.0, 1.0], size=(4000, 30))
    dirs = np.random.default_rng(9).normal(size=(20000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    naive = (1.5 / 30) * ((signs @ z) @ dirs.T).max(axis=1).mean()
    assert est.estimate == pytest.approx(naive, rel=0.05)


def test_rademacher_chunking_invariant():
    z = np.random.default_rng(0).normal(size=(20, 2))
    a = rademacher_estimate(z, 1.0, 600, 5, chunk=256)
    b = rademacher_estimate(z, 1.0, 600, 5, chunk=256)
    assert a == b


def test_rademacher_errors():
    with pytest.raises(ValueError):
        rademacher_estimate(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        rademacher_estimate(np.zeros((3, 2)), num_draws=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_rademacher_below_analytic(n, d, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    z /= np.maximum(1.0, np.linalg.norm(z, axis=1, keepdims=True))
    est = rademacher_estimate(z, 1.0, 300, seed)
    assert est.estimate <= est.analytic_bound + 3 * est.std_error + 1e-12
    assert est.analytic_bound <= 1 / math.sqrt(n) + 1e-12


# -- reports ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted():
    ens = generate_ensemble(EnsembleSpec(5, 3, 4, 3, 4, 1.0, np.inf), 1)
    cls = build_encoder_class(FeatureMap(ens.features, 3, "truth"), 5, 1.0, 2)
    bundle = collect_bundle(ens, "uniform", 300, 3)
    model, report = run_mtfqi(bundle, cls)
    return ens, cls, bundle, model, report


def test_error_report(fitted):
    ens, _, bundle, model, _ = fitted
    mu = behavior_occupancies(ens, bundle)
    rep = error_report(model, ens, bundle)
    assert rep.errors.shape == (4, 3) and np.all(rep.errors >= 0)
    np.testing.assert_allclose(rep.delta, rep.errors.mean(axis=1))
    q = model.q_values()
    q_star = ens.optimal_q()
    assert rep.errors[2, 1] == pytest.approx(weighted_q_error(q[1], q_star[1], mu[1], 2))
    beh = error_report(model, ens, bundle, "behavior")
    assert beh.comparator == "behavior"
    assert not np.allclose(beh.errors, rep.errors)
    with pytest.raises(ValueError):
        error_report(model, ens, bundle, "oracle")


def test_evaluate_contents(fitted):
    ens, cls, bundle, model, report = fitted
    out = evaluate(model, ens, bundle, report, cls)
    inputs = out["bound_inputs"]
    assert inputs["phi_size"] == 6 and inputs["T"] == 3 and inputs["n"] == 300 and inputs["B"] == 16.0
    assert inputs["eps_irred"] <= 1e-12  # truth is in the class
    assert inputs["sigma2"] == pytest.approx(report.residual_var.max())
    assert out["lambda_max"] >= 1.0
    assert set(out["bounds"]) >= {"theorem1a", "theorem1b_local", "theorem1c", "theorem2"}
    assert out["bounds"]["theorem1b_local_worst_case_sigma2"] >= out["bounds"]["theorem1b_local"]
    assert "constants" in out["bounds"]["note"]
    assert out["rademacher"]["estimate"] <= out["rademacher"]["analytic_bound"] + 3 * out["rademacher"]["std_error"]


def test_decoder_budget(fitted):
    ens = fitted[0]
    assert decoder_budget(ens) == pytest.approx(np.linalg.norm(ens.decoders, axis=-1).max())
    capped = generate_ensemble(EnsembleSpec(4, 2, 2, 1, 2, 1.0, 1.0), 0)
    assert decoder_budget(capped) == 1.0
