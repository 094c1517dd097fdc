import json
import math

import numpy as np
import pytest

from hwfilter.bounds import (
    A2ViolationError,
    BoundInputs,
    CertConfig,
    ErrorModelViolation,
    NotInRegimeError,
    estimate_constants,
    lemma2_gap,
    make_instance,
    run_certification,
    theorem1_bound,
    theorem2_holds,
    theorem2_threshold,
    theorem3_bound,
    theorem4_holds,
    theorem4_margin,
    weighted_ball_points,
)
from hwfilter.qmodel import QuadraticQModel


def test_suboptimality_bound_arithmetic():
    assert theorem1_bound(BoundInputs(mu=1.0, L2=0.0, D_radius=1.0)) == 0.0
    assert theorem1_bound(BoundInputs(mu=1.0, L2=6.0, D_radius=1.0)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        theorem1_bound(BoundInputs(mu=0.0, L2=1.0, D_radius=1.0))


def test_suboptimality_bound_homogeneity():
    b = BoundInputs(mu=0.7, L2=1.3, D_radius=0.9)
    base = theorem1_bound(b)
    assert theorem1_bound(BoundInputs(mu=0.7, L2=2.6, D_radius=0.9)) == pytest.approx(2 * base)
    assert theorem1_bound(BoundInputs(mu=0.7, L2=1.3, D_radius=1.8)) == pytest.approx(8 * base)


def test_theorem2_threshold_examples():
    beta_c1 = math.sqrt(3.0)  # c = (beta^2 - 1)/2 = 1
    assert theorem2_threshold(BoundInputs(mu=1, L2=3, D_radius=1, beta_ratio=beta_c1)) == pytest.approx(1.0)
    zero = BoundInputs(mu=1, L2=0, D_radius=1, beta_ratio=1.5, delta=0.0)
    assert theorem2_threshold(zero) == 0.0 and theorem2_holds(zero)
    with pytest.raises(NotInRegimeError):
        theorem2_threshold(BoundInputs(mu=1, L2=1, D_radius=1, beta_ratio=1.0))
    with pytest.raises(NotInRegimeError):
        theorem2_threshold(BoundInputs(mu=1, L2=1, D_radius=1))


def test_perturbed_gap_and_value_bound_arithmetic():
    assert lemma2_gap(BoundInputs(mu=1, L2=0, D_radius=1, rho=0.0)) == 0.0
    assert lemma2_gap(BoundInputs(mu=1, L2=0, D_radius=1, rho=0.02)) == pytest.approx(0.2)
    assert theorem3_bound(BoundInputs(mu=1, L2=0, D_radius=1, G=1, rho=0.02)) == pytest.approx(0.2)
    b = BoundInputs(mu=0.8, L2=2.0, D_radius=1.1, G=3.0, rho=0.0)
    assert theorem3_bound(b) == theorem1_bound(b)
    with pytest.raises(ErrorModelViolation):
        lemma2_gap(BoundInputs(mu=1, L2=0, D_radius=1, rho=1.0))


def test_perturbed_value_bound_dominates_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mu = rng.uniform(0.2, 2)
        b = BoundInputs(mu=mu, L2=rng.uniform(0, 3), D_radius=rng.uniform(0.1, 2), G=rng.uniform(0, 5), rho=rng.uniform(0, 0.99) * mu**2)
        assert theorem3_bound(b) >= theorem1_bound(b)


def test_theorem4_margin_examples():
    beta_c1 = math.sqrt(3.0)
    b = BoundInputs(mu=1, L2=0, D_radius=1, rho=0.0, delta=0.3, beta_ratio=beta_c1)
    assert theorem4_margin(b) == pytest.approx(0.09)
    assert theorem4_holds(b)
    # Choose delta so that c delta^2 equals the bound exactly.
    b0 = BoundInputs(mu=1, L2=3, D_radius=1, G=1, rho=0.02, beta_ratio=beta_c1)
    delta = math.sqrt(theorem3_bound(b0))
    edge = BoundInputs(mu=1, L2=3, D_radius=1, G=1, rho=0.02, delta=delta, beta_ratio=beta_c1)
    assert theorem4_margin(edge) == pytest.approx(0.0, abs=1e-12)


def test_theorem4_margin_monotonicity():
    base = dict(mu=1.0, L2=1.0, D_radius=1.0, G=2.0, rho=0.1, delta=0.8, beta_ratio=2.0)
    m0 = theorem4_margin(BoundInputs(**base))
    h = 1e-6
    for key, sign in (("rho", -1), ("L2", -1), ("delta", +1)):
        bumped = dict(base, **{key: base[key] + h})
        assert sign * (theorem4_margin(BoundInputs(**bumped)) - m0) > 0


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        BoundInputs(mu=1, L2=-1, D_radius=1)
    with pytest.raises(ValueError):
        BoundInputs(mu=1, L2=1, D_radius=0)
    with pytest.raises(ValueError):
        BoundInputs(mu=float("nan"), L2=1, D_radius=1)


def test_weighted_ball_points_inside():
    W = np.diag([4.0, 1.0])
    P = weighted_ball_points(W, np.array([0.5, -0.5]), 0.7, 300, seed=3)
    d = P - np.array([0.5, -0.5])
    assert P.shape == (300, 2)
    assert np.all(np.einsum("ni,ij,nj->n", d, W, d) <= 0.49 + 1e-12)


def test_estimate_constants_quadratic():
    W = np.diag([4.0, 1.0])
    q = QuadraticQModel(np.zeros(2), W)
    est = estimate_constants(q, None, np.zeros(2), 1.0)
    assert est.mu**2 == pytest.approx(1.0)
    assert est.L2 == pytest.approx(0.0, abs=1e-12)
    # max |W d| on the boundary dT W d = D^2 is D sqrt(lambda_max) = 2.
    assert 1.95 <= est.G <= 2.0 + 1e-12
    assert est.estimated


def test_estimate_constants_cubic_never_exceeds_construction():
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(2, 2))
    raw = np.array([0.7, -0.4])
    coefs = raw * 2.0 / np.sum(np.abs(raw) * np.linalg.norm(dirs, axis=1) ** 3)
    q = QuadraticQModel(np.zeros(2), np.diag([40.0, 30.0]), 0.0, dirs, coefs)
    assert q.L2 == pytest.approx(2.0)
    est = estimate_constants(q, None, np.zeros(2), 1.0)
    assert est.L2 <= 2.0 + 1e-12


def test_estimate_constants_errors():
    q = QuadraticQModel(np.zeros(1), np.eye(1))
    with pytest.raises(ValueError):
        estimate_constants(q, None, np.zeros(1), 1.0, samples=0)
    # Large cubic term: the Hessian turns positive inside the ball.
    bad = QuadraticQModel(np.zeros(1), np.eye(1), 0.0, np.eye(1), np.array([5.0]))
    with pytest.raises(A2ViolationError) as info:
        estimate_constants(bad, None, np.zeros(1), 1.0)
    assert info.value.witness is not None


def test_certification_small_run_all_satisfied(tmp_path):
    rep = run_certification(CertConfig(instances=20, seed=3))
    s = rep.summary()
    assert s["instances"] == 20 and s["violations"] == 0
    rep.to_json(tmp_path / "c.json")
    rep.to_csv(tmp_path / "c.csv")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert len(doc["instances"]) == 20
    assert (tmp_path / "c.csv").read_text().splitlines()[0].startswith("index,m,status")


def test_certification_reports_error_model_violation():
    rep = run_certification(CertConfig(instances=6, seed=4, force_rho_violation=True))
    statuses = {r.status for r in rep.records}
    assert statuses <= {"error model violated", "assumption A2 violated"}
    assert "error model violated" in statuses
    for r in rep.records:
        assert "lemma2" not in r.checks and "thm3" not in r.checks


def test_certification_with_sampled_constants():
    rep = run_certification(CertConfig(instances=6, seed=5, estimate=True))
    for r in rep.records:
        if "estimate" in r.checks:
            assert r.checks["estimate"]["satisfied"]


def test_make_instance_respects_generator_contract():
    cfg = CertConfig()
    rng = np.random.default_rng(6)
    for m in (1, 2, 4):
        inst = make_instance(rng, m, cfg)
        lam = np.linalg.eigvalsh(inst.W)
        assert lam[-1] / lam[0] <= cfg.cond_max * (1 + 1e-9)
        assert 1 <= inst.aset.n_rows <= cfg.max_rows
        assert np.all(inst.aset.A @ inst.u_ref < inst.aset.b)  # reference is always filtered
