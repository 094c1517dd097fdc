import numpy as np
import pytest

from hwfilter.admissible import AdmissibleSet, contains, contains_batch
from hwfilter.filters import (
    InfeasibleSetError,
    NotPositiveDefiniteError,
    OracleOptions,
    action_grid,
    project_euclidean,
    project_weighted,
    safe_q_max,
    spd_repair,
)
from hwfilter.qmodel import FeatureMap, FeatureQModel, GaussianRBFBank, QuadraticQModel
from hwfilter.qp import QPError, solve_qp

from oracles import grid_argmin_batch


def line_set(**kw):
    return AdmissibleSet.from_rows([(np.array([1.0, 1.0]), 1.0)], 2, **kw)


def test_feasible_reference_is_returned():
    s = line_set()
    r = project_euclidean(s, [2.0, 2.0])
    np.testing.assert_array_equal(r.action, [2.0, 2.0])
    assert r.active_rows == () and r.objective == 0.0


def test_euclidean_projection_onto_line():
    r = project_euclidean(line_set(), [0.0, 0.0])
    np.testing.assert_allclose(r.action, [0.5, 0.5], atol=1e-12)
    assert r.active_rows == (0,)
    ug, _ = grid_argmin_batch(lambda U: np.sum(U * U, 1), [0, 0], [1, 1], 1e-3, feasible=lambda U: U.sum(1) >= 1 - 1e-12)
    np.testing.assert_allclose(r.action, ug, atol=2e-3)


def test_weighted_projection_hand_kkt():
    W = np.diag([4.0, 1.0])
    r = project_weighted(line_set(), [0.0, 0.0], W)
    np.testing.assert_allclose(r.action, [0.2, 0.8], atol=1e-12)
    assert r.objective == pytest.approx(0.5 * (4 * 0.04 + 0.64))
    ug, _ = grid_argmin_batch(lambda U: np.einsum("ij,jk,ik->i", U, W, U), [0, 0], [1, 1], 1e-3,
                              feasible=lambda U: U.sum(1) >= 1 - 1e-12)
    np.testing.assert_allclose(r.action, ug, atol=2e-3)


@pytest.mark.parametrize("w", [0.1, 1.0, 37.0])
def test_scalar_clamp_weight_invariant(w):
    s = AdmissibleSet.from_rows([(np.array([1.0]), 1.0)], 1)
    assert project_weighted(s, [0.0], np.array([[w]])).action[0] == pytest.approx(1.0)
    assert project_euclidean(s, [0.0]).action[0] == pytest.approx(1.0)


def test_identity_weight_matches_euclidean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(3, 2))
        s = AdmissibleSet(A, rng.normal(size=3) - 1.0, lower=[-3, -3], upper=[3, 3])
        u = rng.normal(size=2) * 2
        np.testing.assert_allclose(project_weighted(s, u, np.eye(2)).action, project_euclidean(s, u).action, atol=1e-12)


def test_weighted_projection_against_grid_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        L = rng.normal(size=(2, 2))
        W = L @ L.T + 0.5 * np.eye(2)
        s = AdmissibleSet(rng.normal(size=(2, 2)), rng.normal(size=2) - 0.5, lower=[-2, -2], upper=[2, 2])
        u_ref = rng.normal(size=2)
        r = project_weighted(s, u_ref, W)
        assert contains(s, r.action, tol=1e-9)
        d = r.action - u_ref
        # KKT optimality: no feasible lattice point beats the projection.
        _, best = grid_argmin_batch(lambda U: np.einsum("ij,jk,ik->i", U - u_ref, W, U - u_ref), [-2, -2], [2, 2], 1e-2,
                                    feasible=lambda U: contains_batch(s, U, tol=0.0))
        assert d @ W @ d <= best + 1e-12


def test_not_pd_weight_rejected():
    with pytest.raises(NotPositiveDefiniteError, match="spd_repair"):
        project_weighted(line_set(), [0.0, 0.0], np.diag([1.0, -1.0]))


def test_infeasible_hard_set_certificate():
    s = AdmissibleSet.from_rows([([1.0, 0.0], 1.0), ([-1.0, 0.0], 0.0)], 2)
    with pytest.raises(InfeasibleSetError) as info:
        project_euclidean(s, [0.0, 0.0])
    assert info.value.certificate == (0, 1)


def test_soft_mode_uses_slack_on_empty_rows():
    s = AdmissibleSet.from_rows([([1.0, 0.0], 1.0), ([-1.0, 0.0], 0.0)], 2, soft=True, slack_weight=10.0)
    r = project_weighted(s, [0.0, 0.0], np.eye(2))
    # min 1/2 u1^2 + 5 sigma^2 s.t. u1 >= 1 - sigma, -u1 >= -sigma: u1 = sigma = 0.5 at the optimum.
    assert r.slack_used == pytest.approx(0.5, abs=1e-9)
    assert r.action[0] == pytest.approx(0.5, abs=1e-9)


def test_soft_mode_no_slack_when_feasible():
    s = line_set(soft=True, slack_weight=1e6)
    r = project_weighted(s, [0.0, 0.0], np.diag([4.0, 1.0]))
    assert r.slack_used < 1e-5
    np.testing.assert_allclose(r.action, [0.2, 0.8], atol=1e-5)


def test_spd_repair_examples():
    w = spd_repair(np.diag([3.0, 2.0]), 1.0)
    assert not w.repaired
    np.testing.assert_array_equal(w.mat, np.diag([3.0, 2.0]))
    w = spd_repair(np.diag([3.0, -1.0]), 0.5)
    assert w.repaired
    np.testing.assert_allclose(w.mat, np.diag([3.0, 0.5]), atol=1e-14)
    with pytest.raises(ValueError):
        spd_repair(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_spd_repair_low_rank_change():
    rng = np.random.default_rng(2)
    for _ in range(30):
        A = rng.normal(size=(4, 4))
        H = A + A.T
        floor = 0.3
        w = spd_repair(H, floor)
        clamped = int(np.sum(np.linalg.eigvalsh(H) < floor))
        assert np.linalg.matrix_rank(w.mat - H, tol=1e-9) <= clamped
        assert np.linalg.eigvalsh(w.mat).min() >= floor - 1e-12


def test_safe_q_max_quadratic_equals_weighted_projection():
    rng = np.random.default_rng(3)
    opts = OracleOptions(grid_res=0.1)
    for _ in range(10):
        L = rng.normal(size=(2, 2))
        W = L @ L.T + 0.5 * np.eye(2)
        c = rng.normal(size=2)
        q = QuadraticQModel(c, W)
        A = rng.normal(size=(2, 2))
        s = AdmissibleSet(A, A @ rng.uniform(-2, 2, size=2) - rng.uniform(0, 1, size=2), lower=[-3, -3], upper=[3, 3])
        r = safe_q_max(q, None, s, opts)
        np.testing.assert_allclose(r.action, project_weighted(s, c, W).action, atol=1e-6)


def test_safe_q_max_feasible_reference():
    q = QuadraticQModel(np.array([0.1, 0.2]), np.diag([2.0, 1.0]))
    s = AdmissibleSet(np.array([[1.0, 1.0]]), np.array([-1.0]), lower=[-2, -2], upper=[2, 2])
    np.testing.assert_allclose(safe_q_max(q, None, s).action, [0.1, 0.2], atol=1e-7)


def test_safe_q_max_nonconvex_q_against_grid():
    rng = np.random.default_rng(4)
    bank = GaussianRBFBank(rng.normal(size=(3, 1)), rng.normal(size=(3, 2)), 0.7)
    fmap = FeatureMap(1, 2, 0, 0, 0, bank)
    theta = np.zeros(fmap.size)
    theta[fmap.blocks["s"]] = [1.0, 0.0, 1.0]
    theta[fmap.blocks["nl"]] = [1.5, -1.0, 2.0]
    q = FeatureQModel(fmap, theta)
    s = AdmissibleSet(np.array([[1.0, -0.5]]), np.array([0.3]), lower=[-2, -2], upper=[2, 2])
    x = np.array([0.0])
    r = safe_q_max(q, x, s)
    assert contains(s, r.action, tol=1e-9)
    _, best = grid_argmin_batch(lambda U: -q.value_batch(x, U), [-2, -2], [2, 2], 2e-3,
                                feasible=lambda U: contains_batch(s, U, tol=0.0))
    assert r.value >= -best - 1e-9


def test_safe_q_max_needs_box_and_reports_empty():
    q = QuadraticQModel(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        safe_q_max(q, None, line_set())
    bad = AdmissibleSet.from_rows([([1.0, 0.0], 1.0), ([-1.0, 0.0], 0.0)], 2, lower=[-2, -2], upper=[2, 2])
    with pytest.raises(InfeasibleSetError):
        safe_q_max(q, None, bad)


def test_action_grid_caps_points():
    g = action_grid([-1, -1], [1, 1], 0.01, 500)
    assert g.shape[0] <= 500 and g.shape[1] == 2
    np.testing.assert_allclose(g.min(0), [-1, -1])


def test_solve_qp_requires_feasible_start():
    with pytest.raises(QPError):
        solve_qp(np.eye(1), np.zeros(1), np.array([[1.0]]), np.array([1.0]), np.array([0.0]))


def test_solve_qp_box_kkt():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    f = np.array([-4.0, -3.0])
    G = np.vstack([np.eye(2), -np.eye(2)])
    h = np.array([0.0, 0.0, -1.0, -1.0])
    sol = solve_qp(H, f, G, h, np.array([0.5, 0.5]))
    z = sol.z
    ug, _ = grid_argmin_batch(lambda U: 0.5 * np.einsum("ij,jk,ik->i", U, H, U) + U @ f, [0, 0], [1, 1], 1e-3)
    np.testing.assert_allclose(z, ug, atol=2e-3)
    assert sol.kkt_residual < 1e-10
    assert np.all(sol.multipliers >= -1e-12)


def test_filter_result_serializes():
    r = project_euclidean(line_set(), [0.0, 0.0]).to_dict()
    assert r["action"] == pytest.approx([0.5, 0.5]) and r["active_rows"] == [0]
