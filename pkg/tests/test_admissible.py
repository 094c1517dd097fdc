import numpy as np
import pytest

from hwfilter.admissible import (
    AdmissibleSet,
    InfeasibleRowError,
    Obstacle,
    build_zcbf_constraints,
    contains,
    contains_batch,
    feasibility_check,
    zcbf_expression,
)


def halfspace(a, b, dim=None, **kw):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return AdmissibleSet.from_rows([(a, b)], dim or a.size, **kw)


def test_zcbf_one_dimensional_row():
    obs = Obstacle(np.array([0.0]), 1.0)
    aset = build_zcbf_constraints([2.0], [-1.0], [obs])
    np.testing.assert_allclose(aset.A, [[4.0]])
    np.testing.assert_allclose(aset.b, [2.0])
    assert contains(aset, [0.5]) and not contains(aset, [0.49])
    # The row encodes exactly the second-order barrier inequality.
    for u in np.linspace(-2, 2, 9):
        assert zcbf_expression([2.0], [-1.0], [u], obs) == pytest.approx(4 * u - 2)


def test_zcbf_far_obstacle_admits_zero():
    aset = build_zcbf_constraints([20.0, 0.0], [0.0, 0.0], [Obstacle([0.0, 0.0], 1.0)])
    assert aset.b[0] < 0 and contains(aset, np.zeros(2))


def test_zcbf_two_obstacles_independent_rows():
    p, v = np.array([1.0, 2.0]), np.array([0.5, -0.3])
    o1, o2 = Obstacle([4.0, 2.0], 1.0, 0.2), Obstacle([0.0, -2.0], 0.5)
    both = build_zcbf_constraints(p, v, [o1, o2], alpha0=1.5, alpha1=3.0)
    for i, o in enumerate([o1, o2]):
        single = build_zcbf_constraints(p, v, [o], alpha0=1.5, alpha1=3.0)
        np.testing.assert_array_equal(both.A[i], single.A[0])
        assert both.b[i] == single.b[0]


def test_zcbf_row_matches_expression_randomly():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, v, u = rng.normal(size=(3, 2)) * 3
        obs = Obstacle(rng.normal(size=2), rng.uniform(0.2, 1.5), rng.uniform(0, 0.3))
        aset = build_zcbf_constraints(p, v, [obs], alpha0=1.3, alpha1=0.7)
        lhs = zcbf_expression(p, v, u, obs, alpha0=1.3, alpha1=0.7)
        assert aset.A[0] @ u - aset.b[0] == pytest.approx(lhs, abs=1e-10)


def test_zcbf_degenerate_rows():
    obs = Obstacle([1.0, 1.0], 1.0)
    with pytest.raises(InfeasibleRowError):
        build_zcbf_constraints([1.0, 1.0], [0.0, 0.0], [obs])
    # At the center with a large enough velocity the constant part is satisfied; row dropped.
    aset = build_zcbf_constraints([1.0, 1.0], [3.0, 0.0], [obs])
    assert aset.n_rows == 0


def test_contains_examples():
    empty = AdmissibleSet(np.zeros((0, 2)), np.zeros(0), dim=2)
    assert contains(empty, [1e6, -1e6])
    s = halfspace([1.0, 1.0], 1.0)
    assert contains(s, [0.5, 0.5], tol=1e-9)
    assert not contains(s, [0.45, 0.45], tol=1e-6)
    box = s.with_box([-1, -1], [1, 1])
    assert not contains(box, [1.5, 0.0])
    np.testing.assert_array_equal(contains_batch(box, np.array([[0.5, 0.5], [1.5, 0.0], [0.0, 0.0]])), [True, False, False])


def test_feasibility_single_halfspace_interior_point():
    s = halfspace([1.0, 0.0], 1.0, lower=[-2, -2], upper=[2, 2])
    fc = feasibility_check(s)
    assert fc.feasible and fc.point[0] > 1.0 and contains(s, fc.point)


def test_feasibility_certificate_lists_conflicting_rows():
    s = AdmissibleSet.from_rows([([1.0, 0.0], 1.0), ([-1.0, 0.0], 0.0)], 2)
    fc = feasibility_check(s)
    assert not fc.feasible
    assert fc.certificate == (0, 1)


def test_feasibility_obstacle_row_always_nonempty():
    rng = np.random.default_rng(1)
    for _ in range(30):
        p, v = rng.normal(size=(2, 2)) * 2
        aset = build_zcbf_constraints(p, v, [Obstacle(rng.normal(size=2), 0.8)])
        fc = feasibility_check(aset)
        assert fc.feasible and contains(aset, fc.point)


def test_set_validation():
    with pytest.raises(ValueError):
        AdmissibleSet(np.ones((2, 2)), np.ones(3))
    with pytest.raises(ValueError):
        AdmissibleSet(np.ones((1, 2)), np.ones(1), lower=[1, 1], upper=[0, 0])
    with pytest.raises(ValueError):
        AdmissibleSet(np.array([[np.nan, 1.0]]), np.ones(1))
    with pytest.raises(ValueError):
        Obstacle([0.0, 0.0], -1.0)


def test_hardened_and_stacked():
    s = halfspace([1.0, 1.0], 1.0, lower=[-1, -1], upper=[2, 2], soft=True)
    assert s.soft and not s.hardened().soft
    G, h = s.stacked()
    assert G.shape == (5, 2)
    np.testing.assert_allclose(h, [1, -1, -1, -2, -2])
