"""
Tests for the independent oracles: Riccati, closed forms, finite differences, cone ladders
"""
import numpy as np
import pytest

from core.cones import ControlSet
from core.forward import FeedbackControl, NoiseEnsemble, evaluate_cost, simulate_pair
from core.hilbert import DimensionError, VerificationError
from core.oracles import (LQData, RiccatiError, analytic_first_adjoint_lq, brute_force_cone,
                          finite_diff_expansion, lq_data_from_spec, lyapunov_solve, ou_moments, riccati_solve,
                          riccati_table, second_difference)


def _scalar_lq(**overrides):
    data = dict(eigenvalues=[0.0], B=[[1.0]], C=[[[0.0]]], D=[[[0.0]]], sigma=[[0.3]], M=[[1.0]], R=[[1.0]],
                G=[[0.0]])
    data.update(overrides)
    return LQData(**data)


def test_riccati_zero_costs():
    """M = 0, G = 0: Pi = 0 and K = 0"""
    lq = _scalar_lq(M=[[0.0]])
    for scheme in ('discrete', 'continuous'):
        sol = riccati_solve(lq, 16, 1.0, scheme=scheme)
        assert np.allclose(sol.Pi, 0.0)
        assert np.allclose(sol.K, 0.0)


def test_riccati_scalar_closed_form():
    """A = 0, B = M = R = 1, G = 0, T = 1: Pi(t) = tanh(T - t)"""
    sol = riccati_solve(_scalar_lq(), 4096, 1.0, scheme='continuous')
    assert sol.Pi[0, 0, 0] == pytest.approx(np.tanh(1.0), abs=1e-6)
    assert np.allclose(sol.Pi[:, 0, 0], np.tanh(1.0 - sol.times), atol=1e-6)
    discrete = riccati_solve(_scalar_lq(), 4096, 1.0, scheme='discrete')
    assert discrete.Pi[0, 0, 0] == pytest.approx(np.tanh(1.0), abs=1e-3)


def test_riccati_ignores_additive_noise_in_gains():
    """C = D = 0: Pi does not depend on sigma"""
    noisy, quiet = _scalar_lq(sigma=[[0.8]]), _scalar_lq(sigma=[[0.0]])
    a = riccati_solve(noisy, 64, 1.0)
    b = riccati_solve(quiet, 64, 1.0)
    assert np.array_equal(a.Pi, b.Pi)
    assert a.c[0] > b.c[0]
    a = riccati_solve(noisy, 64, 1.0, scheme='continuous')
    b = riccati_solve(quiet, 64, 1.0, scheme='continuous')
    assert np.allclose(a.Pi, b.Pi, atol=1e-8)


def test_discrete_and_continuous_converge_with_multiplicative_noise():
    """Control-multiplicative noise: the gap between schemes shrinks with the grid"""
    lq = _scalar_lq(eigenvalues=[-1.0], C=[[[0.4]]], D=[[[0.3]]], G=[[1.0]])
    exact = riccati_solve(lq, 64, 1.0, scheme='continuous').Pi[0, 0, 0]
    coarse = abs(riccati_solve(lq, 64, 1.0).Pi[0, 0, 0] - exact)
    fine = abs(riccati_solve(lq, 256, 1.0).Pi[0, 0, 0] - exact)
    assert fine <= 0.5 * coarse


def test_riccati_solution_is_psd(multiplicative_spec):
    """Symmetric positive semidefinite Pi at every step"""
    sol = riccati_solve(lq_data_from_spec(multiplicative_spec), 32, 1.0)
    assert np.allclose(sol.Pi, np.swapaxes(sol.Pi, 1, 2))
    table = riccati_table(sol)
    assert list(table.columns) == ['step', 'time', 'trace_pi', 'min_eig_pi', 'c']
    assert len(table) == 33
    assert (table['min_eig_pi'] >= -1e-9).all()


def test_discrete_riccati_value_is_the_simulated_cost(additive_spec):
    """The discrete scheme is the exact optimum of the simulated problem"""
    lq = lq_data_from_spec(additive_spec)
    sol = riccati_solve(lq, 16, 1.0)
    noise = NoiseEnsemble.generate(4096, 16, 2, 1.0, master_seed=21)
    value, stderr = evaluate_cost(additive_spec, sol.feedback(), noise)
    assert abs(value - sol.value(additive_spec.x0)) <= 3 * stderr + 1e-9
    zero = FeedbackControl(lambda k, t, x: np.zeros((x.shape[0], 2)))
    other, _ = evaluate_cost(additive_spec, zero, noise)
    assert other > value


def test_projected_feedback_stays_in_set(additive_spec):
    """feedback(U) only returns admissible controls"""
    sol = riccati_solve(lq_data_from_spec(additive_spec), 8, 1.0)
    box = ControlSet.box([-0.1, -0.1], [0.1, 0.1])
    noise = NoiseEnsemble.generate(16, 8, 2, 1.0, master_seed=0)
    _, u = simulate_pair(additive_spec, sol.feedback(box), noise)
    assert np.abs(u.values).max() <= 0.1 + 1e-12


def test_lq_data_validation(make_spec):
    """Definiteness, symmetry and shapes are enforced"""
    with pytest.raises(RiccatiError):
        _scalar_lq(R=[[0.0]])
    with pytest.raises(RiccatiError):
        _scalar_lq(M=[[-1.0]])
    with pytest.raises(RiccatiError):
        LQData(eigenvalues=[0.0, 0.0], B=[[1.0], [0.0]], C=np.zeros((1, 2, 2)), D=np.zeros((1, 2, 1)),
               sigma=[[0.0], [0.0]], M=[[1.0, 1.0], [0.0, 1.0]], R=[[1.0]], G=np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        _scalar_lq(G=[[1.0, 0.0]])
    with pytest.raises(RiccatiError):
        lq_data_from_spec(make_spec('bilinear', 1, 1, 1, {}))


def test_riccati_solve_arguments():
    """Unknown schemes and empty grids are rejected"""
    with pytest.raises(VerificationError, match='discrete'):
        riccati_solve(_scalar_lq(), 8, 1.0, scheme='implicit')
    with pytest.raises(DimensionError):
        riccati_solve(_scalar_lq(), 0, 1.0)


def test_analytic_adjoint_trivial_cases(make_spec):
    """M = G = 0 gives P1 = 0; a zero path has P1 = 0 without linear terms"""
    spec = make_spec('lq', 2, 1, 1, {'B': [[1.0], [0.5]], 'sigma': [[0.2], [0.1]]}, x0=[1.0, -1.0])
    lq = lq_data_from_spec(spec)
    sol = riccati_solve(lq, 8, 1.0)
    noise = NoiseEnsemble.generate(8, 8, 1, 1.0, master_seed=0)
    x, u = simulate_pair(spec, sol.feedback(), noise)
    assert np.allclose(analytic_first_adjoint_lq(lq, sol, x, u).P1, 0.0)

    spec = make_spec('lq', 2, 1, 1, {'B': [[1.0], [0.5]], 'M': np.eye(2), 'G': np.eye(2)})
    lq = lq_data_from_spec(spec)
    sol = riccati_solve(lq, 8, 1.0)
    x, u = simulate_pair(spec, sol.feedback(), noise)
    assert np.allclose(analytic_first_adjoint_lq(lq, sol, x, u).P1, 0.0)
    with pytest.raises(DimensionError):
        analytic_first_adjoint_lq(lq, riccati_solve(lq, 4, 1.0), x, u)


def test_lyapunov_scalar_closed_form():
    """-P' = 2 lambda P + h, P(T) = g"""
    lam, h, g = -0.5, 2.0, 1.0
    times = np.linspace(0.0, 1.0, 11)
    P = lyapunov_solve([lam], [[0.0]], [[h]], [[g]], horizon=1.0, times=times)[:, 0, 0]
    decay = np.exp(2 * lam * (1.0 - times))
    assert np.allclose(P, g * decay + h * (decay - 1.0) / (2 * lam), atol=1e-9)
    with pytest.raises(DimensionError):
        lyapunov_solve([lam], [[0.0]], [[h]], [[g]], times=times[::-1])


def test_ou_moments():
    """Brownian limit and the stationary variance"""
    assert ou_moments(0.0, 2.0, 1.0, 3.0) == {'mean': 1.0, 'variance': 12.0}
    assert ou_moments(-1.0, 1.0, 0.0, 50.0)['variance'] == pytest.approx(0.5)


def test_finite_differences_vanish_for_zero_direction(additive_spec):
    """v = 0, h = 0: both quotients are 0"""
    noise = NoiseEnsemble.generate(32, 8, 2, 1.0, master_seed=0)
    sol = riccati_solve(lq_data_from_spec(additive_spec), 8, 1.0)
    out = finite_diff_expansion(additive_spec, sol.feedback(), np.zeros(2), np.zeros(2), 0.1, noise)
    assert out['first_quotient'] == 0.0
    assert out['second_quotient'] == 0.0


def test_lq_second_quotient_is_eps_independent(multiplicative_spec):
    """Quadratic cost in eps on common noise: exact Taylor expansion"""
    noise = NoiseEnsemble.generate(256, 16, 1, 1.0, master_seed=4)
    ubar = FeedbackControl(lambda k, t, x: -0.5 * x[:, :1])
    v = np.linspace(1.0, -1.0, 16)[:, None]
    a = finite_diff_expansion(multiplicative_spec, ubar, v, None, 0.2, noise)
    b = finite_diff_expansion(multiplicative_spec, ubar, v, None, 0.05, noise)
    assert a['second_quotient'] == pytest.approx(b['second_quotient'], rel=1e-6)
    assert a['dJ'] == pytest.approx(b['dJ'], rel=1e-6)
    second = second_difference(multiplicative_spec, ubar, v, 0.1, noise)
    assert second['value'] == pytest.approx(2.0 * a['second_quotient'], rel=1e-6)
    assert second['value'] > 0.0


def test_first_derivative_vanishes_at_riccati_optimum(additive_spec):
    """dJ(v) = 0 in the mean at the exact discrete optimum"""
    sol = riccati_solve(lq_data_from_spec(additive_spec), 16, 1.0)
    noise = NoiseEnsemble.generate(2048, 16, 2, 1.0, master_seed=13)
    v = np.random.default_rng(0).standard_normal((16, 2))
    out = finite_diff_expansion(additive_spec, sol.feedback(), v, None, 0.05, noise)
    assert abs(out['dJ']) <= 3 * out['dJ_stderr'] + 1e-9


def test_brute_force_cone_examples():
    """Interior points give zeros; the box exit is clamped exactly"""
    box = ControlSet.box([0.0, 0.0], [1.0, 1.0])
    table = brute_force_cone(box, [0.5, 0.5], [1.0, -1.0])
    assert list(table.columns) == ['eps', 'first', 'second']
    assert (table[['first', 'second']] == 0.0).all().all()
    table = brute_force_cone(box, [0.0, 0.5], [-1.0, 0.0])
    assert np.allclose(table['first'], 1.0)
    assert table.attrs['first_limit'] == pytest.approx(1.0)


def test_brute_force_polytope_matches_box():
    """A square polytope behaves like the box"""
    square = ControlSet.polytope(vertices=[[0, 0], [1, 0], [1, 1], [0, 1]])
    box = ControlSet.box([0.0, 0.0], [1.0, 1.0])
    rng = np.random.default_rng(3)
    for _ in range(10):
        u, v = np.array([1.0, rng.uniform()]), rng.standard_normal(2)
        a = brute_force_cone(square, u, v).attrs['first_limit']
        b = brute_force_cone(box, u, v).attrs['first_limit']
        assert a == pytest.approx(b, abs=1e-6)


if __name__ == '__main__':
    pytest.main([__file__])
