"""
Tests for the optimality-condition evaluators on certified optima and known violations
"""
import numpy as np
import pytest

from conftest import ADDITIVE_PARAMS, ADDITIVE_X0, _make_spec
from core.adjoint import solve_first_adjoint, solve_second_adjoint
from core.cones import ControlSet
from core.conditions import (TOL_CRIT, ConditionReport, critical_cone_residual, critical_direction,
                             descent_direction, expansion_bookkeeping, first_order_integral,
                             first_order_pointwise, hamiltonian, integral_verdict, maximum_principle_gap,
                             pointwise_second_gap, random_directions, s_operator, second_order_integral)
from core.families import CapabilityError
from core.forward import (FeedbackControl, NoiseEnsemble, OpenLoopControl, PerturbedControl,
                          simulate_first_variation, simulate_pair, simulate_second_variation)
from core.hilbert import HSOperator
from core.oracles import finite_diff_expansion, lq_data_from_spec, riccati_solve, second_difference


@pytest.fixture(scope='module')
def lq_optimum():
    """Additive-noise LQ problem at the discrete Riccati optimum, P=8192, N=16."""
    spec = _make_spec('lq', 4, 2, 2, ADDITIVE_PARAMS, x0=ADDITIVE_X0)
    noise = NoiseEnsemble.generate(8192, 16, 2, 1.0, master_seed=42)
    sol = riccati_solve(lq_data_from_spec(spec), 16, 1.0)
    x, u = simulate_pair(spec, sol.feedback(), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    adj2 = solve_second_adjoint(spec, x, u, adj, noise)
    return spec, noise, sol, x, u, adj, adj2


def _box_problem(value):
    """Scalar problem where H(w) = -w^2/2 + 2w does not depend on the adjoint."""
    spec = _make_spec('lq', 1, 1, 1, {'sigma': [[0.1]], 's': [-2.0]},
                      control_set=ControlSet.box([-0.5], [0.5]))
    noise = NoiseEnsemble.generate(64, 8, 1, 1.0, master_seed=0)
    x, u = simulate_pair(spec, OpenLoopControl(np.full((8, 1), value)), noise)
    return spec, noise, x, u, solve_first_adjoint(spec, x, u, noise)


def test_condition_report_validation():
    """Unknown verdicts and measures outside [0, 1] are rejected"""
    with pytest.raises(ValueError):
        ConditionReport('x', 'maybe')
    with pytest.raises(ValueError):
        ConditionReport('x', 'pass', violation_measure=1.5)
    report = ConditionReport('first_order_integral', 'pass', value=0.1, stderr=0.2, notes=('ok',))
    record = report.renamed('first_order_integral_1').to_record()
    assert record['id'] == 'first_order_integral_1'
    assert record['notes'] == ['ok']
    assert report.condition_id == 'first_order_integral'


def test_integral_verdict():
    """pass iff value <= 3 stderr"""
    assert integral_verdict(0.1, 0.05) == 'pass'
    assert integral_verdict(-4.0, 0.0) == 'pass'
    assert integral_verdict(1.0, 0.1) == 'violated'
    assert integral_verdict(0.0, float('nan')) == 'inconclusive'
    assert integral_verdict(0.0, 0.1, admissible=False) == 'inconclusive'


def test_hamiltonian_at_a_point(make_spec):
    """H = <v, a> + <w, b>_HS - f with hand-computed coefficients"""
    spec = make_spec('lq', 2, 1, 1, {'B': [[1.0], [2.0]], 'sigma': [[0.5], [0.0]], 'D': [[[1.0], [0.0]]],
                                     'M': np.eye(2), 'R': [[2.0]]})
    H, H_u = hamiltonian(spec, 0.0, [1.0, -1.0], [0.5], [0.3, 0.2], HSOperator(np.array([[1.0], [2.0]])))
    assert H == pytest.approx(0.1)
    assert np.allclose(H_u, [0.7])


def test_s_operator_for_additive_lq(additive_spec):
    """No mixed derivatives and no control noise: S = a_u^T P2"""
    rng = np.random.default_rng(0)
    P2 = rng.standard_normal((4, 4))
    out = s_operator(additive_spec, 0.0, rng.standard_normal(4), rng.standard_normal(2), rng.standard_normal(4),
                     rng.standard_normal((4, 2)), P2)
    assert out.shape == (2, 4)
    assert np.allclose(out, np.asarray(ADDITIVE_PARAMS['B']).T @ P2)


def _random_params(name, rng, n=3, m=2, d=2):
    """Full parameter set of a family with every nonlinear term switched on."""
    params = {'B': rng.standard_normal((n, d)), 'sigma': 0.3 * rng.standard_normal((n, m)),
              'M': np.eye(n), 'R': 2.0 * np.eye(d)}
    if name == 'lq':
        params.update(C=0.2 * rng.standard_normal((m, n, n)), D=0.2 * rng.standard_normal((m, n, d)),
                      q=rng.standard_normal(n), s=rng.standard_normal(d))
    elif name == 'bilinear':
        params.update(alpha=0.7, beta=0.5, W=rng.standard_normal((m, d)), gamma=0.3)
    return params


def _central_difference(fn, point, step):
    """Columns of central differences of fn along each coordinate of point."""
    columns = []
    for e in np.eye(point.size):
        columns.append((np.asarray(fn(point + step * e)) - np.asarray(fn(point - step * e))) / (2.0 * step))
    return np.stack(columns, axis=-1)


@pytest.mark.parametrize('name', ['lq', 'bilinear', 'saturated'])
def test_hamiltonian_gradient_matches_finite_differences(name):
    """H_u agrees with central differences of H on 100 random points"""
    rng = np.random.default_rng(11)
    spec = _make_spec(name, 3, 2, 2, _random_params(name, rng))
    for _ in range(100):
        x, u, v = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(3)
        w = rng.standard_normal((3, 2))
        _, H_u = hamiltonian(spec, 0.0, x, u, v, w)
        numeric = _central_difference(lambda z: hamiltonian(spec, 0.0, x, z, v, w)[0], u, 1e-5)
        assert np.max(np.abs(numeric - H_u)) <= 1e-6 * (1.0 + np.max(np.abs(H_u)))


def test_s_operator_for_bilinear_family():
    """S = H_xu^T + a_u^T P2 + sum_j b_u^{j,T} P2 b_x^j against finite differences of the coefficients"""
    rng = np.random.default_rng(12)
    spec = _make_spec('bilinear', 3, 2, 2, _random_params('bilinear', rng))

    def coefficient(key, x, u):
        return spec.family.evaluate(0.0, x[None], u[None], order=0)[key][0]

    for _ in range(10):
        x, u, p = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(3)
        q = rng.standard_normal((3, 2))
        P2 = rng.standard_normal((3, 3))
        P2 = P2 + P2.T
        H_ux = _central_difference(lambda z: hamiltonian(spec, 0.0, z, u, p, q)[1], x, 1e-5)
        a_u = _central_difference(lambda z: coefficient('a', x, z), u, 1e-5)
        b_u = _central_difference(lambda z: coefficient('b', x, z), u, 1e-5)
        b_x = _central_difference(lambda z: coefficient('b', z, u), x, 1e-5)
        noise_term = np.einsum('ijk,ir,rjl->kl', b_u, P2, b_x)
        assert np.max(np.abs(noise_term)) > 1e-3
        expected = H_ux + a_u.T @ P2 + noise_term
        out = s_operator(spec, 0.0, x, u, p, q, P2)
        assert out.shape == (2, 3)
        assert np.max(np.abs(out - expected)) <= 1e-6 * (1.0 + np.max(np.abs(expected)))


def test_first_order_conditions_at_optimum(lq_optimum):
    """Integral condition for five tangent directions, pointwise measure, maximum principle"""
    spec, noise, sol, x, u, adj, adj2 = lq_optimum
    for v in random_directions(spec, u, 5, seed=1):
        report = first_order_integral(spec, x, u, adj, v)
        assert report.verdict == 'pass'
        assert report.trace.shape == (16,)
    pointwise = first_order_pointwise(spec, x, u, adj)
    assert pointwise.violation_measure <= 0.05
    assert pointwise.residual_field.shape == (8192, 16)
    gap = maximum_principle_gap(spec, x, u, adj)
    assert gap.verdict == 'pass'
    assert gap.max <= 5e-2


def test_second_order_conditions_at_optimum(lq_optimum):
    """Second-order integral agrees with the common-noise second difference of J"""
    spec, noise, sol, x, u, adj, adj2 = lq_optimum
    assert pointwise_second_gap(spec, x, u, adj, adj2).verdict == 'pass'
    for v in random_directions(spec, u, 5, seed=2):
        v = critical_direction(spec, x, u, adj, v)
        y1 = simulate_first_variation(spec, x, u, v, noise)
        report = second_order_integral(spec, x, u, adj, adj2, v, np.zeros(2), y1)
        assert report.verdict == 'pass'
        assert report.value < 0.0
        oracle = second_difference(spec, sol.feedback(), v, 0.1, noise)
        band = max(0.05 * abs(oracle['value']), 3 * (report.stderr + oracle['stderr']))
        assert abs(report.value + oracle['value']) <= band


def test_second_order_integral_simulates_first_variation_when_omitted(multiplicative_spec):
    """Omitting y1 with the noise given gives the same value; omitting both is an error"""
    spec = multiplicative_spec
    noise = NoiseEnsemble.generate(128, 8, 1, 1.0, master_seed=9)
    x, u = simulate_pair(spec, FeedbackControl(lambda k, t, x: -0.5 * x[:, :1]), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    adj2 = solve_second_adjoint(spec, x, u, adj, noise)
    v = np.linspace(-1.0, 1.0, 8)[:, None]
    y1 = simulate_first_variation(spec, x, u, v, noise)
    given = second_order_integral(spec, x, u, adj, adj2, v, np.zeros(1), y1)
    simulated = second_order_integral(spec, x, u, adj, adj2, v, np.zeros(1), noise=noise)
    assert simulated.value == given.value
    assert simulated.stderr == given.stderr
    with pytest.raises(ValueError):
        second_order_integral(spec, x, u, adj, adj2, v, np.zeros(1))


def test_perturbed_control_violates_first_order(lq_optimum):
    """u* + 0.1 (1, 1): the descent direction shows up beyond 3 stderr"""
    spec, noise, sol, *_ = lq_optimum
    x, u = simulate_pair(spec, PerturbedControl(sol.feedback(), [0.1, 0.1]), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    v = descent_direction(spec, x, u, adj)
    report = first_order_integral(spec, x, u, adj, v)
    assert report.verdict == 'violated'
    assert report.value > 3 * report.stderr
    assert critical_cone_residual(spec, x, u, adj, v).verdict == 'violated'


def test_first_order_integral_is_minus_dJ(additive_spec):
    """Additive noise: the integral equals -dJ path by path"""
    noise = NoiseEnsemble.generate(128, 8, 2, 1.0, master_seed=3)
    control = FeedbackControl(lambda k, t, x: -0.3 * x[:, :2])
    x, u = simulate_pair(additive_spec, control, noise)
    adj = solve_first_adjoint(additive_spec, x, u, noise)
    v = np.random.default_rng(4).standard_normal((8, 2))
    report = first_order_integral(additive_spec, x, u, adj, v)
    fd = finite_diff_expansion(additive_spec, control, v, None, 0.1, noise)
    assert report.value == pytest.approx(-fd['dJ'], rel=1e-6, abs=1e-9)


def test_first_order_integral_is_linear_in_direction(multiplicative_spec):
    """value(a v1 + b v2) = a value(v1) + b value(v2) on common noise"""
    spec = multiplicative_spec
    noise = NoiseEnsemble.generate(128, 8, 1, 1.0, master_seed=6)
    x, u = simulate_pair(spec, FeedbackControl(lambda k, t, x: -0.5 * x[:, :1]), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    rng = np.random.default_rng(7)
    v1, v2 = rng.standard_normal((128, 8, 1)), rng.standard_normal((128, 8, 1))
    combined = first_order_integral(spec, x, u, adj, 2.0 * v1 - 0.5 * v2).value
    parts = 2.0 * first_order_integral(spec, x, u, adj, v1).value - 0.5 * first_order_integral(spec, x, u, adj, v2).value
    assert combined == pytest.approx(parts, rel=1e-9, abs=1e-12)


def test_pointwise_second_gap_vanishes_on_a_single_point_set(make_spec):
    """U = {u}: the only candidate is the reference control itself"""
    spec = make_spec('lq', 1, 1, 1, {'sigma': [[0.1]], 'D': [[[0.5]]], 's': [-2.0]},
                     control_set=ControlSet.finite([[0.3]]))
    noise = NoiseEnsemble.generate(32, 4, 1, 1.0, master_seed=0)
    x, u = simulate_pair(spec, OpenLoopControl(np.full((4, 1), 0.3)), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    adj2 = solve_second_adjoint(spec, x, u, adj, noise)
    report = pointwise_second_gap(spec, x, u, adj, adj2)
    assert report.verdict == 'pass'
    assert np.all(report.residual_field == 0.0)


def test_pointwise_second_gap_reduces_to_maximum_principle_without_control_noise():
    """b independent of u: the P2 term drops and both gaps coincide"""
    for value in (0.5, -0.5):
        spec, noise, x, u, adj = _box_problem(value)
        adj2 = solve_second_adjoint(spec, x, u, adj, noise)
        second = pointwise_second_gap(spec, x, u, adj, adj2)
        first = maximum_principle_gap(spec, x, u, adj)
        assert np.allclose(second.residual_field, first.residual_field, atol=1e-12)
        assert second.verdict == first.verdict


def test_expansion_bookkeeping_matches_finite_differences(multiplicative_spec):
    """J(u + e v) = J + e first + e^2/2 second exactly for LQ"""
    spec = multiplicative_spec
    noise = NoiseEnsemble.generate(256, 16, 1, 1.0, master_seed=5)
    x, u = simulate_pair(spec, OpenLoopControl(np.zeros((16, 1))), noise)
    v = np.linspace(-1.0, 1.0, 16)[:, None]
    h = np.zeros(1)
    y1 = simulate_first_variation(spec, x, u, v, noise)
    y2 = simulate_second_variation(spec, x, u, v, h, y1, noise)
    book = expansion_bookkeeping(spec, x, u, v, h, y1, y2)
    fd = finite_diff_expansion(spec, u, v, None, 0.1, noise)
    assert book['first'] == pytest.approx(fd['dJ'], rel=1e-6)
    assert book['second'] == pytest.approx(2.0 * fd['second_quotient'], rel=1e-6)


def test_box_constraint_pointwise_and_gap():
    """Saturated at the right bound the conditions hold; at the wrong bound they fail by a known gap"""
    spec, noise, x, u, adj = _box_problem(0.5)
    assert first_order_pointwise(spec, x, u, adj).verdict == 'pass'
    gap = maximum_principle_gap(spec, x, u, adj)
    assert gap.verdict == 'pass'
    assert gap.max == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(descent_direction(spec, x, u, adj), 0.0)

    spec, noise, x, u, adj = _box_problem(-0.5)
    pointwise = first_order_pointwise(spec, x, u, adj)
    assert pointwise.verdict == 'violated'
    assert pointwise.violation_measure == 1.0
    assert np.allclose(pointwise.residual_field, 2.5)
    gap = maximum_principle_gap(spec, x, u, adj)
    assert gap.verdict == 'violated'
    assert gap.max == pytest.approx(2.0, abs=1e-6)


def test_finite_set_gap_by_search(make_spec):
    """U = {-1, 0, 1} at u = 0: the best alternative is w = 1 with gain 3/2"""
    spec = make_spec('lq', 1, 1, 1, {'sigma': [[0.1]], 's': [-2.0]},
                     control_set=ControlSet.finite([[-1.0], [0.0], [1.0]]))
    noise = NoiseEnsemble.generate(16, 4, 1, 1.0, master_seed=0)
    x, u = simulate_pair(spec, OpenLoopControl(np.zeros((4, 1))), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    gap = maximum_principle_gap(spec, x, u, adj)
    assert np.allclose(gap.residual_field, 1.5)


def test_critical_direction_is_critical(lq_optimum):
    """Cells with |<H_u, v>| > TOL_CRIT are zeroed"""
    spec, noise, sol, *_ = lq_optimum
    x, u = simulate_pair(spec, PerturbedControl(sol.feedback(), [0.05, -0.05]), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    v = critical_direction(spec, x, u, adj, np.ones(2))
    report = critical_cone_residual(spec, x, u, adj, v)
    assert report.verdict == 'pass'
    assert report.max <= TOL_CRIT


def test_random_directions_are_tangent_and_normalized(make_spec):
    """Unit sample L2 norm when unconstrained; outward components removed at the bound"""
    spec = make_spec('lq', 1, 1, 2, {'sigma': [[0.1]]})
    noise = NoiseEnsemble.generate(4, 8, 1, 1.0, master_seed=0)
    x, u = simulate_pair(spec, OpenLoopControl(np.zeros((8, 2))), noise)
    directions = random_directions(spec, u, 3, seed=0)
    assert len(directions) == 3
    for v in directions:
        assert v.shape == (4, 8, 2)
        assert noise.dt * np.sum(v[0] ** 2) == pytest.approx(1.0)

    spec = make_spec('lq', 1, 1, 2, {'sigma': [[0.1]]}, control_set=ControlSet.box([0.0, 0.0], [1.0, 1.0]))
    x, u = simulate_pair(spec, OpenLoopControl(np.zeros((8, 2))), noise)
    for v in random_directions(spec, u, 3, seed=0):
        assert (v >= 0.0).all()


def test_capability_errors(make_spec):
    """No maximizer on an unbounded set without concavity; no second order for first-order families"""
    spec = make_spec('saturated', 1, 1, 1, {'B': [[1.0]], 'sigma': [[0.1]]})
    noise = NoiseEnsemble.generate(8, 4, 1, 1.0, master_seed=0)
    x, u = simulate_pair(spec, OpenLoopControl(np.zeros((4, 1))), noise)
    adj = solve_first_adjoint(spec, x, u, noise)
    with pytest.raises(CapabilityError):
        maximum_principle_gap(spec, x, u, adj)
    with pytest.raises(CapabilityError):
        s_operator(spec, 0.0, [0.0], [0.0], [0.0], [[0.0]], [[0.0]])


if __name__ == '__main__':
    pytest.main([__file__])
