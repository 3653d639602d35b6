"""
Optimality-condition evaluators. Every checker returns an immutable ConditionReport
with a per-(path, step) residual field where it applies, per-step traces and a verdict.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np

from core.adjoint import FirstAdjoint, SecondAdjoint, random_test_data, realize_Q2_action
from core.cones import (TOL_TANGENT, ControlSet, NotInSetError, NotTangentError, adjacent_cone_residual,
                        normal_cone_residual, project, sample, second_adjacent_residual, tangent_project)
from core.families import CapabilityError, hamiltonian_terms
from core.forward import (AdaptedField, NoiseEnsemble, ProblemSpec, as_control_field,
                          simulate_first_variation)
from core.hilbert import DimensionError, HSOperator

logger = logging.getLogger(__name__)

TOL_POINTWISE = 5e-2
MEASURE_TOL = 0.05
TOL_GAP = 5e-2
TOL_CRIT = 5e-2
STDERR_BAND = 3.0
ROUNDOFF = 1e-12

VERDICTS = ('pass', 'violated', 'inconclusive')

ASCENT_MAX_ITER = 2000
FRANK_WOLFE_ITER = 200
SEARCH_CANDIDATES = 64
SEARCH_ROUNDS = 12


@dataclass(frozen=True, eq=False)
class ConditionReport:
    condition_id: str
    verdict: str
    value: Optional[float] = None
    stderr: Optional[float] = None
    max: Optional[float] = None
    mean: Optional[float] = None
    violation_measure: Optional[float] = None
    trace: Optional[np.ndarray] = field(default=None, repr=False)
    residual_field: Optional[np.ndarray] = field(default=None, repr=False)
    notes: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}, got {self.verdict}")
        if self.violation_measure is not None and not 0.0 <= self.violation_measure <= 1.0:
            raise ValueError(f"violation measure out of [0, 1]: {self.violation_measure}")

    def renamed(self, condition_id: str) -> 'ConditionReport':
        return replace(self, condition_id=condition_id)

    def to_record(self) -> Dict:
        return {
            'id': self.condition_id,
            'value': self.value,
            'stderr': self.stderr,
            'max': self.max,
            'mean': self.mean,
            'violation_measure': self.violation_measure,
            'verdict': self.verdict,
            'notes': list(self.notes),
        }


def integral_verdict(value: float, stderr: float, admissible: bool = True) -> str:
    """pass iff value <= 3 stderr; inconclusive when the direction is inadmissible or stderr is not finite."""
    if not admissible or not np.isfinite(stderr) or not np.isfinite(value):
        return 'inconclusive'
    return 'pass' if value <= STDERR_BAND * stderr + ROUNDOFF else 'violated'


def _field_stats(residual: np.ndarray, tol: float) -> Dict[str, float]:
    return {
        'max': float(residual.max()) if residual.size else 0.0,
        'mean': float(residual.mean()) if residual.size else 0.0,
        'violation_measure': float(np.mean(residual > tol)) if residual.size else 0.0,
    }


def _path_stats(samples: np.ndarray) -> Tuple[float, float]:
    value = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    return value, stderr


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def hamiltonian(spec: ProblemSpec, t: float, x, u, v, w):
    """
    H = <v, a> + <w, b>_HS - f and its u-gradient a_u^T v + b_u^T w - f_u.
    Accepts a single point (vectors, w an HSOperator or n x m array) or path batches.
    """
    w = w.entries if isinstance(w, HSOperator) else np.asarray(w, dtype=float)
    x, u, v = (np.asarray(a, dtype=float) for a in (x, u, v))
    single = x.ndim == 1
    if single:
        x, u, v, w = x[None], u[None], v[None], w[None]
    if w.shape[1:] != (spec.n, spec.m):
        raise DimensionError(f"w must be {spec.n} x {spec.m}, got {w.shape[1:]}", module='conditions')
    co = spec.family.evaluate(t, x, u, order=1)
    terms = hamiltonian_terms(co, v, w, order=1)
    if single:
        return float(terms['H'][0]), terms['H_u'][0]
    return terms['H'], terms['H_u']


def _terms_at(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, k: int, dt: float, p, q, order: int):
    co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=order)
    return co, hamiltonian_terms(co, p, q, order=order)


def regressed_gradient(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint) -> np.ndarray:
    """H_u at (P1_pred, Q1) on every (path, step), shape (P, N, d)."""
    P, N = adj.P, adj.N
    out = np.empty((P, N, spec.d))
    for k in range(N):
        out[:, k] = _terms_at(spec, xbar, ubar, k, adj.dt, adj.P1_pred[:, k], adj.Q1[:, k], 1)[1]['H_u']
    return out


def s_operator(spec: ProblemSpec, t: float, x, u, P1_val, Q1_val, P2_val) -> np.ndarray:
    """
    d x n array H_xu^T + a_u^T P2 + sum_j b_u^{j,T} P2 b_x^j, so that <S y, v> is the
    mixed term of the second-order expansion. Single point or path batch.
    """
    x, u, p, q, p2 = (np.asarray(a, dtype=float) for a in (x, u, P1_val, Q1_val, P2_val))
    single = x.ndim == 1
    if single:
        x, u, p, q, p2 = x[None], u[None], p[None], q[None], p2[None]
    spec.family.require(2)
    co = spec.family.evaluate(t, x, u, order=2)
    terms = hamiltonian_terms(co, p, q, order=2)
    out = (np.swapaxes(terms['H_xu'], 1, 2)
           + np.einsum('pik,pil->pkl', co['a_u'], p2)
           + np.einsum('pijk,pir,prjl->pkl', co['b_u'], p2, co['b_x']))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# admissibility helpers
# ---------------------------------------------------------------------------

def _cells(values: np.ndarray) -> np.ndarray:
    return values.reshape(-1, values.shape[-1])


def _tangency(U: ControlSet, ubar: AdaptedField, v: np.ndarray) -> Tuple[bool, str]:
    try:
        residual = np.atleast_1d(adjacent_cone_residual(U, _cells(ubar.values), _cells(v)))
    except NotInSetError as exc:
        return False, f"control fuera de U: {exc}"
    scale = 1.0 + np.linalg.norm(_cells(v), axis=1)
    worst = float((residual / scale).max()) if residual.size else 0.0
    if worst > TOL_TANGENT:
        return False, f"dirección no tangente (residuo máx {worst:.2e})"
    return True, ''


def _second_admissibility(U: ControlSet, ubar: AdaptedField, v: np.ndarray, h: np.ndarray) -> Tuple[bool, str]:
    try:
        residual = np.atleast_1d(second_adjacent_residual(U, _cells(ubar.values), _cells(v), _cells(h)))
    except (NotInSetError, NotTangentError) as exc:
        return False, str(exc)
    worst = float(residual.max()) if residual.size else 0.0
    if worst > TOL_TANGENT * (1.0 + float(np.abs(h).max(initial=0.0))):
        return False, f"corrección de segundo orden no admisible (residuo máx {worst:.2e})"
    return True, ''


# ---------------------------------------------------------------------------
# first-order conditions
# ---------------------------------------------------------------------------

def first_order_integral(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                         v) -> ConditionReport:
    """
    E sum_k dt <H_u, v> with H_u from the pathwise adjoint values (Y, Z), so the
    standard error includes the martingale noise. pass iff value <= 3 stderr.
    """
    P, N, dt = adj.P, adj.N, adj.dt
    v = np.asarray(as_control_field(v, P, N, spec.d))
    per_step = np.empty((P, N))
    for k in range(N):
        grad = _terms_at(spec, xbar, ubar, k, dt, adj.Y[:, k], adj.Z[:, k], 1)[1]['H_u']
        per_step[:, k] = np.einsum('pk,pk->p', grad, v[:, k]) * dt
    value, stderr = _path_stats(per_step.sum(axis=1))
    admissible, note = _tangency(spec.control_set, ubar, v)
    if not admissible:
        logger.warning(f"Condición integral de primer orden: {note}")
    verdict = integral_verdict(value, stderr, admissible)
    logger.info(f"Condición integral de primer orden: valor={value:.4e} ± {stderr:.2e} -> {verdict}")
    return ConditionReport('first_order_integral', verdict, value=value, stderr=stderr,
                           trace=per_step.mean(axis=0) / dt, notes=(note,) if note else ())


def first_order_pointwise(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField,
                          adj: FirstAdjoint) -> ConditionReport:
    """Residual field normal_cone_residual(U, u, H_u) with H_u at (P1_pred, Q1)."""
    grad = regressed_gradient(spec, xbar, ubar, adj)
    residual = np.atleast_1d(normal_cone_residual(spec.control_set, _cells(ubar.values), _cells(grad)))
    residual = residual.reshape(adj.P, adj.N)
    stats = _field_stats(residual, TOL_POINTWISE)
    verdict = 'pass' if stats['violation_measure'] <= MEASURE_TOL else 'violated'
    logger.info(f"Condición puntual de primer orden: medida de violación={stats['violation_measure']:.3f} "
                f"-> {verdict}")
    return ConditionReport('first_order_pointwise', verdict, trace=residual.mean(axis=0),
                           residual_field=residual, **stats)


def critical_cone_residual(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                           v) -> ConditionReport:
    """|<H_u, v>| per (path, step); v is critical iff the max is <= TOL_CRIT."""
    grad = regressed_gradient(spec, xbar, ubar, adj)
    v = as_control_field(v, adj.P, adj.N, spec.d)
    residual = np.abs(np.einsum('pkd,pkd->pk', grad, v))
    stats = _field_stats(residual, TOL_CRIT)
    verdict = 'pass' if stats['max'] <= TOL_CRIT else 'violated'
    return ConditionReport('critical_cone', verdict, trace=residual.mean(axis=0), residual_field=residual,
                           **stats)


# ---------------------------------------------------------------------------
# maximization of the Hamiltonian over U
# ---------------------------------------------------------------------------

def _quadratic_value(g: np.ndarray, hess: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.einsum('pk,pk->p', g, delta) + 0.5 * np.einsum('pk,pkl,pl->p', delta, hess, delta)


def _is_unconstrained(U: ControlSet) -> bool:
    return U.family == 'box' and not np.any(np.isfinite(U.params['lower'])) \
        and not np.any(np.isfinite(U.params['upper']))


def _projected_ascent(U: ControlSet, u: np.ndarray, g: np.ndarray, hess: np.ndarray,
                      lipschitz: np.ndarray) -> np.ndarray:
    """Accelerated projected gradient ascent of the concave quadratic model, all cells at once."""
    step = 1.0 / np.maximum(lipschitz, 1e-8)[:, None]
    w = u.copy()
    y = u.copy()
    t = 1.0
    for _ in range(ASCENT_MAX_ITER):
        grad = g + np.einsum('pkl,pl->pk', hess, y - u)
        w_new = project(U, y + step * grad)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        moved = np.abs(w_new - w).max()
        w, t = w_new, t_new
        if moved < 1e-13:
            break
    return w - u


def _frank_wolfe(vertices: np.ndarray, u: np.ndarray, g: np.ndarray, hess: np.ndarray) -> np.ndarray:
    w = u.copy()
    for _ in range(FRANK_WOLFE_ITER):
        grad = g + np.einsum('pkl,pl->pk', hess, w - u)
        target = vertices[np.argmax(grad @ vertices.T, axis=1)]
        direction = target - w
        slope = np.einsum('pk,pk->p', grad, direction)
        if slope.max(initial=0.0) < 1e-12:
            break
        curvature = -np.einsum('pk,pkl,pl->p', direction, hess, direction)
        with np.errstate(divide='ignore', invalid='ignore'):
            gamma = np.where(curvature > 0, slope / curvature, 1.0)
        gamma = np.clip(gamma, 0.0, 1.0)
        w = w + gamma[:, None] * direction
    return w - u


def _quadratic_gap(U: ControlSet, u: np.ndarray, g: np.ndarray, hess: np.ndarray) -> Optional[np.ndarray]:
    """Exact maximum of g.delta + 1/2 delta'H delta over u + delta in U; None when the model is not concave."""
    eig = np.linalg.eigvalsh(-0.5 * (hess + np.swapaxes(hess, 1, 2)))
    concave = eig.min(axis=1) >= -1e-12
    strict = eig.min(axis=1) > 1e-12
    if _is_unconstrained(U):
        if not np.all(strict):
            raise CapabilityError("U no acotado y Hamiltoniano no estrictamente cóncavo en u: "
                                  "sin maximizador analítico", module='conditions')
        delta = np.linalg.solve(-hess, g[..., None])[..., 0]
        return np.maximum(0.0, 0.5 * np.einsum('pk,pk->p', g, delta))
    if not np.all(concave):
        return None
    if not U.is_compact and not np.all(strict):
        raise CapabilityError(f"conjunto {U.family} no acotado y Hamiltoniano no estrictamente cóncavo",
                              module='conditions')
    if U.family == 'polytope':
        if U.params['vertices'] is None:
            raise CapabilityError("politopo no acotado: sin maximizador", module='conditions')
        delta = _frank_wolfe(U.params['vertices'], u, g, hess)
    else:
        delta = _projected_ascent(U, u, g, hess, eig.max(axis=1))
    return np.maximum(0.0, _quadratic_value(g, hess, delta))


def _canonical_candidates(U: ControlSet) -> np.ndarray:
    """Deterministic candidate list; ties in the search go to the earliest entry."""
    p = U.params
    rng = np.random.default_rng(0)
    if U.family == 'finite':
        return p['points']
    if U.family == 'box':
        lo, up = p['lower'], p['upper']
        corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(lo, up)], indexing='ij')).reshape(U.d, -1).T
        heads = [0.5 * (lo + up)[None], corners] if U.d <= 8 else [0.5 * (lo + up)[None]]
    elif U.family == 'ball':
        eye = np.eye(U.d) * p['radius']
        heads = [p['center'][None], p['center'] + eye, p['center'] - eye]
    elif U.family == 'polytope':
        heads = [p['vertices']]
    else:
        heads = []
    return np.concatenate(heads + [sample(U, SEARCH_CANDIDATES, rng)], axis=0)


def _search_gap(U: ControlSet, u: np.ndarray, exact) -> np.ndarray:
    """
    Grid search over canonical candidates, then a coordinate ladder refinement
    for boxes and balls. `exact(w)` returns the increment at w for every cell.
    """
    if not U.is_compact:
        raise CapabilityError(f"conjunto {U.family} no compacto y Hamiltoniano no cuadrático en u: "
                              "sin maximizador", module='conditions')
    candidates = _canonical_candidates(U)
    cells = u.shape[0]
    best_val = np.zeros(cells)
    best = u.copy()
    for point in candidates:
        w = np.broadcast_to(point, u.shape)
        val = exact(w)
        better = val > best_val
        best_val = np.where(better, val, best_val)
        best = np.where(better[:, None], w, best)
    if U.family == 'finite':
        return np.maximum(0.0, best_val)
    if U.family in ('box', 'ball'):
        span = candidates.max(axis=0) - candidates.min(axis=0)
        step = 0.25 * float(span.max(initial=0.0))
        for _ in range(SEARCH_ROUNDS):
            for i in range(U.d):
                for sign in (1.0, -1.0):
                    trial = best.copy()
                    trial[:, i] += sign * step
                    trial = project(U, trial)
                    val = exact(trial)
                    better = val > best_val
                    best_val = np.where(better, val, best_val)
                    best = np.where(better[:, None], trial, best)
            step *= 0.5
    return np.maximum(0.0, best_val)


def _gap_report(condition_id: str, spec: ProblemSpec, gap: np.ndarray, notes: List[str]) -> ConditionReport:
    stats = _field_stats(gap, TOL_GAP)
    verdict = 'pass' if stats['max'] <= TOL_GAP else 'violated'
    if not spec.family.affine_in_control:
        notes = notes + [f"la familia '{spec.family.name}' no declara coeficientes afines en u"]
    logger.info(f"{condition_id}: brecha máx={stats['max']:.4e} -> {verdict}")
    return ConditionReport(condition_id, verdict, value=stats['max'], trace=gap.mean(axis=0),
                           residual_field=gap, notes=tuple(notes), **stats)


def _increment_fn(spec: ProblemSpec, t: float, x: np.ndarray, u: np.ndarray, p: np.ndarray, q: np.ndarray,
                  p2: Optional[np.ndarray]):
    """w -> H(w) - H(u) (+ 1/2 <p2 db, db>_HS when p2 is given), exact family evaluation."""
    base_co = spec.family.evaluate(t, x, u, order=0)
    base_h = hamiltonian_terms(base_co, p, q, order=0)['H']

    def exact(w: np.ndarray) -> np.ndarray:
        co = spec.family.evaluate(t, x, np.ascontiguousarray(w), order=0)
        value = hamiltonian_terms(co, p, q, order=0)['H'] - base_h
        if p2 is not None:
            db = co['b'] - base_co['b']
            value = value + 0.5 * np.einsum('pij,pil,plj->p', db, p2, db)
        return value

    return exact


def _max_gap(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
             adj2: Optional[SecondAdjoint]) -> np.ndarray:
    U = spec.control_set
    P, N, dt = adj.P, adj.N, adj.dt
    quadratic = spec.family.quadratic_in_u and spec.family.derivative_order >= 2 and U.family != 'finite'
    gap = np.empty((P, N))
    for k in range(N):
        x_k, u_k = xbar.values[:, k], ubar.values[:, k]
        p, q = adj.P1_pred[:, k], adj.Q1[:, k]
        p2 = adj2.P2_pred[:, k] if adj2 is not None else None
        result = None
        if quadratic:
            co, terms = _terms_at(spec, xbar, ubar, k, dt, p, q, 2)
            hess = terms['H_uu']
            if p2 is not None:
                hess = hess + np.einsum('pijk,pil,pljr->pkr', co['b_u'], p2, co['b_u'])
            result = _quadratic_gap(U, u_k, terms['H_u'], hess)
        if result is None:
            result = _search_gap(U, u_k, _increment_fn(spec, k * dt, x_k, u_k, p, q, p2))
        gap[:, k] = result
    return gap


def maximum_principle_gap(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField,
                          adj: FirstAdjoint) -> ConditionReport:
    """
    sup_{w in U} H(t, x, w, P1, Q1) - H(t, x, u, P1, Q1) per (path, step), in closed form
    for Hamiltonians concave-quadratic in u, by candidate search otherwise.
    """
    return _gap_report('maximum_principle_gap', spec, _max_gap(spec, xbar, ubar, adj, None), [])


def pointwise_second_gap(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                         adj2: SecondAdjoint) -> ConditionReport:
    """
    max over w in U of <P1, da> + <Q1, db>_HS - df + 1/2 <P2 db, db>_HS, with
    d(phi) = phi(t, x, w) - phi(t, x, u). Quadratic families with b affine in u use the
    Hessian H_uu + sum_j b_u^{j,T} P2 b_u^j.
    """
    return _gap_report('pointwise_second_gap', spec, _max_gap(spec, xbar, ubar, adj, adj2), [])


# ---------------------------------------------------------------------------
# second-order conditions
# ---------------------------------------------------------------------------

def second_order_integral(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                          adj2: SecondAdjoint, v, h, y1: Optional[AdaptedField] = None,
                          noise: Optional[NoiseEnsemble] = None) -> ConditionReport:
    """
    E sum_k dt of
        2<H_u, h> + 2<S y1, v> + <H_uu v, v> + sum_j <P2 b_u v, b_u v> + 2 sum_j <Q2_j y1, b_u^j v>
        + dt [2 <P2 a_u v, a_x y1> + <P2 a_u v, a_u v> + 2 sum_j <Q2_j b_u^j v, a_x y1>
              + 2 sum_j <Q2_j a_u v, b_x^j y1 + b_u^j v>]
    with P2 = P2_pred and H derivatives at (P1_pred, Q1). The dt-bracket makes the value
    the exact second derivative -d^2/de^2 J(u + e v + e^2 h) of the time-discrete problem.
    pass iff value <= 3 stderr; inconclusive when v is not critical or (v, h) is not admissible.
    y1 must be the first variation along v on the same noise; when omitted it is simulated
    from `noise`.
    """
    spec.family.require(2)
    P, N, dt = adj.P, adj.N, adj.dt
    v = np.asarray(as_control_field(v, P, N, spec.d))
    h = np.asarray(as_control_field(h, P, N, spec.d))
    if y1 is None:
        if noise is None:
            raise ValueError("second_order_integral necesita y1 o el ensamble de ruido para simularla")
        y1 = simulate_first_variation(spec, xbar, ubar, v, noise)
    q2_y1 = realize_Q2_action(adj2, y1)
    per_step = np.empty((P, N))
    for k in range(N):
        p, q = adj.P1_pred[:, k], adj.Q1[:, k]
        co, terms = _terms_at(spec, xbar, ubar, k, dt, p, q, 2)
        p2, q2 = adj2.P2_pred[:, k], adj2.Q2[:, k]
        y, vk = y1.values[:, k], v[:, k]
        path_grad = _terms_at(spec, xbar, ubar, k, dt, adj.Y[:, k], adj.Z[:, k], 1)[1]['H_u']
        s_op = (np.swapaxes(terms['H_xu'], 1, 2)
                + np.einsum('pik,pil->pkl', co['a_u'], p2)
                + np.einsum('pijk,pir,prjl->pkl', co['b_u'], p2, co['b_x']))
        au_v = np.einsum('pik,pk->pi', co['a_u'], vk)
        bu_v = np.einsum('pijk,pk->pij', co['b_u'], vk)
        ax_y = np.einsum('pik,pk->pi', co['a_x'], y)
        beta = np.einsum('pijk,pk->pij', co['b_x'], y) + bu_v
        value = (2.0 * np.einsum('pk,pk->p', path_grad, h[:, k])
                 + 2.0 * np.einsum('pkl,pl,pk->p', s_op, y, vk)
                 + np.einsum('pkl,pk,pl->p', terms['H_uu'], vk, vk)
                 + np.einsum('pil,plj,pij->p', p2, bu_v, bu_v)
                 + 2.0 * np.einsum('pij,pij->p', q2_y1[:, k], bu_v))
        correction = (2.0 * np.einsum('pil,pl,pi->p', p2, au_v, ax_y)
                      + np.einsum('pil,pl,pi->p', p2, au_v, au_v)
                      + 2.0 * np.einsum('pjil,plj,pi->p', q2, bu_v, ax_y)
                      + 2.0 * np.einsum('pjil,pl,pij->p', q2, au_v, beta))
        per_step[:, k] = dt * (value + dt * correction)
    value, stderr = _path_stats(per_step.sum(axis=1))

    notes = []
    critical = critical_cone_residual(spec, xbar, ubar, adj, v)
    if critical.verdict != 'pass':
        notes.append(f"v no es crítica (máx |<H_u, v>| = {critical.max:.2e})")
    admissible, note = _second_admissibility(spec.control_set, ubar, v, h)
    if not admissible:
        notes.append(note)
    for note in notes:
        logger.warning(f"Condición integral de segundo orden: {note}")
    verdict = integral_verdict(value, stderr, not notes)
    logger.info(f"Condición integral de segundo orden: valor={value:.4e} ± {stderr:.2e} -> {verdict}")
    return ConditionReport('second_order_integral', verdict, value=value, stderr=stderr,
                           trace=per_step.mean(axis=0) / dt, notes=tuple(notes))


def expansion_bookkeeping(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, v, h,
                          y1: AdaptedField, y2: AdaptedField) -> Dict[str, float]:
    """
    Coefficients of J(u + e v + e^2 h) = J(u) + e first + e^2/2 second + o(e^2), assembled
    from the variational processes on common noise:
        first  = E[sum dt (f_x y1 + f_u v) + g_x y1]
        second = E[sum dt (f_x y2 + 2 f_u h + y1'f_xx y1 + 2 y1'f_xu v + v'f_uu v) + g_x y2 + y1'g_xx y1]
    """
    spec.family.require(2)
    P, N = y1.values.shape[0], y1.values.shape[1] - 1
    dt = spec.horizon / N
    v = as_control_field(v, P, N, spec.d)
    h = as_control_field(h, P, N, spec.d)
    first = np.zeros(P)
    second = np.zeros(P)
    for k in range(N):
        co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=2)
        a, b, vk = y1.values[:, k], y2.values[:, k], v[:, k]
        first += dt * (np.einsum('pi,pi->p', co['f_x'], a) + np.einsum('pk,pk->p', co['f_u'], vk))
        second += dt * (np.einsum('pi,pi->p', co['f_x'], b)
                        + 2.0 * np.einsum('pk,pk->p', co['f_u'], h[:, k])
                        + np.einsum('pi,pij,pj->p', a, co['f_xx'], a)
                        + 2.0 * np.einsum('pi,pik,pk->p', a, co['f_xu'], vk)
                        + np.einsum('pk,pkl,pl->p', vk, co['f_uu'], vk))
    term = spec.family.terminal(xbar.values[:, N], order=2)
    a, b = y1.values[:, N], y2.values[:, N]
    first += np.einsum('pi,pi->p', term['g_x'], a)
    second += np.einsum('pi,pi->p', term['g_x'], b) + np.einsum('pi,pij,pj->p', a, term['g_xx'], a)
    first_value, first_err = _path_stats(first)
    second_value, second_err = _path_stats(second)
    return {'first': first_value, 'first_stderr': first_err,
            'second': second_value, 'second_stderr': second_err}


# ---------------------------------------------------------------------------
# test directions
# ---------------------------------------------------------------------------

def random_directions(spec: ProblemSpec, ubar: AdaptedField, count: int, seed: int) -> List[np.ndarray]:
    """
    Piecewise-constant Gaussian directions (unit sample L2 norm), projected onto the
    adjacent cone of U at u on every (path, step).
    """
    rng = np.random.default_rng(seed)
    P, N, d = ubar.values.shape
    dt = spec.horizon / N
    out = []
    for _ in range(int(count)):
        table = random_test_data(rng, N, (d,), dt)
        field = np.broadcast_to(table, (P, N, d))
        projected = tangent_project(spec.control_set, _cells(ubar.values), _cells(np.ascontiguousarray(field)))
        out.append(np.asarray(projected).reshape(P, N, d))
    return out


def descent_direction(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint) -> np.ndarray:
    """Projection of H_u (the direction that decreases the cost) onto the adjacent cone at u."""
    grad = regressed_gradient(spec, xbar, ubar, adj)
    projected = tangent_project(spec.control_set, _cells(ubar.values), _cells(grad))
    return np.asarray(projected).reshape(grad.shape)


def critical_direction(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                       v) -> np.ndarray:
    """v with the cells where |<H_u, v>| exceeds TOL_CRIT set to zero."""
    grad = regressed_gradient(spec, xbar, ubar, adj)
    v = np.array(as_control_field(v, adj.P, adj.N, spec.d))
    v[np.abs(np.einsum('pkd,pkd->pk', grad, v)) > TOL_CRIT] = 0.0
    return v
