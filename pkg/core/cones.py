"""
Control constraint sets and their adjacent, normal and second-order adjacent cones
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np
from scipy.optimize import linprog, minimize, nnls
from scipy.spatial import ConvexHull, HalfspaceIntersection

from core.hilbert import DimensionError, VerificationError

logger = logging.getLogger(__name__)

TOL_MEMBERSHIP = 1e-9
TOL_TANGENT = 1e-9
EPS_LADDER = 2.0 ** -np.arange(3, 13)

SET_FAMILIES = ('box', 'ball', 'halfspace', 'polytope', 'finite')


class NotInSetError(VerificationError):
    module = 'cones'


class NotTangentError(VerificationError):
    module = 'cones'


@dataclass(frozen=True, eq=False)
class ControlSet:
    """
    Closed nonempty U in R^d. Build through the classmethods, which check
    nonemptiness and normalize the parameters of each family.
    """
    family: str
    d: int
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def box(cls, lower, upper) -> 'ControlSet':
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise DimensionError("box bounds must have the same length", module='cones')
        if np.any(lower > upper) or np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise VerificationError("empty box: lower > upper", module='cones')
        return cls('box', lower.size, {'lower': lower, 'upper': upper})

    @classmethod
    def unconstrained(cls, d: int) -> 'ControlSet':
        return cls.box(np.full(d, -np.inf), np.full(d, np.inf))

    @classmethod
    def ball(cls, center, radius: float) -> 'ControlSet':
        center = np.asarray(center, dtype=float).ravel()
        if not radius > 0:
            raise VerificationError("ball radius must be positive (use 'finite' for singletons)",
                                    module='cones')
        return cls('ball', center.size, {'center': center, 'radius': np.float64(radius)})

    @classmethod
    def halfspace(cls, normal, offset: float) -> 'ControlSet':
        """{y : <normal, y> <= offset}"""
        normal = np.asarray(normal, dtype=float).ravel()
        scale = np.linalg.norm(normal)
        if scale == 0:
            raise VerificationError("halfspace normal must be nonzero", module='cones')
        return cls('halfspace', normal.size,
                   {'normal': normal / scale, 'offset': np.float64(offset / scale)})

    @classmethod
    def polytope(cls, G=None, h=None, vertices=None) -> 'ControlSet':
        """Convex polytope given as {y : G y <= h} or as the hull of `vertices`."""
        if vertices is not None:
            V = np.atleast_2d(np.asarray(vertices, dtype=float))
            d = V.shape[1]
            if d == 1:
                G = np.array([[1.0], [-1.0]])
                h = np.array([V.max(), -V.min()])
            else:
                hull = ConvexHull(V)
                G = hull.equations[:, :-1]
                h = -hull.equations[:, -1]
            G, h = _unique_rows(G, h)
            extreme = _polytope_vertices(G, h)
            return cls('polytope', d, {'G': G, 'h': h, 'vertices': extreme})
        G = np.atleast_2d(np.asarray(G, dtype=float))
        h = np.asarray(h, dtype=float).ravel()
        if G.shape[0] != h.size:
            raise DimensionError("polytope G and h disagree in row count", module='cones')
        norms = np.linalg.norm(G, axis=1)
        if np.any(norms == 0):
            raise VerificationError("polytope rows must be nonzero", module='cones')
        G, h = _unique_rows(G / norms[:, None], h / norms)
        feasible = linprog(np.zeros(G.shape[1]), A_ub=G, b_ub=h, bounds=[(None, None)] * G.shape[1])
        if feasible.status != 0:
            raise VerificationError("empty polytope", module='cones')
        return cls('polytope', G.shape[1], {'G': G, 'h': h, 'vertices': _polytope_vertices(G, h)})

    @classmethod
    def finite(cls, points) -> 'ControlSet':
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            raise VerificationError("finite set needs at least one point", module='cones')
        return cls('finite', pts.shape[1], {'points': pts})

    @property
    def is_compact(self) -> bool:
        if self.family == 'box':
            return bool(np.all(np.isfinite(self.params['lower'])) and np.all(np.isfinite(self.params['upper'])))
        if self.family == 'polytope':
            return self.params['vertices'] is not None
        return self.family in ('ball', 'finite')

    @property
    def is_convex(self) -> bool:
        return self.family != 'finite' or self.params['points'].shape[0] == 1

    def describe(self) -> Dict:
        out = {'family': self.family, 'd': self.d}
        for key, value in self.params.items():
            if value is not None:
                out[key] = np.asarray(value).tolist()
        return out


def _unique_rows(G: np.ndarray, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    key = np.round(np.hstack([G, h[:, None]]), 12)
    _, idx = np.unique(key, axis=0, return_index=True)
    idx = np.sort(idx)
    return G[idx], h[idx]


def _polytope_vertices(G: np.ndarray, h: np.ndarray) -> Optional[np.ndarray]:
    """Extreme points of a bounded polytope, None when unbounded."""
    d = G.shape[1]
    for i in range(d):
        for sign in (1.0, -1.0):
            c = np.zeros(d)
            c[i] = -sign
            res = linprog(c, A_ub=G, b_ub=h, bounds=[(None, None)] * d)
            if res.status == 3:
                return None
    if d == 1:
        lo = max((h[i] / G[i, 0] for i in range(len(h)) if G[i, 0] < 0), default=-np.inf)
        hi = min((h[i] / G[i, 0] for i in range(len(h)) if G[i, 0] > 0), default=np.inf)
        return np.array([[lo], [hi]])
    # Chebyshev center as interior point
    c = np.zeros(d + 1)
    c[-1] = -1.0
    A = np.hstack([G, np.ones((G.shape[0], 1))])
    res = linprog(c, A_ub=A, b_ub=h, bounds=[(None, None)] * d + [(0, None)])
    center = res.x[:d]
    if res.x[-1] <= 1e-12:
        # flat polytope: fall back to the feasible point itself
        return center[None, :]
    hs = HalfspaceIntersection(np.hstack([G, -h[:, None]]), center)
    pts = hs.intersections
    key = np.round(pts, 10)
    _, idx = np.unique(key, axis=0, return_index=True)
    return pts[np.sort(idx)]


def control_set_from_descriptor(desc: Dict, d: int) -> ControlSet:
    """Build a ControlSet from its declarative scenario form."""
    family = desc.get('family', 'unconstrained')
    if family == 'unconstrained':
        return ControlSet.unconstrained(d)
    if family == 'box':
        lower = [(-np.inf if v is None else v) for v in desc.get('lower', [None] * d)]
        upper = [(np.inf if v is None else v) for v in desc.get('upper', [None] * d)]
        return ControlSet.box(lower, upper)
    if family == 'ball':
        return ControlSet.ball(desc.get('center', [0.0] * d), desc['radius'])
    if family == 'halfspace':
        return ControlSet.halfspace(desc['normal'], desc['offset'])
    if family == 'polytope':
        if 'vertices' in desc:
            return ControlSet.polytope(vertices=desc['vertices'])
        return ControlSet.polytope(G=desc['G'], h=desc['h'])
    if family == 'finite':
        return ControlSet.finite(desc['points'])
    raise VerificationError(
        f"conjunto de control desconocido '{family}'; válidos: unconstrained, {', '.join(SET_FAMILIES)}",
        module='cones')


def check_descriptor(desc: Dict, d: int) -> List[str]:
    """Collect every problem in a control-set descriptor without raising."""
    errors = []
    try:
        U = control_set_from_descriptor(desc, d)
        if U.d != d:
            errors.append(f"control_set tiene dimensión {U.d}, se esperaba d={d}")
    except KeyError as e:
        errors.append(f"control_set: falta la clave {e}")
    except (VerificationError, ValueError, TypeError) as e:
        errors.append(f"control_set: {e}")
    return errors


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _as_batch(*arrays, d: int):
    single = np.asarray(arrays[0]).ndim == 1
    out = []
    for arr in arrays:
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        if arr.shape[-1] != d:
            raise DimensionError(f"control vectors of length {d} expected, got shape {arr.shape}",
                                 module='cones')
        out.append(arr)
    return single, out


def _finish(single: bool, values: np.ndarray):
    return float(values[0]) if single else values


def _project_polytope_point(G: np.ndarray, h: np.ndarray, u: np.ndarray) -> np.ndarray:
    if np.max(G @ u - h) <= 0:
        return u.copy()
    res = minimize(lambda y: 0.5 * np.dot(y - u, y - u), u, jac=lambda y: y - u,
                   constraints=[{'type': 'ineq', 'fun': lambda y: h - G @ y, 'jac': lambda y: -G}],
                   method='SLSQP', options={'ftol': 1e-15, 'maxiter': 500})
    y = res.x
    # KKT polish on the active set found by SLSQP
    active = G @ y >= h - 1e-7
    if np.any(active):
        GA, hA = G[active], h[active]
        mu, *_ = np.linalg.lstsq(GA @ GA.T, GA @ u - hA, rcond=None)
        polished = u - GA.T @ mu
        if np.all(mu >= -1e-10) and np.max(G @ polished - h) <= 1e-10:
            y = polished
    return y


def project(U: ControlSet, u):
    """Nearest point of U to u; ties in `finite` go to the lexicographically smallest point."""
    single, (u,) = _as_batch(u, d=U.d)
    p = U.params
    if U.family == 'box':
        out = np.clip(u, p['lower'], p['upper'])
    elif U.family == 'ball':
        diff = u - p['center']
        dist = np.linalg.norm(diff, axis=1)
        scale = np.minimum(1.0, p['radius'] / np.maximum(dist, 1e-300))
        out = p['center'] + diff * scale[:, None]
    elif U.family == 'halfspace':
        excess = np.maximum(0.0, u @ p['normal'] - p['offset'])
        out = u - excess[:, None] * p['normal']
    elif U.family == 'polytope':
        out = np.array([_project_polytope_point(p['G'], p['h'], row) for row in u])
    elif U.family == 'finite':
        pts = p['points']
        dists = np.linalg.norm(u[:, None, :] - pts[None], axis=2)
        best = dists.min(axis=1, keepdims=True)
        tied = dists <= best + 1e-12
        order = np.lexsort(pts.T[::-1])
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        choice = np.argmin(np.where(tied, rank[None, :], len(order)), axis=1)
        out = pts[choice]
    else:
        raise VerificationError(f"unknown set family {U.family}", module='cones')
    return out[0] if single else out


def distance(U: ControlSet, u):
    single, (u,) = _as_batch(u, d=U.d)
    return _finish(single, np.linalg.norm(u - project(U, u), axis=1))


def _check_membership(U: ControlSet, u: np.ndarray):
    if U.family == 'polytope':
        gap = np.max(u @ U.params['G'].T - U.params['h'], axis=1)
    else:
        gap = np.linalg.norm(u - project(U, u), axis=1)
    bad = np.flatnonzero(gap > TOL_MEMBERSHIP)
    if bad.size:
        raise NotInSetError(f"{bad.size} control(s) outside U (worst distance {gap[bad].max():.3e}, "
                            f"first index {bad[0]})")


# ---------------------------------------------------------------------------
# cones
# ---------------------------------------------------------------------------

def _box_active(U: ControlSet, u: np.ndarray):
    lo, up = U.params['lower'], U.params['upper']
    return (np.isfinite(lo) & (u - lo <= TOL_MEMBERSHIP)), (np.isfinite(up) & (up - u <= TOL_MEMBERSHIP))


def _ball_normal(U: ControlSet, u: np.ndarray):
    diff = u - U.params['center']
    active = np.linalg.norm(diff, axis=1) >= U.params['radius'] - TOL_MEMBERSHIP
    return active, diff / U.params['radius']


def _polytope_active(U: ControlSet, u: np.ndarray) -> np.ndarray:
    return u @ U.params['G'].T >= U.params['h'] - TOL_MEMBERSHIP


def _polar_component(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Projection of v onto cone(rows^T), the polar of {w : rows w <= 0}."""
    if rows.shape[0] == 0:
        return np.zeros_like(v)
    lam, _ = nnls(rows.T, v)
    return rows.T @ lam


def tangent_project(U: ControlSet, u, v):
    """Projection of v onto the adjacent cone T_U(u)."""
    single, (u, v) = _as_batch(u, v, d=U.d)
    _check_membership(U, u)
    out = v.copy()
    if U.family == 'box':
        lo_act, up_act = _box_active(U, u)
        out = np.where(lo_act, np.maximum(out, 0.0), out)
        out = np.where(up_act, np.minimum(out, 0.0), out)
    elif U.family in ('ball', 'halfspace'):
        if U.family == 'ball':
            active, normal = _ball_normal(U, u)
        else:
            active = u @ U.params['normal'] >= U.params['offset'] - TOL_MEMBERSHIP
            normal = np.broadcast_to(U.params['normal'], u.shape)
        outward = np.maximum(0.0, np.einsum('kd,kd->k', v, normal))
        out = v - np.where(active, outward, 0.0)[:, None] * normal
    elif U.family == 'polytope':
        active = _polytope_active(U, u)
        for k in np.flatnonzero(active.any(axis=1)):
            out[k] = v[k] - _polar_component(U.params['G'][active[k]], v[k])
    elif U.family == 'finite':
        out = np.zeros_like(v)
    return out[0] if single else out


def _ladder(U: ControlSet, u: np.ndarray, v: np.ndarray, h: Optional[np.ndarray]) -> np.ndarray:
    values = []
    for eps in EPS_LADDER:
        point = u + eps * v if h is None else u + eps * v + eps ** 2 * h
        scale = eps if h is None else eps ** 2
        values.append(np.linalg.norm(point - project(U, point), axis=1) / scale)
    return np.maximum(values[-1], values[-2])


def adjacent_cone_residual(U: ControlSet, u, v, method: str = 'analytic'):
    """
    Estimate of limsup dist(u + eps v, U)/eps; zero (within tolerance) iff v is in T_U(u).
    """
    single, (u, v) = _as_batch(u, v, d=U.d)
    _check_membership(U, u)
    if method == 'ladder':
        return _finish(single, _ladder(U, u, v, None))
    return _finish(single, np.linalg.norm(v - tangent_project(U, u, v), axis=1))


def normal_cone_residual(U: ControlSet, u, xi):
    """sup of <xi, v> over unit v in T_U(u), clipped at 0; zero iff xi is in N_U(u)."""
    single, (u, xi) = _as_batch(u, xi, d=U.d)
    return _finish(single, np.linalg.norm(tangent_project(U, u, xi), axis=1))


def second_adjacent_residual(U: ControlSet, u, v, h, method: str = 'analytic'):
    """
    Estimate of limsup dist(u + eps v + eps^2 h, U)/eps^2; zero iff h is in the
    second-order adjacent subset at (u, v). v must be tangent.
    """
    single, (u, v, h) = _as_batch(u, v, h, d=U.d)
    tangency = np.atleast_1d(adjacent_cone_residual(U, u, v))
    bad = np.flatnonzero(tangency > TOL_TANGENT * (1.0 + np.linalg.norm(v, axis=1)))
    if bad.size:
        raise NotTangentError(f"{bad.size} direction(s) not in the adjacent cone "
                              f"(worst residual {tangency[bad].max():.3e})")
    if method == 'ladder':
        return _finish(single, _ladder(U, u, v, h))
    if U.family == 'box':
        lo_act, up_act = _box_active(U, u)
        flat = np.abs(v) <= TOL_TANGENT
        sq = (np.where(lo_act & flat, np.minimum(h, 0.0), 0.0) ** 2
              + np.where(up_act & flat, np.maximum(h, 0.0), 0.0) ** 2)
        out = np.sqrt(sq.sum(axis=1))
    elif U.family == 'ball':
        active, normal = _ball_normal(U, u)
        flat = np.abs(np.einsum('kd,kd->k', v, normal)) <= TOL_TANGENT
        curvature = np.einsum('kd,kd->k', v, v) / (2.0 * U.params['radius'])
        excess = np.maximum(0.0, np.einsum('kd,kd->k', h, normal) + curvature)
        out = np.where(active & flat, excess, 0.0)
    elif U.family == 'halfspace':
        a = U.params['normal']
        active = u @ a >= U.params['offset'] - TOL_MEMBERSHIP
        flat = np.abs(v @ a) <= TOL_TANGENT
        out = np.where(active & flat, np.maximum(0.0, h @ a), 0.0)
    elif U.family == 'polytope':
        G = U.params['G']
        active = _polytope_active(U, u) & (np.abs(v @ G.T) <= TOL_TANGENT)
        out = np.zeros(u.shape[0])
        for k in np.flatnonzero(active.any(axis=1)):
            out[k] = np.linalg.norm(_polar_component(G[active[k]], h[k]))
    else:
        out = np.linalg.norm(h, axis=1)
    return _finish(single, out)


def sample(U: ControlSet, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points of U for sampling-based checks (bounded families draw from the set itself)."""
    p = U.params
    if U.family == 'box':
        lo = np.where(np.isfinite(p['lower']), p['lower'], -10.0)
        up = np.where(np.isfinite(p['upper']), p['upper'], 10.0)
        lo = np.minimum(lo, up)
        return lo + (up - lo) * rng.random((count, U.d))
    if U.family == 'ball':
        direction = rng.standard_normal((count, U.d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = p['radius'] * rng.random(count) ** (1.0 / U.d)
        return p['center'] + direction * radius[:, None]
    if U.family == 'polytope' and p['vertices'] is not None:
        weights = rng.dirichlet(np.ones(len(p['vertices'])), size=count)
        return weights @ p['vertices']
    if U.family == 'finite':
        return p['points'][rng.integers(0, len(p['points']), size=count)]
    return project(U, 10.0 * rng.standard_normal((count, U.d)))
