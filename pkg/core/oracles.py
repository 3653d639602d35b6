"""
Independent ground truth for the checkers: LQ Riccati solver and the closed-form
LQ adjoint, Lyapunov and Ornstein-Uhlenbeck formulas, finite-difference
expansions of the cost and brute-force cone distances.

The brute-force cone distances carry their own projections and never call
core.cones. Only RiccatiSolution.feedback uses core.cones.project, to clip the
Riccati feedback onto a constrained U.
"""
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence
import logging

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

from core.adjoint import FirstAdjoint
from core.cones import ControlSet, project
from core.forward import (AdaptedField, FeedbackControl, NoiseEnsemble, ProblemSpec, as_control_field,
                          mean_and_stderr, path_costs, perturbed_field, simulate_pair)
from core.hilbert import DimensionError, VerificationError

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-9
ODE_RTOL = 1e-10
ODE_ATOL = 1e-12


class RiccatiError(VerificationError):
    module = 'oracles'


@dataclass(frozen=True, eq=False)
class LQData:
    """
    a = A x + B u,   b_j = sigma_j + C_j x + D_j u,
    f = 1/2 x'Mx + 1/2 u'Ru + q'x + s'u + c0,   g = 1/2 x'Gx + g_lin'x
    A is diagonal (eigenvalues of the truncated generator).
    """
    eigenvalues: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sigma: np.ndarray
    M: np.ndarray
    R: np.ndarray
    G: np.ndarray
    q: np.ndarray = None
    s: np.ndarray = None
    c0: float = 0.0
    g_lin: np.ndarray = None

    def __post_init__(self):
        n, d = np.asarray(self.B).shape
        m = np.asarray(self.sigma).shape[1]
        defaults = {'q': np.zeros(n), 's': np.zeros(d), 'g_lin': np.zeros(n)}
        for key, value in defaults.items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        for key in ('eigenvalues', 'B', 'C', 'D', 'sigma', 'M', 'R', 'G', 'q', 's', 'g_lin'):
            object.__setattr__(self, key, np.asarray(getattr(self, key), dtype=float))
        expected = {'eigenvalues': (n,), 'C': (m, n, n), 'D': (m, n, d), 'M': (n, n), 'R': (d, d),
                    'G': (n, n), 'q': (n,), 's': (d,), 'g_lin': (n,)}
        for key, shape in expected.items():
            if getattr(self, key).shape != shape:
                raise DimensionError(f"LQ {key} must have shape {shape}, got {getattr(self, key).shape}",
                                     module='oracles')
        for key in ('M', 'R', 'G'):
            mat = getattr(self, key)
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise RiccatiError(f"{key} debe ser simétrica")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise RiccatiError("R debe ser definida positiva")
        for key in ('M', 'G'):
            if np.linalg.eigvalsh(getattr(self, key)).min() < -PSD_TOLERANCE:
                raise RiccatiError(f"{key} debe ser semidefinida positiva")

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.sigma.shape[1]


def lq_data_from_spec(spec: ProblemSpec) -> LQData:
    """LQData of a problem built on the 'lq' family."""
    if spec.family.name != 'lq':
        raise RiccatiError(f"el oráculo de Riccati requiere la familia 'lq', no '{spec.family.name}'")
    p = spec.family.params
    return LQData(eigenvalues=spec.space.spectrum, B=p['B'], C=p['C'], D=p['D'], sigma=p['sigma'],
                  M=p['M'], R=p['R'], G=p['G'], q=p['q'], s=p['s'], c0=float(p['c0']), g_lin=p['g_lin'])


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """
    Value function V_k(x) = 1/2 x'Pi_k x + r_k'x + c_k on the grid and the
    optimal affine feedback u_k = -K_k x - kappa_k.
    """
    times: np.ndarray
    Pi: np.ndarray
    r: np.ndarray
    c: np.ndarray
    K: np.ndarray
    kappa: np.ndarray
    scheme: str
    eigenvalues: np.ndarray = field(repr=False, default=None)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def value(self, x0) -> float:
        x0 = np.asarray(x0, dtype=float)
        return float(0.5 * x0 @ self.Pi[0] @ x0 + self.r[0] @ x0 + self.c[0])

    def feedback(self, U: Optional[ControlSet] = None) -> FeedbackControl:
        """Riccati feedback, projected onto U when U is given."""
        K, kappa = self.K, self.kappa

        def policy(k: int, t: float, x: np.ndarray) -> np.ndarray:
            u = -x @ K[k].T - kappa[k]
            return u if U is None else project(U, u)

        return FeedbackControl(policy, name=f'riccati-{self.scheme}')


def _check_psd(Pi: np.ndarray, k: int):
    scale = 1.0 + np.abs(Pi).max()
    low = np.linalg.eigvalsh(0.5 * (Pi + Pi.T)).min()
    if low < -PSD_TOLERANCE * scale:
        raise RiccatiError(f"Pi perdió la semidefinición positiva en el paso {k} (autovalor {low:.3e}); "
                           "datos mal planteados")


def _discrete_riccati(lq: LQData, steps: int, horizon: float):
    n, d, m = lq.n, lq.d, lq.m
    dt = horizon / steps
    S = np.exp(lq.eigenvalues * dt)
    Pi = np.empty((steps + 1, n, n))
    r = np.empty((steps + 1, n))
    c = np.empty(steps + 1)
    K = np.empty((steps, d, n))
    kappa = np.empty((steps, d))
    Pi[steps], r[steps], c[steps] = lq.G, lq.g_lin, 0.0
    for k in reversed(range(steps)):
        Psi = S[:, None] * Pi[k + 1] * S[None, :]
        Sr = S * r[k + 1]
        Gamma = lq.R + dt * lq.B.T @ Psi @ lq.B
        Lam = lq.B.T @ Psi
        beta = lq.s + lq.B.T @ Sr
        quad_x = Psi + dt * lq.M
        lin_x = Sr + dt * lq.q
        const = c[k + 1] + dt * lq.c0
        for j in range(m):
            Cj, Dj, sj = lq.C[j], lq.D[j], lq.sigma[:, j]
            Gamma = Gamma + Dj.T @ Psi @ Dj
            Lam = Lam + Dj.T @ Psi @ Cj
            beta = beta + Dj.T @ Psi @ sj
            quad_x = quad_x + dt * Cj.T @ Psi @ Cj
            lin_x = lin_x + dt * Cj.T @ Psi @ sj
            const = const + 0.5 * dt * sj @ Psi @ sj
        K[k] = np.linalg.solve(Gamma, Lam)
        kappa[k] = np.linalg.solve(Gamma, beta)
        Pi[k] = quad_x - dt * Lam.T @ K[k]
        Pi[k] = 0.5 * (Pi[k] + Pi[k].T)
        r[k] = lin_x - dt * Lam.T @ kappa[k]
        c[k] = const - 0.5 * dt * beta @ kappa[k]
        _check_psd(Pi[k], k)
    return Pi, r, c, K, kappa


def _continuous_gains(lq: LQData, Pi: np.ndarray, r: np.ndarray):
    Gamma = lq.R + np.einsum('jil,ik,jkr->lr', lq.D, Pi, lq.D)
    Lam = lq.B.T @ Pi + np.einsum('jil,ik,jkr->lr', lq.D, Pi, lq.C)
    beta = lq.s + np.einsum('jil,ik,kj->l', lq.D, Pi, lq.sigma) + lq.B.T @ r
    return Gamma, Lam, beta


def _continuous_riccati(lq: LQData, steps: int, horizon: float):
    n = lq.n
    A = lq.eigenvalues

    def rhs(tau, y):
        Pi = y[:n * n].reshape(n, n)
        r = y[n * n:n * n + n]
        Gamma, Lam, beta = _continuous_gains(lq, Pi, r)
        K = np.linalg.solve(Gamma, Lam)
        kappa = np.linalg.solve(Gamma, beta)
        dPi = (A[:, None] * Pi + Pi * A[None, :] + lq.M
               + np.einsum('jki,kl,jlr->ir', lq.C, Pi, lq.C) - Lam.T @ K)
        dr = A * r + lq.q + np.einsum('jki,kl,lj->i', lq.C, Pi, lq.sigma) - Lam.T @ kappa
        dc = lq.c0 + 0.5 * np.einsum('ij,ik,kj->', lq.sigma, Pi, lq.sigma) - 0.5 * beta @ kappa
        return np.concatenate([(0.5 * (dPi + dPi.T)).ravel(), dr, [dc]])

    y_end = np.concatenate([lq.G.ravel(), lq.g_lin, [0.0]])
    taus = np.linspace(0.0, horizon, steps + 1)
    sol = solve_ivp(rhs, (0.0, horizon), y_end, t_eval=taus, method='DOP853', rtol=ODE_RTOL, atol=ODE_ATOL)
    if not sol.success:
        raise RiccatiError(f"la integración de Riccati falló: {sol.message}")
    # tau = T - t, so reverse to forward time
    Y = sol.y[:, ::-1].T
    Pi = Y[:, :n * n].reshape(-1, n, n)
    r = Y[:, n * n:n * n + n]
    c = Y[:, -1]
    K = np.empty((steps, lq.d, n))
    kappa = np.empty((steps, lq.d))
    for k in range(steps):
        _check_psd(Pi[k], k)
        Gamma, Lam, beta = _continuous_gains(lq, Pi[k], r[k])
        K[k] = np.linalg.solve(Gamma, Lam)
        kappa[k] = np.linalg.solve(Gamma, beta)
    return Pi, r, c, K, kappa


def riccati_solve(lq: LQData, steps: int, horizon: float, scheme: str = 'discrete') -> RiccatiSolution:
    """
    'discrete': dynamic programming for the exponential Euler scheme, so the
    feedback is the exact optimum of the simulated problem.
    'continuous': stochastic Riccati ODE integrated backward with solve_ivp.
    """
    if steps < 1 or not horizon > 0:
        raise DimensionError("dims positive: steps and horizon must be positive", module='oracles')
    if scheme == 'discrete':
        Pi, r, c, K, kappa = _discrete_riccati(lq, int(steps), float(horizon))
    elif scheme == 'continuous':
        Pi, r, c, K, kappa = _continuous_riccati(lq, int(steps), float(horizon))
    else:
        raise VerificationError(f"esquema de Riccati desconocido '{scheme}'; válidos: continuous, discrete",
                                module='oracles')
    logger.info(f"Riccati ({scheme}) resuelto: N={steps}, |Pi(0)|={np.linalg.norm(Pi[0]):.6f}")
    return RiccatiSolution(times=np.linspace(0.0, horizon, int(steps) + 1), Pi=Pi, r=r, c=c, K=K,
                           kappa=kappa, scheme=scheme, eigenvalues=lq.eigenvalues)


def analytic_first_adjoint_lq(lq: LQData, sol: RiccatiSolution, xbar: AdaptedField,
                              ubar: AdaptedField) -> FirstAdjoint:
    """
    Closed-form adjoint of the LQ problem at the Riccati feedback:
        P1_k = -Pi_k x_k - r_k
        p~_k = -Psi (x_k + dt B u_k) - S r_{k+1},   Psi = S Pi_{k+1} S
        Q1_k^j = -Psi (sigma_j + C_j x_k + D_j u_k)
    Requires the discrete scheme solution on the same grid as the fields.
    """
    x, u = xbar.values, ubar.values
    P, N, n = u.shape[0], u.shape[1], lq.n
    if sol.Pi.shape[0] != N + 1:
        raise DimensionError(f"Riccati grid has {sol.Pi.shape[0] - 1} steps, fields have {N}", module='oracles')
    dt = sol.dt
    S = np.exp(lq.eigenvalues * dt)
    P1 = -np.einsum('kij,pkj->pki', sol.Pi, x) - sol.r[None]
    pred = np.empty((P, N, n))
    Q1 = np.empty((P, N, n, lq.m))
    for k in range(N):
        Psi = S[:, None] * sol.Pi[k + 1] * S[None, :]
        pred[:, k] = -(x[:, k] + dt * u[:, k] @ lq.B.T) @ Psi - S * sol.r[k + 1]
        diffusion = (lq.sigma[None] + np.einsum('jil,pl->pij', lq.C, x[:, k])
                     + np.einsum('jil,pl->pij', lq.D, u[:, k]))
        Q1[:, k] = -np.einsum('il,plj->pij', Psi, diffusion)
    return FirstAdjoint(P1=P1, Q1=Q1, P1_pred=pred, Y=pred, Z=Q1, P1_path=P1, dt=dt)


def adjoint_discrepancy(a: np.ndarray, b: np.ndarray) -> float:
    """sup over steps of the sample L2 norm of a - b (arrays shaped (P, steps, ...))."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    sq = diff.reshape(diff.shape[0], diff.shape[1], -1) ** 2
    return float(np.sqrt(sq.sum(axis=2).mean(axis=0)).max())


def lyapunov_solve(eigenvalues, a_x, h_xx, terminal, C: Sequence = (), horizon: float = 1.0,
                   times: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Backward matrix ODE
        -P' = A P + P A + a_x'P + P a_x + sum_j C_j'P C_j + Hxx,   P(T) = terminal
    with constant coefficients, integrated by solve_ivp. Returns P at `times`.
    """
    A = np.asarray(eigenvalues, dtype=float)
    a_x = np.asarray(a_x, dtype=float)
    h_xx = np.asarray(h_xx, dtype=float)
    n = A.size
    C = [np.asarray(c, dtype=float) for c in C]
    times = np.linspace(0.0, horizon, 2) if times is None else np.asarray(times, dtype=float)

    def rhs(tau, y):
        Pm = y.reshape(n, n)
        dP = A[:, None] * Pm + Pm * A[None, :] + a_x.T @ Pm + Pm @ a_x + h_xx
        for c in C:
            dP = dP + c.T @ Pm @ c
        return dP.ravel()

    if np.any(np.diff(times) <= 0):
        raise DimensionError("times must be increasing", module='oracles')
    taus = np.clip(horizon - times[::-1], 0.0, horizon)
    sol = solve_ivp(rhs, (0.0, horizon), np.asarray(terminal, dtype=float).ravel(), t_eval=taus,
                    method='DOP853', rtol=ODE_RTOL, atol=ODE_ATOL)
    if not sol.success:
        raise VerificationError(f"la integración de Lyapunov falló: {sol.message}", module='oracles')
    return sol.y.T[::-1].reshape(-1, n, n)


def ou_moments(eigenvalue: float, sigma: float, x0: float, t: float) -> Dict[str, float]:
    """Mean and variance of dx = lambda x dt + sigma dW started at x0."""
    mean = np.exp(eigenvalue * t) * x0
    if abs(eigenvalue) < 1e-14:
        variance = sigma ** 2 * t
    else:
        variance = sigma ** 2 * np.expm1(2.0 * eigenvalue * t) / (2.0 * eigenvalue)
    return {'mean': float(mean), 'variance': float(variance)}


def _costs_under(spec: ProblemSpec, control, noise: NoiseEnsemble, workers: int) -> np.ndarray:
    states, controls = simulate_pair(spec, control, noise, workers)
    return path_costs(spec, states.values, controls.values, noise.dt)


def finite_diff_expansion(spec: ProblemSpec, ubar, v, h, eps: float, noise: NoiseEnsemble,
                          workers: int = 1) -> Dict[str, float]:
    """
    On common noise:
        first_quotient  = [J(u + eps v + eps^2 h) - J(u)] / eps
        dJ              = Richardson limit of the first quotient from eps and eps/2
        second_quotient = [J(u + eps v + eps^2 h) - J(u) - eps dJ] / eps^2
    Standard errors are those of the pathwise quotients.
    """
    if not eps > 0:
        raise DimensionError("eps must be positive", module='oracles')
    _, ubar_field = simulate_pair(spec, ubar, noise, workers)
    base = _costs_under(spec, ubar_field, noise, workers)
    full = _costs_under(spec, perturbed_field(ubar_field, v, h, eps), noise, workers)
    half = _costs_under(spec, perturbed_field(ubar_field, v, h, eps / 2.0), noise, workers)
    q_full = (full - base) / eps
    q_half = (half - base) / (eps / 2.0)
    dJ_samples = 2.0 * q_half - q_full
    second = (full - base - eps * dJ_samples) / eps ** 2
    first_value, first_err = mean_and_stderr(q_full)
    dJ, dJ_err = mean_and_stderr(dJ_samples)
    second_value, second_err = mean_and_stderr(second)
    logger.info(f"Cocientes por diferencias finitas (eps={eps:g}): dJ={dJ:.6f}, segundo={second_value:.6f}")
    return {'first_quotient': first_value, 'first_stderr': first_err, 'dJ': dJ, 'dJ_stderr': dJ_err,
            'second_quotient': second_value, 'second_stderr': second_err}


def second_difference(spec: ProblemSpec, ubar, v, eps: float, noise: NoiseEnsemble,
                      workers: int = 1) -> Dict[str, float]:
    """[J(u + eps v) - 2 J(u) + J(u - eps v)] / eps^2 on common noise, with stderr."""
    _, ubar_field = simulate_pair(spec, ubar, noise, workers)
    base = _costs_under(spec, ubar_field, noise, workers)
    plus = _costs_under(spec, perturbed_field(ubar_field, v, None, eps), noise, workers)
    minus = _costs_under(spec, perturbed_field(ubar_field, v, None, -eps), noise, workers)
    value, stderr = mean_and_stderr((plus - 2.0 * base + minus) / eps ** 2)
    return {'value': value, 'stderr': stderr}


# ---------------------------------------------------------------------------
# brute-force cone distances
# ---------------------------------------------------------------------------

def _exact_projection(U: ControlSet, y: np.ndarray) -> np.ndarray:
    p = U.params
    if U.family == 'box':
        return np.minimum(np.maximum(y, p['lower']), p['upper'])
    if U.family == 'ball':
        diff = y - p['center']
        norm = np.linalg.norm(diff)
        return y if norm <= p['radius'] else p['center'] + diff * (p['radius'] / norm)
    if U.family == 'halfspace':
        a, b = p['normal'], p['offset']
        excess = y @ a - b
        return y if excess <= 0 else y - excess * a / (a @ a)
    if U.family == 'finite':
        points = p['points']
        return points[int(np.argmin(np.linalg.norm(points - y, axis=1)))]
    if U.family == 'polytope':
        return _active_set_projection(p['G'], p['h'], y)
    raise VerificationError(f"familia de conjunto sin oráculo: {U.family}", module='oracles')


def _active_set_projection(G: np.ndarray, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Enumerate active sets of size <= d; keep the closest feasible KKT point."""
    if np.all(G @ y <= h + 1e-12):
        return y
    d = y.size
    best, best_dist = None, np.inf
    for size in range(1, min(d, G.shape[0]) + 1):
        for rows in combinations(range(G.shape[0]), size):
            Ga, ha = G[list(rows)], h[list(rows)]
            gram = Ga @ Ga.T
            if np.linalg.matrix_rank(gram) < size:
                continue
            lam = np.linalg.solve(gram, Ga @ y - ha)
            if np.any(lam < -1e-12):
                continue
            x = y - Ga.T @ lam
            if np.any(G @ x > h + 1e-10):
                continue
            dist = np.linalg.norm(y - x)
            if dist < best_dist:
                best, best_dist = x, dist
    if best is None:
        raise VerificationError("proyección por conjuntos activos sin solución", module='oracles')
    return best


def brute_force_cone(U: ControlSet, u, v, h=None, eps_ladder: Sequence[float] = None) -> pd.DataFrame:
    """
    dist(u + eps v, U)/eps and dist(u + eps v + eps^2 h, U)/eps^2 per rung by exact
    projection. The frame's attrs carry the two-rung Richardson limits
    'first_limit' and 'second_limit'.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    h = np.zeros_like(v) if h is None else np.asarray(h, dtype=float)
    ladder = 2.0 ** -np.arange(3, 13) if eps_ladder is None else np.asarray(eps_ladder, dtype=float)
    rows = []
    for eps in ladder:
        y1 = u + eps * v
        y2 = u + eps * v + eps ** 2 * h
        rows.append({'eps': float(eps),
                     'first': float(np.linalg.norm(y1 - _exact_projection(U, y1)) / eps),
                     'second': float(np.linalg.norm(y2 - _exact_projection(U, y2)) / eps ** 2)})
    table = pd.DataFrame(rows, columns=['eps', 'first', 'second'])
    table.attrs['first_limit'] = _richardson(table['first'].to_numpy(), ladder)
    table.attrs['second_limit'] = _richardson(table['second'].to_numpy(), ladder)
    return table


def _richardson(values: np.ndarray, ladder: np.ndarray) -> float:
    if len(values) < 2:
        return float(values[-1])
    ratio = ladder[-2] / ladder[-1]
    limit = (ratio * values[-1] - values[-2]) / (ratio - 1.0)
    return float(max(0.0, limit))


def riccati_table(sol: RiccatiSolution) -> pd.DataFrame:
    """Per-step summary of a Riccati solution for export."""
    return pd.DataFrame({
        'step': np.arange(len(sol.times)),
        'time': sol.times,
        'trace_pi': np.trace(sol.Pi, axis1=1, axis2=2),
        'min_eig_pi': np.linalg.eigvalsh(sol.Pi).min(axis=1),
        'c': sol.c,
    })
