"""
Backward solvers for the first and second adjoint processes and
Monte Carlo checks of their duality identities.

Conditional expectations E[. | x_k] are least-squares projections on
polynomial features of the state (see core.regression). Martingale terms
are extracted by regressing the increment times dW_k / dt.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional
import logging

import numpy as np

from core.families import hamiltonian_terms
from core.forward import AdaptedField, NoiseEnsemble, ProblemSpec, SimulationError, as_control_field
from core.hilbert import DimensionError, symmetrize
from core.regression import RegressionConfig, StepRegressor

logger = logging.getLogger(__name__)

IDENTITY_BLOCKS = 4
TOL_IDENTITY = 5e-2


@dataclass(frozen=True, eq=False)
class FirstAdjoint:
    """
    P1 (P, N+1, n) and Q1 (P, N, n, m) from the regressed recursion.
    P1_pred[:, k] = E[S P1_{k+1} | x_k] is the value the Hamiltonian is paired with.
    Y, Z are the pathwise (unregressed) counterparts used in Monte Carlo integrals.
    """
    P1: np.ndarray
    Q1: np.ndarray
    P1_pred: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    P1_path: np.ndarray
    dt: float

    @property
    def N(self) -> int:
        return self.Q1.shape[1]

    @property
    def P(self) -> int:
        return self.Q1.shape[0]


@dataclass(frozen=True, eq=False)
class SecondAdjoint:
    """P2 (P, N+1, n, n), Q2 (P, N, m, n, n) and P2_pred = E[S P2_{k+1} S | x_k]."""
    P2: np.ndarray
    Q2: np.ndarray
    P2_pred: np.ndarray
    dt: float

    @property
    def N(self) -> int:
        return self.Q2.shape[1]


def _check_inputs(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, noise: NoiseEnsemble):
    P, N = noise.P, noise.N
    if xbar.values.shape != (P, N + 1, spec.n):
        raise DimensionError(f"state field of shape {(P, N + 1, spec.n)} expected, got {xbar.values.shape}",
                             module='adjoint')
    if ubar.values.shape != (P, N, spec.d):
        raise DimensionError(f"control field of shape {(P, N, spec.d)} expected, got {ubar.values.shape}",
                             module='adjoint')


def _ensure_finite(values: np.ndarray, k: int, what: str):
    if not np.all(np.isfinite(values)):
        path = int(np.argmin(np.all(np.isfinite(values.reshape(values.shape[0], -1)), axis=1)))
        raise SimulationError(f"{what} no finito en la trayectoria {path}, paso {k}", path=path, step=k)


def solve_first_adjoint(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, noise: NoiseEnsemble,
                        regression: RegressionConfig = RegressionConfig()) -> FirstAdjoint:
    """
    Backward recursion, k = N-1, ..., 0:
        p~_k  = E[S P1_{k+1} | x_k]
        Q1_k  = E[(S P1_{k+1} - p~_k) dW_k^T / dt | x_k]
        P1_k  = p~_k + dt (a_x^T p~_k + sum_j b_x^{j,T} Q1_k^j - f_x)
    with P1_N = -g_x(x_N) on every path.
    """
    _check_inputs(spec, xbar, ubar, noise)
    P, N, dt, n, m = noise.P, noise.N, noise.dt, spec.n, spec.m
    S = spec.space.semigroup_diagonal(dt)
    P1 = np.empty((P, N + 1, n))
    P1_path = np.empty((P, N + 1, n))
    Q1 = np.empty((P, N, n, m))
    pred = np.empty((P, N, n))
    Y = np.empty((P, N, n))
    Z = np.empty((P, N, n, m))

    terminal = spec.family.terminal(xbar.values[:, N], order=1)
    P1[:, N] = -terminal['g_x']
    P1_path[:, N] = -terminal['g_x']
    fallbacks = 0
    for k in reversed(range(N)):
        x_k = xbar.values[:, k]
        co = spec.family.evaluate(k * dt, x_k, ubar.values[:, k], order=1)
        reg = StepRegressor(x_k, regression, step=k)
        fallbacks += int(reg.fallback)
        dW = noise.increments[:, k]

        target = S * P1[:, k + 1]
        p_tilde = reg.project(target)
        q = reg.project((target - p_tilde)[:, :, None] * dW[:, None, :] / dt)
        P1[:, k] = p_tilde + dt * hamiltonian_terms(co, p_tilde, q)['H_x']
        pred[:, k] = p_tilde
        Q1[:, k] = q

        y = S * P1_path[:, k + 1]
        z = (y - p_tilde)[:, :, None] * dW[:, None, :] / dt
        P1_path[:, k] = y + dt * hamiltonian_terms(co, y, z)['H_x']
        Y[:, k] = y
        Z[:, k] = z
        _ensure_finite(P1[:, k], k, 'adjunto P1')

    logger.info(f"Primer adjunto resuelto: P={P}, N={N}, pasos con ridge de respaldo={fallbacks}")
    return FirstAdjoint(P1=P1, Q1=Q1, P1_pred=pred, Y=Y, Z=Z, P1_path=P1_path, dt=dt)


def _second_order_step(T: np.ndarray, b_x: np.ndarray, p2: np.ndarray, q2: np.ndarray,
                       h_xx: np.ndarray, dt: float) -> np.ndarray:
    """
    T^T p2 T + dt sum_j (T^T Q2_j B_j + B_j^T Q2_j T) + dt sum_j B_j^T p2 B_j + dt Hxx
    with T = I + dt a_x and B_j = b_x[:, :, j, :].
    """
    out = np.einsum('pik,pil,plr->pkr', T, p2, T)
    cross = np.einsum('pik,pjil,pljr->pkr', T, q2, b_x)
    out = out + dt * (cross + np.swapaxes(cross, -1, -2))
    out = out + dt * np.einsum('pijk,pil,pljr->pkr', b_x, p2, b_x)
    return symmetrize(out + dt * h_xx)


def solve_second_adjoint(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, first: FirstAdjoint,
                         noise: NoiseEnsemble, regression: RegressionConfig = RegressionConfig()) -> SecondAdjoint:
    """
    Matrix recursion for P2 with P2_N = -g_xx(x_N). The Hessian of the Hamiltonian
    uses (P1_pred, Q1) from `first`. Q2_j is the regression of
    (S P2_{k+1} S - E[.|x_k]) dW_{k,j} / dt, symmetrized.
    """
    _check_inputs(spec, xbar, ubar, noise)
    spec.family.require(2)
    P, N, dt, n, m = noise.P, noise.N, noise.dt, spec.n, spec.m
    S = spec.space.semigroup_diagonal(dt)
    eye = np.eye(n)
    P2 = np.empty((P, N + 1, n, n))
    Q2 = np.empty((P, N, m, n, n))
    pred = np.empty((P, N, n, n))
    P2[:, N] = -spec.family.terminal(xbar.values[:, N], order=2)['g_xx']
    worst_asym = 0.0
    for k in reversed(range(N)):
        x_k = xbar.values[:, k]
        co = spec.family.evaluate(k * dt, x_k, ubar.values[:, k], order=2)
        reg = StepRegressor(x_k, regression, step=k)
        dW = noise.increments[:, k]

        psi = S[:, None] * P2[:, k + 1] * S[None, :]
        p2 = symmetrize(reg.project(psi))
        q2 = symmetrize(reg.project((psi - p2)[:, None] * dW[:, :, None, None] / dt))
        h_xx = hamiltonian_terms(co, first.P1_pred[:, k], first.Q1[:, k], order=2)['H_xx']
        T = eye + dt * co['a_x']
        P2[:, k] = _second_order_step(T, co['b_x'], p2, q2, h_xx, dt)
        pred[:, k] = p2
        Q2[:, k] = q2
        _ensure_finite(P2[:, k], k, 'adjunto P2')
        scale = np.abs(P2[:, k]).max() + 1e-300
        worst_asym = max(worst_asym, float(np.abs(P2[:, k] - np.swapaxes(P2[:, k], -1, -2)).max() / scale))

    logger.info(f"Segundo adjunto resuelto: P={P}, N={N}, asimetría relativa máx={worst_asym:.1e}")
    return SecondAdjoint(P2=P2, Q2=Q2, P2_pred=pred, dt=dt)


def _q2_columns(q2: np.ndarray, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Column j = Q2_j x (or Q2_j^T x). q2 (..., m, n, n), x (..., n) -> (..., n, m)."""
    if transpose:
        return np.einsum('...jli,...l->...ij', q2, x)
    return np.einsum('...jil,...l->...ij', q2, x)


def realize_Q2_action(adj2: SecondAdjoint, x1, transpose: bool = False) -> np.ndarray:
    """
    Finite-dimensional action of the martingale term on a forward test process:
    the j-th column at (path, step) is Q2_j x1, or Q2_j^T x1 with transpose=True.
    Returns shape (P, N, n, m).
    """
    values = x1.values if isinstance(x1, AdaptedField) else np.asarray(x1, dtype=float)
    P, N, m, n, _ = adj2.Q2.shape
    if values.ndim != 3 or values.shape[0] != P or values.shape[1] < N or values.shape[2] != n:
        raise DimensionError(f"state field of shape ({P}, >={N}, {n}) expected, got {values.shape}",
                             module='adjoint')
    return _q2_columns(adj2.Q2, values[:, :N], transpose)


def random_test_data(rng: np.random.Generator, N: int, shape: tuple, dt: float,
                     blocks: int = IDENTITY_BLOCKS) -> np.ndarray:
    """
    Deterministic piecewise-constant field of shape (N,) + shape with Gaussian values
    on `blocks` equal time blocks, scaled so that sum_k dt |psi_k|^2 = 1.
    """
    values = rng.standard_normal((min(blocks, N),) + tuple(shape))
    cells = np.array_split(np.arange(N), values.shape[0])
    field = np.empty((N,) + tuple(shape))
    for value, idx in zip(values, cells):
        field[idx] = value
    norm = np.sqrt(dt * np.sum(field ** 2))
    return field / norm if norm > 0 else field


def transposition_sides(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                        noise: NoiseEnsemble, start: int, eta: np.ndarray, psi1: np.ndarray,
                        psi2: np.ndarray) -> Dict[str, float]:
    """
    Both sides of the duality between P1 and the test process
        z_{k+1} = S (z_k + psi1_k dt + psi2_k dW_k),   z_start = eta:
    lhs = E<z_N, P1_N> + E sum_{k>=start} dt <z_k, F_k>,  F = a_x^T p~ + b_x^T Q1 - f_x
    rhs = E<eta, P1_start> + E sum_{k>=start} dt (<psi1_k, p~_k> + <psi2_k, Q1_k>_HS)
    """
    return _transposition_batch(spec, xbar, ubar, adj, noise, [(start, eta, psi1, psi2)])[0]


def _transposition_batch(spec, xbar, ubar, adj, noise, trials) -> List[Dict[str, float]]:
    P, N, dt = noise.P, noise.N, noise.dt
    S = spec.space.semigroup_diagonal(dt)
    z = [np.broadcast_to(np.asarray(eta, dtype=float), (P, spec.n)).copy() for _, eta, _, _ in trials]
    lhs = [np.zeros(P) for _ in trials]
    rhs = [np.zeros(P) for _ in trials]
    first = min(t[0] for t in trials) if trials else N
    for k in range(first, N):
        co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=1)
        drift = hamiltonian_terms(co, adj.P1_pred[:, k], adj.Q1[:, k])['H_x']
        dW = noise.increments[:, k]
        for i, (start, _, psi1, psi2) in enumerate(trials):
            if k < start:
                continue
            lhs[i] += dt * np.einsum('pi,pi->p', z[i], drift)
            rhs[i] += dt * (adj.P1_pred[:, k] @ psi1[k] + np.einsum('pij,ij->p', adj.Q1[:, k], psi2[k]))
            z[i] = S * (z[i] + psi1[k] * dt + dW @ psi2[k].T)
    out = []
    for i, (start, eta, _, _) in enumerate(trials):
        left = float(np.mean(np.einsum('pi,pi->p', z[i], adj.P1[:, N]) + lhs[i]))
        right = float(np.mean(adj.P1[:, start] @ np.asarray(eta, dtype=float) + rhs[i]))
        out.append({'lhs': left, 'rhs': right})
    return out


def _residual_summary(sides: List[Dict[str, float]]) -> Dict:
    residuals = np.array([abs(s['lhs'] - s['rhs']) / (abs(s['lhs']) + abs(s['rhs']) + 1.0) for s in sides])
    return {
        'residuals': residuals,
        'max_residual': float(residuals.max()) if residuals.size else 0.0,
        'mean_residual': float(residuals.mean()) if residuals.size else 0.0,
        'lhs': np.array([s['lhs'] for s in sides]),
        'rhs': np.array([s['rhs'] for s in sides]),
    }


def check_transposition_identity(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint,
                                 noise: NoiseEnsemble, trials: int = 32, seed: int = 0) -> Dict:
    """
    Random trials of the P1 duality. Per trial: start step uniform on the grid,
    eta standard Gaussian, psi1 (N, n) and psi2 (N, n, m) from random_test_data.
    The test process runs on the ensemble's own increments.
    """
    rng = np.random.default_rng(seed)
    N, dt, n, m = noise.N, noise.dt, spec.n, spec.m
    batch = []
    for _ in range(int(trials)):
        start = int(rng.integers(0, N))
        eta = rng.standard_normal(n)
        psi1 = random_test_data(rng, N, (n,), dt)
        psi2 = random_test_data(rng, N, (n, m), dt)
        batch.append((start, eta, psi1, psi2))
    summary = _residual_summary(_transposition_batch(spec, xbar, ubar, adj, noise, batch))
    logger.info(f"Identidad de transposición: {trials} pruebas, residuo máx={summary['max_residual']:.2e}")
    return summary


def relaxed_transposition_sides(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj2: SecondAdjoint,
                                first: FirstAdjoint, noise: NoiseEnsemble, trials) -> List[Dict[str, float]]:
    """
    Both sides of the second-order duality for each trial
    (start, xi1, xi2, u1, u2, v1, v2). With T = I + dt a_x, B_j = b_x^j and
        x_{i,k+1} = S (T x_i + u_i dt + sum_j (B_j x_i + v_ij) dW_j),   x_i,start = xi_i,
    lhs = E<P2_N x1_N, x2_N> + E sum dt <Hxx x1, x2>
    rhs = <P2_start xi1, xi2> + E sum dt [ <p2 u1, T x2> + <p2 T x1, u2> + dt <p2 u1, u2>
          + sum_j (<Q2_j T x1, v2_j> + <v1_j, Q2_j^T T x2> + dt <Q2_j u1, beta2_j> + dt <beta1_j, Q2_j u2>)
          + sum_j (<p2 B_j x1, v2_j> + <p2 v1_j, B_j x2 + v2_j>) ]
    where p2 = P2_pred, beta_ij = B_j x_i + v_ij. Q2 columns come from the same
    contraction as realize_Q2_action.
    """
    P, N, dt, n = noise.P, noise.N, noise.dt, spec.n
    S = spec.space.semigroup_diagonal(dt)
    eye = np.eye(n)
    state = []
    for start, xi1, xi2, *_ in trials:
        state.append([np.broadcast_to(np.asarray(xi1, float), (P, n)).copy(),
                      np.broadcast_to(np.asarray(xi2, float), (P, n)).copy()])
    lhs = [np.zeros(P) for _ in trials]
    rhs = [np.zeros(P) for _ in trials]
    first_step = min(t[0] for t in trials) if trials else N
    for k in range(first_step, N):
        co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=2)
        h_xx = hamiltonian_terms(co, first.P1_pred[:, k], first.Q1[:, k], order=2)['H_xx']
        T = eye + dt * co['a_x']
        b_x = co['b_x']
        p2, q2 = adj2.P2_pred[:, k], adj2.Q2[:, k]
        dW = noise.increments[:, k]
        for i, (start, _, _, u1, u2, v1, v2) in enumerate(trials):
            if k < start:
                continue
            x1, x2 = state[i]
            Tx1 = np.einsum('pil,pl->pi', T, x1)
            Tx2 = np.einsum('pil,pl->pi', T, x2)
            Bx1 = np.einsum('pijl,pl->pij', b_x, x1)
            Bx2 = np.einsum('pijl,pl->pij', b_x, x2)
            beta1 = Bx1 + v1[k]
            beta2 = Bx2 + v2[k]
            a, b = u1[k], u2[k]
            lhs[i] += dt * np.einsum('pkl,pk,pl->p', h_xx, x1, x2)
            term = (np.einsum('pkl,k,pl->p', p2, a, Tx2) + np.einsum('pkl,pl,k->p', p2, Tx1, b)
                    + dt * np.einsum('pkl,k,l->p', p2, a, b))
            term += np.einsum('pij,ij->p', _q2_columns(q2, Tx1), v2[k])
            term += np.einsum('ij,pij->p', v1[k], _q2_columns(q2, Tx2, transpose=True))
            term += dt * np.einsum('pij,pij->p', _q2_columns(q2, np.broadcast_to(a, (P, n))), beta2)
            term += dt * np.einsum('pij,pij->p', beta1, _q2_columns(q2, np.broadcast_to(b, (P, n))))
            term += np.einsum('pkl,plj,kj->p', p2, Bx1, v2[k])
            term += np.einsum('pkl,lj,pkj->p', p2, v1[k], Bx2 + v2[k])
            rhs[i] += dt * term
            state[i] = [S * (Tx1 + a * dt + np.einsum('pij,pj->pi', beta1, dW)),
                        S * (Tx2 + b * dt + np.einsum('pij,pj->pi', beta2, dW))]
    out = []
    P2_N = adj2.P2[:, N]
    for i, (start, xi1, xi2, *_) in enumerate(trials):
        x1, x2 = state[i]
        left = float(np.mean(np.einsum('pkl,pl,pk->p', P2_N, x1, x2) + lhs[i]))
        right = float(np.mean(np.einsum('pkl,l,k->p', adj2.P2[:, start], xi1, xi2) + rhs[i]))
        out.append({'lhs': left, 'rhs': right})
    return out


def check_relaxed_transposition_identity(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField,
                                         adj2: SecondAdjoint, first: FirstAdjoint, noise: NoiseEnsemble,
                                         trials: int = 32, seed: int = 0) -> Dict:
    """
    Random trials of the P2 duality: start step uniform, xi1, xi2 standard Gaussian,
    u_i (N, n) and v_i (N, n, m) from random_test_data.
    """
    rng = np.random.default_rng(seed)
    N, dt, n, m = noise.N, noise.dt, spec.n, spec.m
    batch = []
    for _ in range(int(trials)):
        start = int(rng.integers(0, N))
        xi1, xi2 = rng.standard_normal(n), rng.standard_normal(n)
        u1, u2 = random_test_data(rng, N, (n,), dt), random_test_data(rng, N, (n,), dt)
        v1, v2 = random_test_data(rng, N, (n, m), dt), random_test_data(rng, N, (n, m), dt)
        batch.append((start, xi1, xi2, u1, u2, v1, v2))
    summary = _residual_summary(relaxed_transposition_sides(spec, xbar, ubar, adj2, first, noise, batch))
    logger.info(f"Identidad de transposición relajada: {trials} pruebas, "
                f"residuo máx={summary['max_residual']:.2e}")
    return summary


def duality_gap(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, adj: FirstAdjoint, v,
                y1: AdaptedField, noise: NoiseEnsemble) -> Dict[str, float]:
    """
    Pathwise samples of E<P1_N, y1_N> - E sum dt (<Y, a_u v> + <Z, b_u v> + <f_x, y1>)
    where (Y, Z) are the pathwise adjoint values. Returns gap and stderr.
    """
    P, N, dt = noise.P, noise.N, noise.dt
    v = as_control_field(v, P, N, spec.d)
    total = np.einsum('pi,pi->p', adj.P1_path[:, N], y1.values[:, N])
    for k in range(N):
        co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=1)
        total -= dt * (np.einsum('pi,pik,pk->p', adj.Y[:, k], co['a_u'], v[:, k])
                       + np.einsum('pij,pijk,pk->p', adj.Z[:, k], co['b_u'], v[:, k])
                       + np.einsum('pi,pi->p', co['f_x'], y1.values[:, k]))
    gap = float(total.mean())
    stderr = float(total.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return {'gap': gap, 'stderr': stderr}


def adjoint_fields(adj: FirstAdjoint, adj2: Optional[SecondAdjoint] = None) -> Dict[str, np.ndarray]:
    """Flat dict of the solved processes, for export."""
    out = {'P1': adj.P1, 'Q1': adj.Q1}
    if adj2 is not None:
        out.update({'P2': adj2.P2, 'Q2': adj2.Q2})
    return out
