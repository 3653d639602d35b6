"""
Forward simulators: controlled state (exponential Euler), variational equations, cost
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from core.cones import ControlSet
from core.families import CoefficientFamily
from core.hilbert import DimensionError, TruncatedSpace, VerificationError

logger = logging.getLogger(__name__)

# Paths are always processed in blocks of this size, whatever the worker count,
# so results do not depend on the degree of parallelism.
PATH_CHUNK = 512

FIELD_KINDS = ('state', 'control', 'scalar', 'diffusion')


class SimulationError(VerificationError):
    module = 'forward'

    def __init__(self, message: str, path: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.step = step


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    space: TruncatedSpace
    m: int
    d: int
    family: CoefficientFamily
    control_set: ControlSet
    horizon: float
    x0: np.ndarray
    # recorded constants, not used by the numerics
    lipschitz: float = 1.0
    integrability: float = 0.0
    moment_order: int = 2

    def __post_init__(self):
        if not self.horizon > 0:
            raise DimensionError(f"horizon must be positive, got {self.horizon}", module='forward')
        if self.m < 1 or self.d < 1:
            raise DimensionError(f"dims positive: m={self.m}, d={self.d}", module='forward')
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if x0.size != self.space.n:
            raise DimensionError(f"x0 must have length {self.space.n}", module='forward')
        object.__setattr__(self, 'x0', x0)
        if (self.family.n, self.family.m, self.family.d) != (self.space.n, self.m, self.d):
            raise DimensionError("coefficient family dimensions do not match the problem", module='forward')
        if self.control_set.d != self.d:
            raise DimensionError("control set dimension does not match d", module='forward')

    @property
    def n(self) -> int:
        return self.space.n


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """Brownian increments of shape (P, N, m), reproducible per (seed, path, step)."""
    increments: np.ndarray
    horizon: float
    master_seed: int

    @property
    def P(self) -> int:
        return self.increments.shape[0]

    @property
    def N(self) -> int:
        return self.increments.shape[1]

    @property
    def m(self) -> int:
        return self.increments.shape[2]

    @property
    def dt(self) -> float:
        return self.horizon / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.N + 1)

    @classmethod
    def generate(cls, paths: int, steps: int, m: int, horizon: float, master_seed: int,
                 workers: int = 1) -> 'NoiseEnsemble':
        if paths < 1 or steps < 1 or m < 1:
            raise DimensionError(f"dims positive: P={paths}, N={steps}, m={m}", module='forward')
        dt = horizon / steps

        def block(sl: slice) -> np.ndarray:
            return np.stack([_path_increments(master_seed, p, steps, m, dt)
                             for p in range(sl.start, sl.stop)])

        increments = np.concatenate(run_chunked(block, paths, workers), axis=0)
        logger.info(f"Ruido generado: P={paths}, N={steps}, m={m}, semilla={master_seed}")
        return cls(increments=increments, horizon=float(horizon), master_seed=int(master_seed))


def _path_increments(master_seed: int, path: int, steps: int, m: int, dt: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path),)))
    return rng.standard_normal((steps, m)) * np.sqrt(dt)


def run_chunked(fn: Callable[[slice], np.ndarray], paths: int, workers: int = 1) -> List:
    slices = [slice(s, min(s + PATH_CHUNK, paths)) for s in range(0, paths, PATH_CHUNK)]
    if workers <= 1 or len(slices) == 1:
        return [fn(sl) for sl in slices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, slices))


@dataclass(frozen=True, eq=False)
class AdaptedField:
    """
    Values per (path, step). States carry N+1 steps, controls and diffusions N.
    Fields are only produced by the simulators or from deterministic data, which
    keeps the value at step k a function of increments with index < k.
    """
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise DimensionError(f"unknown field kind '{self.kind}'", module='forward')
        if np.ndim(self.values) < 2:
            raise DimensionError("fields need (path, step) axes", module='forward')

    @property
    def P(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]

    def at(self, k: int) -> np.ndarray:
        return self.values[:, k]


class OpenLoopControl:
    """Deterministic piecewise-constant control, table of shape (N, d)."""

    def __init__(self, table):
        self.table = np.atleast_2d(np.asarray(table, dtype=float))

    def value(self, k: int, t: float, x: np.ndarray, paths: slice) -> np.ndarray:
        return np.broadcast_to(self.table[k], (x.shape[0], self.table.shape[1])).copy()


class FeedbackControl:
    """u_k = policy(k, t_k, x_k) evaluated on the current state batch."""

    def __init__(self, policy: Callable[[int, float, np.ndarray], np.ndarray], name: str = 'feedback'):
        self.policy = policy
        self.name = name

    def value(self, k: int, t: float, x: np.ndarray, paths: slice) -> np.ndarray:
        return np.asarray(self.policy(k, t, x), dtype=float)


class PerturbedControl:
    """base + offset, with offset a d-vector, an (N, d) table or a control field."""

    def __init__(self, base, offset):
        self.base = base
        self.offset = offset

    def value(self, k: int, t: float, x: np.ndarray, paths: slice) -> np.ndarray:
        return control_at(self.base, k, t, x, paths) + _offset_at(self.offset, k, x.shape[0], paths)


Control = Union[AdaptedField, OpenLoopControl, FeedbackControl, PerturbedControl]


def _offset_at(offset, k: int, rows: int, paths: slice) -> np.ndarray:
    if isinstance(offset, AdaptedField):
        return offset.values[paths, k]
    offset = np.asarray(offset, dtype=float)
    if offset.ndim == 1:
        return np.broadcast_to(offset, (rows, offset.size))
    if offset.ndim == 2:
        return np.broadcast_to(offset[k], (rows, offset.shape[1]))
    return offset[paths, k]


def control_at(control: Control, k: int, t: float, x: np.ndarray, paths: slice) -> np.ndarray:
    if isinstance(control, AdaptedField):
        return control.values[paths, k]
    if isinstance(control, np.ndarray):
        return _offset_at(control, k, x.shape[0], paths)
    return control.value(k, t, x, paths)


def as_control_field(v, P: int, N: int, d: int) -> np.ndarray:
    """Normalize a direction (d-vector, (N, d) table, (P, N, d) array or field) to (P, N, d)."""
    if isinstance(v, AdaptedField):
        values = v.values
    elif isinstance(v, OpenLoopControl):
        values = v.table
    else:
        values = np.asarray(v, dtype=float)
    if values.ndim == 1:
        values = np.broadcast_to(values, (N, values.size))
    if values.ndim == 2:
        values = np.broadcast_to(values, (P,) + values.shape)
    if values.shape != (P, N, d):
        raise DimensionError(f"control field of shape {(P, N, d)} expected, got {values.shape}",
                             module='forward')
    return values


def _check_finite(values: np.ndarray, k: int, paths: slice, what: str):
    finite = np.all(np.isfinite(values.reshape(values.shape[0], -1)), axis=1)
    if not np.all(finite):
        path = paths.start + int(np.argmin(finite))
        raise SimulationError(f"{what} no finito en la trayectoria {path}, paso {k}", path=path, step=k)


def simulate_pair(spec: ProblemSpec, control: Control, noise: NoiseEnsemble,
                  workers: int = 1) -> Tuple[AdaptedField, AdaptedField]:
    """
    Exponential Euler mild-solution scheme
        x_{k+1} = S(dt) [x_k + a(t_k, x_k, u_k) dt + b(t_k, x_k, u_k) dW_k]
    Returns the state field (N+1 steps) and the realized control field (N steps).
    """
    N, dt = noise.N, noise.dt
    S = spec.space.semigroup_diagonal(dt)
    if noise.m != spec.m:
        raise DimensionError(f"noise has m={noise.m}, problem m={spec.m}", module='forward')

    def block(sl: slice):
        rows = sl.stop - sl.start
        x = np.empty((rows, N + 1, spec.n))
        u = np.empty((rows, N, spec.d))
        x[:, 0] = spec.x0
        dW = noise.increments[sl]
        with np.errstate(over='ignore', invalid='ignore'):
            for k in range(N):
                t = k * dt
                u_k = control_at(control, k, t, x[:, k], sl)
                _check_finite(u_k, k, sl, 'control')
                u[:, k] = u_k
                co = spec.family.evaluate(t, x[:, k], u_k, order=0)
                incr = x[:, k] + co['a'] * dt + np.einsum('pij,pj->pi', co['b'], dW[:, k])
                x[:, k + 1] = S * incr
                _check_finite(x[:, k + 1], k, sl, 'estado')
        return x, u

    blocks = run_chunked(block, noise.P, workers)
    states = np.concatenate([b[0] for b in blocks], axis=0)
    controls = np.concatenate([b[1] for b in blocks], axis=0)
    logger.info(f"Estado simulado: P={noise.P}, N={N}, sup E|x|^2^(1/2)={sup_sample_norm(states):.4f}")
    return AdaptedField('state', states), AdaptedField('control', controls)


def simulate_state(spec: ProblemSpec, control: Control, noise: NoiseEnsemble,
                   workers: int = 1) -> AdaptedField:
    return simulate_pair(spec, control, noise, workers)[0]


def path_costs(spec: ProblemSpec, states: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    """Per-path sum_k f(t_k, x_k, u_k) dt + g(x_N)."""
    N = controls.shape[1]
    total = np.zeros(states.shape[0])
    for k in range(N):
        total += spec.family.evaluate(k * dt, states[:, k], controls[:, k], order=0)['f'] * dt
    total += spec.family.terminal(states[:, N], order=0)['g']
    return total


def mean_and_stderr(samples: np.ndarray) -> Tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    mean = float(np.mean(samples))
    if samples.size < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / np.sqrt(samples.size))


def evaluate_cost(spec: ProblemSpec, control: Control, noise: NoiseEnsemble,
                  workers: int = 1) -> Tuple[float, float]:
    """Sample mean of the cost functional and its standard error."""
    states, controls = simulate_pair(spec, control, noise, workers)
    value, stderr = mean_and_stderr(path_costs(spec, states.values, controls.values, noise.dt))
    logger.info(f"Coste J = {value:.6f} ± {stderr:.2e}")
    return value, stderr


def sup_sample_norm(values: np.ndarray) -> float:
    """sup over steps of the sample L2 norm (E|.|^2)^(1/2)."""
    values = np.asarray(values, dtype=float)
    sq = values.reshape(values.shape[0], values.shape[1], -1) ** 2
    return float(np.sqrt(sq.sum(axis=2).mean(axis=0)).max())


def _first_variation_step(co: Dict, y: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    drift = np.einsum('pik,pk->pi', co['a_x'], y) + np.einsum('pik,pk->pi', co['a_u'], v)
    diff = np.einsum('pijk,pk->pij', co['b_x'], y) + np.einsum('pijk,pk->pij', co['b_u'], v)
    return drift, diff


def simulate_first_variation(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, v,
                             noise: NoiseEnsemble) -> AdaptedField:
    """
    y1 with drift a_x y1 + a_u v and diffusion b_x y1 + b_u v, y1(0) = 0, on the same noise.
    """
    P, N, dt = noise.P, noise.N, noise.dt
    S = spec.space.semigroup_diagonal(dt)
    v = as_control_field(v, P, N, spec.d)
    y = np.zeros((P, N + 1, spec.n))
    for k in range(N):
        co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=1)
        drift, diff = _first_variation_step(co, y[:, k], v[:, k])
        y[:, k + 1] = S * (y[:, k] + drift * dt + np.einsum('pij,pj->pi', diff, noise.increments[:, k]))
        _check_finite(y[:, k + 1], k, slice(0, P), 'variación de primer orden')
    logger.info(f"Primera variación: sup E|y1|^2^(1/2)={sup_sample_norm(y):.4e}")
    return AdaptedField('state', y)


def simulate_second_variation(spec: ProblemSpec, xbar: AdaptedField, ubar: AdaptedField, v, h,
                              y1: AdaptedField, noise: NoiseEnsemble) -> AdaptedField:
    """
    y2 with drift a_x y2 + 2 a_u h + a_xx(y1,y1) + 2 a_xu(y1,v) + a_uu(v,v)
    and the analogous diffusion, y2(0) = 0.
    """
    P, N, dt = noise.P, noise.N, noise.dt
    S = spec.space.semigroup_diagonal(dt)
    spec.family.require(2)
    v = as_control_field(v, P, N, spec.d)
    h = as_control_field(h, P, N, spec.d)
    y2 = np.zeros((P, N + 1, spec.n))
    for k in range(N):
        co = spec.family.evaluate(k * dt, xbar.values[:, k], ubar.values[:, k], order=2)
        y1k, vk, hk = y1.values[:, k], v[:, k], h[:, k]
        drift, diff = _first_variation_step(co, y2[:, k], 2.0 * hk)
        drift = (drift
                 + np.einsum('pikl,pk,pl->pi', co['a_xx'], y1k, y1k)
                 + 2.0 * np.einsum('pikl,pk,pl->pi', co['a_xu'], y1k, vk)
                 + np.einsum('pikl,pk,pl->pi', co['a_uu'], vk, vk))
        diff = (diff
                + np.einsum('pijkl,pk,pl->pij', co['b_xx'], y1k, y1k)
                + 2.0 * np.einsum('pijkl,pk,pl->pij', co['b_xu'], y1k, vk)
                + np.einsum('pijkl,pk,pl->pij', co['b_uu'], vk, vk))
        y2[:, k + 1] = S * (y2[:, k] + drift * dt + np.einsum('pij,pj->pi', diff, noise.increments[:, k]))
        _check_finite(y2[:, k + 1], k, slice(0, P), 'variación de segundo orden')
    logger.info(f"Segunda variación: sup E|y2|^2^(1/2)={sup_sample_norm(y2):.4e}")
    return AdaptedField('state', y2)


def perturbed_field(ubar: AdaptedField, v, h, eps: float) -> AdaptedField:
    """Open-loop control field u + eps v + eps^2 h."""
    P, N, d = ubar.values.shape
    values = ubar.values + eps * as_control_field(v, P, N, d)
    if h is not None:
        values = values + eps ** 2 * as_control_field(h, P, N, d)
    return AdaptedField('control', values)


def expansion_residuals(spec: ProblemSpec, ubar, v, h, eps_ladder: Sequence[float],
                        noise: NoiseEnsemble) -> pd.DataFrame:
    """
    For each eps: sup_k of the sample L2 norms of
        r1 = dx/eps - y1,   r2 = (dx - eps y1)/eps^2 - y2/2
    where dx is the state increment under u + eps v + eps^2 h on common noise.
    `floor_r1`/`floor_r2` give the roundoff level below which halving is not expected to help.
    """
    eps_ladder = [float(e) for e in eps_ladder]
    if any(e <= 0 for e in eps_ladder) or any(a <= b for a, b in zip(eps_ladder, eps_ladder[1:])):
        raise DimensionError("eps ladder must be positive and decreasing", module='forward')
    h = np.zeros(spec.d) if h is None else h
    xbar, ubar = simulate_pair(spec, ubar, noise)
    y1 = simulate_first_variation(spec, xbar, ubar, v, noise)
    y2 = simulate_second_variation(spec, xbar, ubar, v, h, y1, noise)
    scale = np.finfo(float).eps * (1.0 + np.abs(xbar.values).max()) * np.sqrt(noise.N)
    rows = []
    for eps in eps_ladder:
        x_eps = simulate_state(spec, perturbed_field(ubar, v, h, eps), noise)
        dx = x_eps.values - xbar.values
        r1 = dx / eps - y1.values
        r2 = (dx - eps * y1.values) / eps ** 2 - 0.5 * y2.values
        rows.append({
            'eps': eps,
            'r1': sup_sample_norm(r1),
            'r2': sup_sample_norm(r2),
            'floor_r1': scale / eps,
            'floor_r2': scale / eps ** 2,
        })
    table = pd.DataFrame(rows, columns=['eps', 'r1', 'r2', 'floor_r1', 'floor_r2'])
    logger.info(f"Residuos de expansión: r1 {table['r1'].iloc[0]:.2e} -> {table['r1'].iloc[-1]:.2e}, "
                f"r2 {table['r2'].iloc[0]:.2e} -> {table['r2'].iloc[-1]:.2e}")
    return table


def stability_profile(states: AdaptedField) -> float:
    """sup_k (E|x_k|^2)^(1/2)."""
    return sup_sample_norm(states.values)


def lipschitz_constant(spec: ProblemSpec, u, u_tilde, noise: NoiseEnsemble) -> Dict[str, float]:
    """
    Empirical continuity constant: sup_k (E|x - x~|^2)^(1/2) divided by
    (E sum_k |u - u~|^2 dt)^(1/2), both runs on the same noise.
    """
    P, N, d = noise.P, noise.N, spec.d
    u = AdaptedField('control', np.array(as_control_field(u, P, N, d)))
    u_tilde = AdaptedField('control', np.array(as_control_field(u_tilde, P, N, d)))
    x = simulate_state(spec, u, noise)
    x_tilde = simulate_state(spec, u_tilde, noise)
    state_gap = sup_sample_norm(x.values - x_tilde.values)
    control_gap = float(np.sqrt(np.mean(np.sum((u.values - u_tilde.values) ** 2, axis=(1, 2)) * noise.dt)))
    constant = state_gap / control_gap if control_gap > 0 else 0.0
    logger.info(f"Constante de Lipschitz empírica: {constant:.4f}")
    return {'state_gap': state_gap, 'control_gap': control_gap, 'constant': constant}
