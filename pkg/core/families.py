"""
Coefficient families (drift a, diffusion b, running cost f, terminal cost g) and their registry
"""
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np

from core.hilbert import DimensionError, VerificationError

logger = logging.getLogger(__name__)


class CapabilityError(VerificationError):
    module = 'families'


class UnknownFamilyError(VerificationError):
    module = 'families'


def _zeros(*shape) -> np.ndarray:
    return np.broadcast_to(np.zeros(1), shape)


class CoefficientFamily:
    """
    Base class. Subclasses declare PARAMETERS as name -> (shape symbols, default)
    where symbols are drawn from n, m, d and default is 'zeros' or 'identity'.

    evaluate() works on path batches: x has shape (P, n), u has shape (P, d).
    Derivative arrays use the layout
      a_x (P,n,n), a_u (P,n,d), b (P,n,m), b_x (P,n,m,n), b_u (P,n,m,d),
      a_xx (P,n,n,n), a_xu (P,n,n,d), a_uu (P,n,d,d), b_xx (P,n,m,n,n), ...
    where the trailing axes are the differentiation variables.
    """
    name = 'base'
    derivative_order = 0
    quadratic_in_u = False
    affine_in_control = False
    PARAMETERS: Dict[str, Tuple[Tuple[str, ...], str]] = {}
    SYMMETRIC: Tuple[str, ...] = ()

    def __init__(self, n: int, m: int, d: int, params: Optional[Dict] = None):
        self.n, self.m, self.d = int(n), int(m), int(d)
        params = dict(params or {})
        errors = self.check_params(self.n, self.m, self.d, params)
        if errors:
            raise DimensionError('; '.join(errors), module='families')
        self.params = {}
        for key, (symbols, default) in self.PARAMETERS.items():
            shape = self._shape(symbols, self.n, self.m, self.d)
            if key in params:
                value = np.asarray(params[key], dtype=float).reshape(shape)
            elif default == 'identity':
                value = np.eye(shape[0])
            else:
                value = np.zeros(shape)
            if key in self.SYMMETRIC:
                value = 0.5 * (value + value.T)
            self.params[key] = value
        logger.debug(f"Familia {self.name} construida (n={self.n}, m={self.m}, d={self.d})")

    @staticmethod
    def _shape(symbols: Tuple[str, ...], n: int, m: int, d: int) -> Tuple[int, ...]:
        sizes = {'n': n, 'm': m, 'd': d}
        return tuple(sizes[s] for s in symbols)

    @classmethod
    def check_params(cls, n: int, m: int, d: int, params: Dict) -> List[str]:
        """Return every problem found in `params` (empty list when valid)."""
        errors = []
        for key in params:
            if key not in cls.PARAMETERS:
                errors.append(f"parámetro desconocido '{key}' para la familia {cls.name}; "
                              f"válidos: {', '.join(sorted(cls.PARAMETERS))}")
        for key, (symbols, _) in cls.PARAMETERS.items():
            if key not in params:
                continue
            shape = cls._shape(symbols, n, m, d)
            try:
                value = np.asarray(params[key], dtype=float)
            except (TypeError, ValueError):
                errors.append(f"{key} debe ser numérico")
                continue
            if value.size != int(np.prod(shape)):
                errors.append(f"{key} debe tener forma {shape}, tiene {value.shape}")
            elif not np.all(np.isfinite(value)):
                errors.append(f"{key} debe ser finito")
        return errors

    def require(self, order: int):
        if order > self.derivative_order:
            raise CapabilityError(
                f"la familia '{self.name}' declara derivadas hasta orden {self.derivative_order}, "
                f"se pidieron de orden {order}")

    def _check_batch(self, x: np.ndarray, u: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.n:
            raise DimensionError(f"x must have shape (P, {self.n}), got {x.shape}")
        if u.ndim != 2 or u.shape[1] != self.d or u.shape[0] != x.shape[0]:
            raise DimensionError(f"u must have shape ({x.shape[0]}, {self.d}), got {u.shape}")

    def evaluate(self, t: float, x: np.ndarray, u: np.ndarray, order: int = 1) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def terminal(self, x: np.ndarray, order: int = 1) -> Dict[str, np.ndarray]:
        """g(x) = 1/2 x'Gx + g_lin'x by default."""
        self.require(order)
        G = self.params['G']
        lin = self.params.get('g_lin', np.zeros(self.n))
        out = {'g': 0.5 * np.einsum('pi,ij,pj->p', x, G, x) + x @ lin}
        if order >= 1:
            out['g_x'] = np.einsum('ij,pj->pi', G, x) + lin
        if order >= 2:
            out['g_xx'] = np.broadcast_to(G, (x.shape[0], self.n, self.n))
        return out

    def describe(self) -> Dict:
        return {
            'family': self.name,
            'derivative_order': self.derivative_order,
            'quadratic_in_u': self.quadratic_in_u,
            'affine_in_control': self.affine_in_control,
        }


class LQFamily(CoefficientFamily):
    """
    a = B u
    b[:, j] = sigma[:, j] + C_j x + D_j u
    f = 1/2 x'Mx + 1/2 u'Ru + q'x + s'u + c0
    g = 1/2 x'Gx + g_lin'x
    """
    name = 'lq'
    derivative_order = 2
    quadratic_in_u = True
    affine_in_control = True
    PARAMETERS = {
        'B': (('n', 'd'), 'zeros'),
        'C': (('m', 'n', 'n'), 'zeros'),
        'D': (('m', 'n', 'd'), 'zeros'),
        'sigma': (('n', 'm'), 'zeros'),
        'M': (('n', 'n'), 'zeros'),
        'R': (('d', 'd'), 'identity'),
        'G': (('n', 'n'), 'zeros'),
        'q': (('n',), 'zeros'),
        's': (('d',), 'zeros'),
        'c0': ((), 'zeros'),
        'g_lin': (('n',), 'zeros'),
    }
    SYMMETRIC = ('M', 'R', 'G')

    def evaluate(self, t, x, u, order=1):
        self.require(order)
        self._check_batch(x, u)
        p = self.params
        P, n, m, d = x.shape[0], self.n, self.m, self.d
        out = {
            'a': np.einsum('id,pd->pi', p['B'], u),
            'b': (p['sigma'][None]
                  + np.einsum('jil,pl->pij', p['C'], x)
                  + np.einsum('jil,pl->pij', p['D'], u)),
            'f': (0.5 * np.einsum('pi,ij,pj->p', x, p['M'], x)
                  + 0.5 * np.einsum('pk,kl,pl->p', u, p['R'], u)
                  + x @ p['q'] + u @ p['s'] + float(p['c0'])),
        }
        if order >= 1:
            out['a_x'] = _zeros(P, n, n)
            out['a_u'] = np.broadcast_to(p['B'], (P, n, d))
            out['b_x'] = np.broadcast_to(p['C'].transpose(1, 0, 2), (P, n, m, n))
            out['b_u'] = np.broadcast_to(p['D'].transpose(1, 0, 2), (P, n, m, d))
            out['f_x'] = np.einsum('ij,pj->pi', p['M'], x) + p['q']
            out['f_u'] = np.einsum('kl,pl->pk', p['R'], u) + p['s']
        if order >= 2:
            out['a_xx'] = _zeros(P, n, n, n)
            out['a_xu'] = _zeros(P, n, n, d)
            out['a_uu'] = _zeros(P, n, d, d)
            out['b_xx'] = _zeros(P, n, m, n, n)
            out['b_xu'] = _zeros(P, n, m, n, d)
            out['b_uu'] = _zeros(P, n, m, d, d)
            out['f_xx'] = np.broadcast_to(p['M'], (P, n, n))
            out['f_xu'] = _zeros(P, n, d)
            out['f_uu'] = np.broadcast_to(p['R'], (P, d, d))
        return out


class BilinearFamily(CoefficientFamily):
    """
    a = B u + alpha sin(x)
    b[i, j] = sigma[i, j] + beta x_i (W u)_j
    f = 1/2 x'Mx + 1/2 u'Ru + gamma sum(1 - cos x_i),  g = 1/2 x'Gx
    """
    name = 'bilinear'
    derivative_order = 2
    quadratic_in_u = True
    affine_in_control = True
    PARAMETERS = {
        'B': (('n', 'd'), 'zeros'),
        'alpha': ((), 'zeros'),
        'sigma': (('n', 'm'), 'zeros'),
        'beta': ((), 'zeros'),
        'W': (('m', 'd'), 'zeros'),
        'M': (('n', 'n'), 'zeros'),
        'R': (('d', 'd'), 'identity'),
        'gamma': ((), 'zeros'),
        'G': (('n', 'n'), 'zeros'),
    }
    SYMMETRIC = ('M', 'R', 'G')

    def evaluate(self, t, x, u, order=1):
        self.require(order)
        self._check_batch(x, u)
        p = self.params
        P, n, m, d = x.shape[0], self.n, self.m, self.d
        alpha, beta, gamma = float(p['alpha']), float(p['beta']), float(p['gamma'])
        eye = np.eye(n)
        wu = np.einsum('jl,pl->pj', p['W'], u)
        sin_x, cos_x = np.sin(x), np.cos(x)
        out = {
            'a': np.einsum('id,pd->pi', p['B'], u) + alpha * sin_x,
            'b': p['sigma'][None] + beta * x[:, :, None] * wu[:, None, :],
            'f': (0.5 * np.einsum('pi,ij,pj->p', x, p['M'], x)
                  + 0.5 * np.einsum('pk,kl,pl->p', u, p['R'], u)
                  + gamma * np.sum(1.0 - cos_x, axis=1)),
        }
        if order >= 1:
            out['a_x'] = alpha * cos_x[:, :, None] * eye[None]
            out['a_u'] = np.broadcast_to(p['B'], (P, n, d))
            out['b_x'] = beta * eye[None, :, None, :] * wu[:, None, :, None]
            out['b_u'] = beta * x[:, :, None, None] * p['W'][None, None, :, :]
            out['f_x'] = np.einsum('ij,pj->pi', p['M'], x) + gamma * sin_x
            out['f_u'] = np.einsum('kl,pl->pk', p['R'], u)
        if order >= 2:
            a_xx = np.zeros((P, n, n, n))
            idx = np.arange(n)
            a_xx[:, idx, idx, idx] = -alpha * sin_x
            out['a_xx'] = a_xx
            out['a_xu'] = _zeros(P, n, n, d)
            out['a_uu'] = _zeros(P, n, d, d)
            out['b_xx'] = _zeros(P, n, m, n, n)
            b_xu = beta * eye[:, None, :, None] * p['W'][None, :, None, :]
            out['b_xu'] = np.broadcast_to(b_xu, (P, n, m, n, d))
            out['b_uu'] = _zeros(P, n, m, d, d)
            out['f_xx'] = p['M'][None] + gamma * cos_x[:, :, None] * eye[None]
            out['f_xu'] = _zeros(P, n, d)
            out['f_uu'] = np.broadcast_to(p['R'], (P, d, d))
        return out


class SaturatedFamily(CoefficientFamily):
    """
    a = B tanh(u), additive noise sigma, quadratic costs. First derivatives only.
    """
    name = 'saturated'
    derivative_order = 1
    PARAMETERS = {
        'B': (('n', 'd'), 'zeros'),
        'sigma': (('n', 'm'), 'zeros'),
        'M': (('n', 'n'), 'zeros'),
        'R': (('d', 'd'), 'identity'),
        'G': (('n', 'n'), 'zeros'),
    }
    SYMMETRIC = ('M', 'R', 'G')

    def evaluate(self, t, x, u, order=1):
        self.require(order)
        self._check_batch(x, u)
        p = self.params
        P, n, m, d = x.shape[0], self.n, self.m, self.d
        th = np.tanh(u)
        out = {
            'a': np.einsum('id,pd->pi', p['B'], th),
            'b': np.broadcast_to(p['sigma'], (P, n, m)),
            'f': (0.5 * np.einsum('pi,ij,pj->p', x, p['M'], x)
                  + 0.5 * np.einsum('pk,kl,pl->p', u, p['R'], u)),
        }
        if order >= 1:
            out['a_x'] = _zeros(P, n, n)
            out['a_u'] = p['B'][None] * (1.0 - th ** 2)[:, None, :]
            out['b_x'] = _zeros(P, n, m, n)
            out['b_u'] = _zeros(P, n, m, d)
            out['f_x'] = np.einsum('ij,pj->pi', p['M'], x)
            out['f_u'] = np.einsum('kl,pl->pk', p['R'], u)
        return out


FAMILIES = {
    'lq': LQFamily,
    'bilinear': BilinearFamily,
    'saturated': SaturatedFamily,
}


def get_family_class(name: str):
    if name not in FAMILIES:
        raise UnknownFamilyError(
            f"familia desconocida '{name}'; familias válidas: {', '.join(sorted(FAMILIES))}")
    return FAMILIES[name]


def build_family(name: str, n: int, m: int, d: int, params: Optional[Dict] = None) -> CoefficientFamily:
    family = get_family_class(name)(n, m, d, params)
    logger.info(f"Familia de coeficientes '{name}' lista: orden de derivadas {family.derivative_order}")
    return family


def hamiltonian_terms(co: Dict[str, np.ndarray], p: np.ndarray, q: np.ndarray,
                      order: int = 1) -> Dict[str, np.ndarray]:
    """
    H = <p, a> + <q, b>_HS - f and its derivatives, batched over paths.

    `co` is the output of CoefficientFamily.evaluate at the same order,
    p has shape (P, n) and q shape (P, n, m).
    """
    out = {'H': np.einsum('pi,pi->p', p, co['a']) + np.einsum('pij,pij->p', q, co['b']) - co['f']}
    if order >= 1:
        out['H_x'] = (np.einsum('pik,pi->pk', co['a_x'], p)
                      + np.einsum('pijk,pij->pk', co['b_x'], q) - co['f_x'])
        out['H_u'] = (np.einsum('pik,pi->pk', co['a_u'], p)
                      + np.einsum('pijk,pij->pk', co['b_u'], q) - co['f_u'])
    if order >= 2:
        for key in ('xx', 'xu', 'uu'):
            out['H_' + key] = (np.einsum('pikl,pi->pkl', co['a_' + key], p)
                               + np.einsum('pijkl,pij->pkl', co['b_' + key], q) - co['f_' + key])
    return out
