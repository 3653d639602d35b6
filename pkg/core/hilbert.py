"""
Truncated Hilbert-space kernel: diagonal generator, semigroup and Hilbert-Schmidt pairing
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Union
import logging

import numpy as np

logger = logging.getLogger(__name__)


class VerificationError(Exception):
    """
    Base error of the toolkit. `module` names the component that raised it.
    """
    module = 'core'

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module


class DimensionError(VerificationError):
    module = 'hilbert'


@dataclass(frozen=True)
class TruncatedSpace:
    """
    First `n` modes of the state space with the spectrum of A on them.
    """
    n: int
    eigenvalues: tuple

    def __post_init__(self):
        if int(self.n) < 1:
            raise DimensionError(f"dims positive: n={self.n}")
        values = tuple(float(v) for v in self.eigenvalues)
        if len(values) != self.n:
            raise DimensionError(f"se esperaban {self.n} autovalores, llegaron {len(values)}")
        if not all(np.isfinite(values)):
            raise DimensionError("eigenvalues must be finite")
        object.__setattr__(self, 'eigenvalues', values)

    @classmethod
    def dirichlet(cls, n: int) -> 'TruncatedSpace':
        """Dirichlet Laplacian on (0,1): lambda_k = -k^2 pi^2."""
        k = np.arange(1, int(n) + 1, dtype=float)
        return cls(n=int(n), eigenvalues=tuple(-(k * np.pi) ** 2))

    @property
    def spectrum(self) -> np.ndarray:
        return np.asarray(self.eigenvalues, dtype=float)

    def semigroup_diagonal(self, t: float) -> np.ndarray:
        if t < 0:
            raise DimensionError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(self.spectrum * t)


@dataclass(frozen=True)
class HSOperator:
    """Truncated Hilbert-Schmidt operator from R^m into the state space."""
    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim != 2:
            raise DimensionError(f"HS operator must be an n x m array, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise DimensionError("HS operator entries must be finite")
        object.__setattr__(self, 'entries', entries)

    @property
    def m(self) -> int:
        return self.entries.shape[1]

    def norm(self) -> float:
        return float(np.sqrt(hs_inner(self, self)))


ArrayLike = Union[np.ndarray, Sequence[float]]


def semigroup_apply(space: TruncatedSpace, t: float, x: ArrayLike) -> np.ndarray:
    """
    Apply S(t) = exp(tA) to x. Works on the last axis so path batches pass through.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (space.n,):
        raise DimensionError(f"state of length {space.n} expected, got shape {x.shape}")
    return space.semigroup_diagonal(t) * x


def hs_inner(w1, w2) -> Union[float, np.ndarray]:
    """
    Frobenius pairing <w1, w2> over the last two axes.

    Accepts HSOperator instances or raw arrays of shape (..., n, m).
    """
    a = w1.entries if isinstance(w1, HSOperator) else np.asarray(w1, dtype=float)
    b = w2.entries if isinstance(w2, HSOperator) else np.asarray(w2, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"HS shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise DimensionError(f"HS operators need two axes, got shape {a.shape}")
    value = np.einsum('...ij,...ij->...', a, b)
    if np.ndim(value) == 0:
        return float(value)
    return value


def symmetrize(mats: np.ndarray) -> np.ndarray:
    """(M + M^T)/2 on the last two axes."""
    return 0.5 * (mats + np.swapaxes(mats, -1, -2))
