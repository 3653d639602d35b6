"""
Least-squares conditional expectations on polynomial state features
"""
from dataclasses import dataclass
import logging

import numpy as np
from sklearn.linear_model import Ridge
from sklearn.preprocessing import PolynomialFeatures, StandardScaler

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegressionConfig:
    degree: int = 2
    ridge: float = 1e-8
    condition_limit: float = 1e6
    fallback_ridge: float = 1e-3


class StepRegressor:
    """
    Design matrix for E[. | x_k] at one time step. Coordinates with no spread
    across paths are dropped before the polynomial expansion; with nothing left
    the projection is the sample mean.
    """

    def __init__(self, states: np.ndarray, config: RegressionConfig, step: int = -1):
        self.config = config
        self.paths = states.shape[0]
        spread = states.std(axis=0)
        varying = spread > 1e-12 * (1.0 + np.abs(states).max(initial=0.0))
        self.alpha = config.ridge
        self.condition = 1.0
        self.fallback = False
        if not np.any(varying) or self.paths < 2:
            self.design = None
            return
        poly = PolynomialFeatures(degree=config.degree, include_bias=False)
        features = poly.fit_transform(states[:, varying])
        self.design = StandardScaler().fit_transform(features)
        self.condition = float(np.linalg.cond(self.design))
        if not np.isfinite(self.condition) or self.condition > config.condition_limit \
                or self.paths <= self.design.shape[1]:
            self.fallback = True
            self.alpha = config.fallback_ridge * self.paths
            logger.warning(f"Regresión mal condicionada en el paso {step}: cond={self.condition:.3e}, "
                           f"se usa ridge={self.alpha:.2e}")

    def project(self, targets: np.ndarray) -> np.ndarray:
        """In-sample fitted values of each target column, same shape as `targets`."""
        flat = targets.reshape(self.paths, -1)
        if self.design is None:
            fitted = np.broadcast_to(flat.mean(axis=0), flat.shape)
        else:
            model = Ridge(alpha=self.alpha, fit_intercept=True, solver='cholesky')
            fitted = model.fit(self.design, flat).predict(self.design)
        return np.asarray(fitted, dtype=float).reshape(targets.shape)
