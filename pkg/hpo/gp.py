"""
Gaussian-process surrogate over the unit hypercube.

Kernel: amplitude * Matern-5/2 with one length-scale per dimension, plus an
optional white-noise term for noisy training objectives. Outputs are
standardized before fitting; kernel hyperparameters are point estimates from
a multi-start maximization of the log marginal likelihood.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel

import config

logger = logging.getLogger(__name__)

JITTER = 1e-8
MAX_JITTER = 1e-4
LENGTH_SCALE_BOUNDS = (1e-2, 1e2)
AMPLITUDE_BOUNDS = (1e-3, 1e3)


def default_kernel(dims: int, noise: bool = False):
    kernel = ConstantKernel(1.0, AMPLITUDE_BOUNDS) * Matern(
        length_scale=np.full(dims, 0.5), length_scale_bounds=LENGTH_SCALE_BOUNDS, nu=2.5)
    if noise:
        kernel = kernel + WhiteKernel(1e-3, (1e-8, 1e-1))
    return kernel


@dataclass
class GPSurrogate:
    regressor: GaussianProcessRegressor
    X: np.ndarray
    y: np.ndarray
    y_mean: float
    y_std: float

    @property
    def kernel(self):
        return self.regressor.kernel_

    @property
    def length_scales(self) -> np.ndarray:
        for param, value in self.kernel.get_params().items():
            if param.endswith("length_scale") and not param.endswith("bounds"):
                return np.atleast_1d(value)
        raise AttributeError("kernel has no length-scale")

    def predict(self, U: np.ndarray) -> tuple:
        """Posterior (mean, variance) in the original output units."""
        U = np.atleast_2d(U)
        mean, std = self.regressor.predict(U, return_std=True)
        variance = np.maximum(std, 0.0) ** 2 * self.y_std ** 2
        return mean * self.y_std + self.y_mean, variance

    def with_fantasies(self, pending: np.ndarray) -> "GPSurrogate":
        """Condition on pending points observed at the posterior mean, kernel held fixed."""
        pending = np.atleast_2d(pending)
        if pending.size == 0:
            return self
        mean, _ = self.predict(pending)
        X = np.vstack([self.X, pending])
        y = np.concatenate([self.y, mean])
        regressor = GaussianProcessRegressor(kernel=self.kernel, alpha=self.regressor.alpha, optimizer=None,
                                             normalize_y=False)
        regressor.fit(X, (y - self.y_mean) / self.y_std)
        return GPSurrogate(regressor, X, y, self.y_mean, self.y_std)


def gp_fit(X: np.ndarray, y: np.ndarray, seed: int = 0, noise: bool = False,
           restarts: int = config.HPO_RESTARTS) -> GPSurrogate:
    """
    Fit the surrogate to unit-cube inputs X and observations y.

    Identical outputs leave nothing to learn from, so the kernel keeps its
    prior defaults. Duplicate inputs are handled by the diagonal jitter, which
    grows tenfold on each failed Cholesky factorization.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(X) < 2:
        raise ValueError(f"gp_fit needs at least 2 observations, got {len(X)}")
    y_mean = float(y.mean())
    y_std = float(y.std())
    degenerate = y_std < 1e-12
    if degenerate:
        y_std = 1.0
    target = (y - y_mean) / y_std

    alpha = JITTER
    while True:
        regressor = GaussianProcessRegressor(
            kernel=default_kernel(X.shape[1], noise), alpha=alpha, normalize_y=False,
            optimizer=None if degenerate else "fmin_l_bfgs_b", n_restarts_optimizer=restarts, random_state=seed)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                regressor.fit(X, target)
            break
        except np.linalg.LinAlgError:
            if alpha >= MAX_JITTER:
                raise
            alpha *= 10
            logger.debug("Cholesky failed; retrying with jitter %g", alpha)
    logger.debug("GP fit on %d points: %s", len(X), regressor.kernel_)
    return GPSurrogate(regressor, X, y, y_mean, y_std)


def gp_predict(surrogate: GPSurrogate, point: np.ndarray) -> tuple:
    """(mean, variance) at a single unit-cube point."""
    mean, variance = surrogate.predict(np.asarray(point, dtype=float).reshape(1, -1))
    return float(mean[0]), float(variance[0])
