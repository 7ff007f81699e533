"""Constant-velocity Kalman filter forecaster.

State ``(x, y, vx, vy)`` with a discrete white-noise-acceleration process
model: acceleration variance ``q`` per axis, isotropic measurement variance
``r``.  Filtering is vectorized over any leading track axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError
from .forecast import MixtureForecast
from .losses import horizon_step, mean_nll

DT = 0.2
DEFAULT_Q = 1.0
DEFAULT_R = 0.01
Q_GRID = tuple(np.logspace(-3, 2, 11))
R_GRID = tuple(np.logspace(-4, 0, 9))


@dataclass
class CVState:
    mean: np.ndarray  # [..., 4]
    cov: np.ndarray  # [..., 4, 4]


def _transition(dt: float = DT) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def _process_noise(q: float, dt: float = DT) -> np.ndarray:
    g = np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt**2]])
    Q = np.zeros((4, 4))
    for axis in (0, 1):
        idx = np.ix_([axis, axis + 2], [axis, axis + 2])
        Q[idx] = q * g
    return Q


H = np.hstack([np.eye(2), np.zeros((2, 2))])


def cv_filter(history: np.ndarray, q: float, r: float, return_nis: bool = False):
    """Filter ``[..., n_hist, 2]`` positions; returns the state at the last sample.

    The state is initialized from the first two samples.  With
    ``return_nis`` also returns normalized innovations squared
    ``[..., n_hist - 2]`` for the remaining updates.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.shape[-2] < 2:
        raise UsageError("constant-velocity filter needs at least 2 history samples")
    batch = history.shape[:-2]
    F = _transition()
    Q = _process_noise(q)
    R = r * np.eye(2)
    mean = np.zeros(batch + (4,))
    mean[..., :2] = history[..., 1, :]
    mean[..., 2:] = (history[..., 1, :] - history[..., 0, :]) / DT
    P0 = np.zeros((4, 4))
    P0[0, 0] = P0[1, 1] = r
    P0[0, 2] = P0[2, 0] = P0[1, 3] = P0[3, 1] = r / DT
    P0[2, 2] = P0[3, 3] = 2 * r / DT**2
    cov = np.broadcast_to(P0, batch + (4, 4)).copy()
    nis = []
    for k in range(2, history.shape[-2]):
        mean = mean @ F.T
        cov = F @ cov @ F.T + Q
        S = H @ cov @ H.T + R
        det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
        if np.any(det <= 0) or not np.all(np.isfinite(det)):
            raise NumericError("singular innovation covariance in constant-velocity filter")
        S_inv = np.linalg.inv(S)
        innov = history[..., k, :] - mean[..., :2]
        if return_nis:
            nis.append(np.einsum("...i,...ij,...j->...", innov, S_inv, innov))
        K = cov @ H.T @ S_inv
        mean = mean + np.einsum("...ij,...j->...i", K, innov)
        cov = cov - K @ H @ cov
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    state = CVState(mean, cov)
    if return_nis:
        return state, np.stack(nis, axis=-1) if nis else np.zeros(batch + (0,))
    return state


def cv_filter_forecast(history: np.ndarray, n_pred: int, q: float = DEFAULT_Q, r: float = DEFAULT_R) -> MixtureForecast:
    """Filter then predict open-loop; a single-component mixture per step."""
    state = cv_filter(history, q, r)
    F = _transition()
    Q = _process_noise(q)
    mean, cov = state.mean, state.cov
    batch = mean.shape[:-1]
    means = np.empty(batch + (n_pred, 1, 2))
    sigma = np.empty(batch + (n_pred, 1, 2))
    rho = np.empty(batch + (n_pred, 1))
    for k in range(n_pred):
        mean = mean @ F.T
        cov = F @ cov @ F.T + Q
        means[..., k, 0, :] = mean[..., :2]
        sx = np.sqrt(cov[..., 0, 0])
        sy = np.sqrt(cov[..., 1, 1])
        sigma[..., k, 0, 0] = sx
        sigma[..., k, 0, 1] = sy
        rho[..., k, 0] = cov[..., 0, 1] / (sx * sy)
    return MixtureForecast(means, sigma, rho, np.ones(batch + (n_pred, 1)))


def tune_cv(
    histories: np.ndarray,
    futures: np.ndarray,
    q_grid=Q_GRID,
    r_grid=R_GRID,
    horizon_s: float = 5,
) -> tuple[float, float]:
    """Grid search for ``(q, r)`` minimizing mean NLL at ``horizon_s``.

    ``histories``/``futures`` are flat ``[N, n_hist, 2]`` / ``[N, n_pred, 2]``.
    Ties resolve to the first grid point in ``(q, r)`` order.
    """
    if len(histories) == 0:
        raise UsageError("cannot tune the constant-velocity baseline on an empty split")
    step = min(horizon_step(horizon_s), futures.shape[1])
    best = None
    for q in q_grid:
        for r in r_grid:
            fc = cv_filter_forecast(histories, step, q, r)
            score = mean_nll(fc, futures[:, :step], step)
            if best is None or score < best[0]:
                best = (score, float(q), float(r))
    return best[1], best[2]


class CVForecaster:
    """Window-level forecaster with the same call shape as the model's."""

    def __init__(self, q: float = DEFAULT_Q, r: float = DEFAULT_R):
        self.q = q
        self.r = r

    def __call__(self, histories: np.ndarray, n_pred: int) -> MixtureForecast:
        return cv_filter_forecast(histories, n_pred, self.q, self.r)

    def to_dict(self) -> dict:
        return {"kind": "cv", "q": self.q, "r": self.r}
