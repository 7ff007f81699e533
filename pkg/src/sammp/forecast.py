"""Numpy-side Gaussian-mixture forecasts and their plot-ready exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import mixture_nll


@dataclass
class MixtureForecast:
    """Per-step bivariate Gaussian mixtures.

    Arrays share leading axes ``[...]`` (usually vehicles, or windows and
    vehicles) followed by the step axis and the component axis:

    - ``mean``: ``[..., n_pred, n_mix, 2]`` meters
    - ``sigma``: ``[..., n_pred, n_mix, 2]`` meters
    - ``rho``: ``[..., n_pred, n_mix]``
    - ``weights``: ``[..., n_pred, n_mix]``
    """

    mean: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    weights: np.ndarray

    @property
    def n_pred(self) -> int:
        return self.weights.shape[-2]

    @property
    def n_mix(self) -> int:
        return self.weights.shape[-1]

    def __getitem__(self, index) -> MixtureForecast:
        return MixtureForecast(self.mean[index], self.sigma[index], self.rho[index], self.weights[index])

    def reshape_leading(self, shape: tuple[int, ...]) -> MixtureForecast:
        tail = self.weights.shape[-2:]
        return MixtureForecast(
            self.mean.reshape(shape + tail + (2,)),
            self.sigma.reshape(shape + tail + (2,)),
            self.rho.reshape(shape + tail),
            self.weights.reshape(shape + tail),
        )

    @staticmethod
    def concatenate(items: list[MixtureForecast]) -> MixtureForecast:
        return MixtureForecast(
            np.concatenate([f.mean for f in items]),
            np.concatenate([f.sigma for f in items]),
            np.concatenate([f.rho for f in items]),
            np.concatenate([f.weights for f in items]),
        )

    def covariance(self) -> np.ndarray:
        sx, sy = self.sigma[..., 0], self.sigma[..., 1]
        cov = np.empty(self.rho.shape + (2, 2))
        cov[..., 0, 0] = sx * sx
        cov[..., 1, 1] = sy * sy
        cov[..., 0, 1] = cov[..., 1, 0] = self.rho * sx * sy
        return cov

    def log_density(self, points: np.ndarray) -> np.ndarray:
        """Mixture log-density at ``points`` ``[..., n_pred, 2]``."""
        d = points[..., None, :] - self.mean
        return -mixture_nll(d, self.sigma[..., 0], self.sigma[..., 1], self.rho, self.weights)


def forecast_to_json(forecast: MixtureForecast, vehicle_ids: list | None = None) -> list[dict]:
    """Per-vehicle list of steps, each a list of ``[x, y, sx, sy, rho, p]``."""
    if forecast.weights.ndim != 3:
        raise ValueError("forecast export expects one window: [n_veh, n_pred, n_mix]")
    n_veh = forecast.weights.shape[0]
    ids = vehicle_ids if vehicle_ids is not None else list(range(n_veh))
    out = []
    for v in range(n_veh):
        steps = []
        for k in range(forecast.n_pred):
            comps = []
            for m in range(forecast.n_mix):
                mx, my = forecast.mean[v, k, m]
                sx, sy = forecast.sigma[v, k, m]
                comps.append([float(mx), float(my), float(sx), float(sy),
                              float(forecast.rho[v, k, m]), float(forecast.weights[v, k, m])])
            steps.append(comps)
        out.append({"vehicle_id": ids[v], "steps": steps})
    return out


def forecast_from_json(records: list[dict]) -> MixtureForecast:
    arr = np.array([r["steps"] for r in records], dtype=np.float64)
    return MixtureForecast(arr[..., 0:2], arr[..., 2:4], arr[..., 4], arr[..., 5])


def write_density_grid(
    path: str | Path,
    forecast: MixtureForecast,
    vehicle: int,
    steps: list[int],
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    resolution: tuple[int, int] = (121, 41),
) -> None:
    """Write log10 mixture densities of one vehicle on a regular grid.

    Columns: ``step,x,y,log10_density``; steps are 1-based forecast ticks.
    """
    xs = np.linspace(*x_range, resolution[0])
    ys = np.linspace(*y_range, resolution[1])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "log10_density"])
        for step in steps:
            f = forecast[vehicle, step - 1]
            d = pts[:, None, :] - f.mean[None]
            nll = mixture_nll(d, f.sigma[None, :, 0], f.sigma[None, :, 1], f.rho[None], f.weights[None])
            logd = -nll / np.log(10.0)
            for (x, y), v in zip(pts, logd):
                w.writerow([step, f"{x:.3f}", f"{y:.3f}", f"{v:.6f}"])
