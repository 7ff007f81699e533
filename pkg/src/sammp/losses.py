"""Mixture negative log-likelihood and the forecast performance indicators.

Two implementations of the bivariate-Gaussian NLL live here: a plain numpy
one for evaluation and a graph one (``mixture_nll_tensor``) for training.
Metrics operate on a flat sample axis: one sample is one vehicle of one
window, with arrays shaped ``[N, n_pred, ...]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .errors import DomainError, UsageError

if TYPE_CHECKING:
    from .forecast import MixtureForecast

LOG_2PI = math.log(2.0 * math.pi)
MISS_THRESHOLD_M = 2.0
SAMPLE_RATE_HZ = 5
HORIZONS_S = (1, 2, 3, 4, 5)


def horizon_step(horizon_s: float) -> int:
    """1-based forecast tick for a horizon in seconds."""
    return int(round(horizon_s * SAMPLE_RATE_HZ))


def gaussian_nll(d, sigma_x, sigma_y, rho) -> np.ndarray:
    """NLL of error ``d`` (``[..., 2]``) under a zero-mean bivariate Gaussian."""
    d = np.asarray(d, dtype=np.float64)
    sx = np.asarray(sigma_x, dtype=np.float64)
    sy = np.asarray(sigma_y, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(sx <= 0) or np.any(sy <= 0):
        raise DomainError("standard deviations must be positive")
    if np.any(np.abs(rho) >= 1):
        raise DomainError("correlation must satisfy |rho| < 1")
    one_m_r2 = 1.0 - rho * rho
    zx = d[..., 0] / sx
    zy = d[..., 1] / sy
    maha = (zx * zx + zy * zy - 2.0 * rho * zx * zy) / one_m_r2
    return 0.5 * maha + LOG_2PI + np.log(sx) + np.log(sy) + 0.5 * np.log(one_m_r2)


def mixture_nll(d, sigma_x, sigma_y, rho, p) -> np.ndarray:
    """Mixture NLL over the last (component) axis.

    ``d`` is ``[..., n_mix, 2]`` with each component's own error; the other
    arrays are ``[..., n_mix]``.  Summation is done in log space with a max
    shift so confident far components do not underflow.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("mixture weights must be nonnegative")
    if np.any(p.sum(axis=-1) <= 0):
        raise DomainError("mixture weights are all zero")
    nll = gaussian_nll(d, sigma_x, sigma_y, rho)
    with np.errstate(divide="ignore"):
        a = np.log(p) - nll
    m = a.max(axis=-1, keepdims=True)
    return -(m[..., 0] + np.log(np.exp(a - m).sum(axis=-1)))


def mixture_nll_tensor(
    mean: ad.Tensor,
    sigma: ad.Tensor,
    rho: ad.Tensor,
    log_p: ad.Tensor,
    truth: np.ndarray,
) -> ad.Tensor:
    """Differentiable mixture NLL per step: ``[..., n_pred]``.

    ``mean``/``sigma`` are ``[..., n_pred, n_mix, 2]``, ``rho``/``log_p``
    ``[..., n_pred, n_mix]``, ``truth`` ``[..., n_pred, 2]``.
    """
    d = ad.sub(ad.Tensor(truth[..., None, :]), mean)
    z = ad.div(d, sigma)
    zx = ad.getitem(z, (Ellipsis, 0))
    zy = ad.getitem(z, (Ellipsis, 1))
    one_m_r2 = ad.sub(1.0, ad.square(rho))
    quad = ad.sub(ad.add(ad.square(zx), ad.square(zy)), ad.scale(ad.mul(rho, ad.mul(zx, zy)), 2.0))
    log_sigma = ad.tsum(ad.log(sigma), axis=-1)
    nll = ad.add(
        ad.add(ad.scale(ad.div(quad, one_m_r2), 0.5), log_sigma),
        ad.add(ad.scale(ad.log(one_m_r2), 0.5), LOG_2PI),
    )
    return ad.scale(ad.logsumexp(ad.sub(log_p, nll), axis=-1), -1.0)


# ---------------------------------------------------------------------------
# metrics


def _check_nonempty(truth: np.ndarray) -> None:
    if truth.shape[0] == 0:
        raise UsageError("metric over an empty sample set")


def select_most_probable(forecast: MixtureForecast, per_step: bool = False) -> np.ndarray:
    """Most probable trajectory ``[..., n_pred, 2]``.

    By default one component index is kept for the whole horizon: the one
    with the highest mean weight (ties go to the lowest index).  With
    ``per_step`` the argmax is taken independently at every step.
    """
    if per_step:
        idx = np.argmax(forecast.weights, axis=-1)
        return np.take_along_axis(forecast.mean, idx[..., None, None], axis=-2)[..., 0, :]
    idx = np.argmax(forecast.weights.mean(axis=-2), axis=-1)
    return np.take_along_axis(forecast.mean, idx[..., None, None, None], axis=-2)[..., 0, :]


def _errors_at(traj: np.ndarray, truth: np.ndarray, step: int) -> np.ndarray:
    d = truth[:, step - 1] - traj[:, step - 1]
    return np.sqrt((d * d).sum(axis=-1))


def mean_nll(forecast: MixtureForecast, truth: np.ndarray, step: int) -> float:
    """Average mixture NLL at 1-based tick ``step``."""
    _check_nonempty(truth)
    f = forecast[:, step - 1]
    d = truth[:, step - 1, None, :] - f.mean
    return float(np.mean(mixture_nll(d, f.sigma[..., 0], f.sigma[..., 1], f.rho, f.weights)))


def rmse(forecast: MixtureForecast, truth: np.ndarray, step: int, trajectory: np.ndarray | None = None) -> float:
    _check_nonempty(truth)
    traj = select_most_probable(forecast) if trajectory is None else trajectory
    e = _errors_at(traj, truth, step)
    return float(np.sqrt(np.mean(e * e)))


def fde(forecast: MixtureForecast, truth: np.ndarray, step: int, trajectory: np.ndarray | None = None) -> float:
    _check_nonempty(truth)
    traj = select_most_probable(forecast) if trajectory is None else trajectory
    return float(np.mean(_errors_at(traj, truth, step)))


def best_of_k_errors(forecast: MixtureForecast, truth: np.ndarray, step: int) -> np.ndarray:
    """Per-sample displacement of the closest component at ``step``."""
    d = truth[:, step - 1, None, :] - forecast.mean[:, step - 1]
    return np.sqrt((d * d).sum(axis=-1)).min(axis=-1)


def miss_rate(forecast: MixtureForecast, truth: np.ndarray, step: int) -> float:
    """Fraction of samples whose best component misses by strictly more than 2 m."""
    _check_nonempty(truth)
    return float(np.mean(best_of_k_errors(forecast, truth, step) > MISS_THRESHOLD_M))


def most_probable_miss_rate(forecast: MixtureForecast, truth: np.ndarray, step: int) -> float:
    _check_nonempty(truth)
    return float(np.mean(_errors_at(select_most_probable(forecast), truth, step) > MISS_THRESHOLD_M))


# ---------------------------------------------------------------------------
# report

METRICS = ("MNLL", "RMSE", "FDE", "MR")
SCOPES = ("ego", "all")

# Reference values for the full model on NGSIM, for comparison only.
REFERENCE_SAMMP = {
    "MNLL": (-0.36, 0.70, 1.51, 2.13, 2.64),
    "RMSE": (0.51, 1.13, 1.88, 2.81, 3.98),
    "FDE": (0.31, 0.78, 1.35, 2.04, 2.90),
    "MR": (0.002, 0.02, 0.08, 0.15, 0.23),
}
REFERENCE_CV = {
    "MNLL": (0.82, 2.32, 3.23, 3.91, 4.46),
    "RMSE": (0.76, 1.82, 3.17, 4.80, 6.70),
    "FDE": (0.46, 1.24, 2.27, 3.53, 4.99),
    "MR": (0.02, 0.20, 0.44, 0.61, 0.71),
}


@dataclass
class MetricsReport:
    """Indicator values keyed by ``(scope, metric, horizon_s)``."""

    values: dict[tuple[str, str, int], float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def compute(cls, forecasts: dict[str, MixtureForecast], truths: dict[str, np.ndarray]) -> MetricsReport:
        report = cls()
        for scope in SCOPES:
            if scope not in forecasts:
                continue
            fc, truth = forecasts[scope], truths[scope]
            _check_nonempty(truth)
            report.counts[scope] = int(truth.shape[0])
            for h in HORIZONS_S:
                step = horizon_step(h)
                if step > fc.n_pred:
                    continue
                report.values[(scope, "MNLL", h)] = mean_nll(fc, truth, step)
                report.values[(scope, "RMSE", h)] = rmse(fc, truth, step)
                report.values[(scope, "FDE", h)] = fde(fc, truth, step)
                report.values[(scope, "MR", h)] = miss_rate(fc, truth, step)
        return report

    def rows(self) -> list[tuple[str, int, float, str]]:
        out = []
        for scope in SCOPES:
            for metric in METRICS:
                for h in HORIZONS_S:
                    key = (scope, metric, h)
                    if key in self.values:
                        out.append((metric, h, self.values[key], scope))
        return out

    def get(self, metric: str, horizon_s: int, scope: str = "all") -> float:
        return self.values[(scope, metric, horizon_s)]

    def restricted(self, scope: str) -> MetricsReport:
        return MetricsReport(
            {k: v for k, v in self.values.items() if k[0] == scope},
            {k: v for k, v in self.counts.items() if k == scope},
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "horizon_s", "value", "scope"])
        for metric, h, value, scope in self.rows():
            w.writerow([metric, h, repr(value), scope])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "counts": {k: self.counts[k] for k in SCOPES if k in self.counts},
            "rows": [
                {"metric": m, "horizon_s": h, "value": v, "scope": s} for m, h, v, s in self.rows()
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        doc = json.loads(text)
        values = {(r["scope"], r["metric"], int(r["horizon_s"])): float(r["value"]) for r in doc["rows"]}
        return cls(values, dict(doc["counts"]))
