"""Training loop, evaluation into metric reports, and attention dumps."""

from __future__ import annotations

import csv
import io
import math
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .errors import ConfigError, NumericError, TrainingError, UsageError
from .forecast import MixtureForecast
from .losses import MetricsReport, mixture_nll_tensor
from .scenes import SceneWindow

log = logging.getLogger(__name__)

Forecaster = Callable[[np.ndarray, int], MixtureForecast]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = 10.0
    max_steps: int | None = None
    lr_schedule: str = "constant"  # or "cosine", decaying to 0 over the run
    warmup_steps: int = 0  # linear ramp from lr / warmup_steps up to lr

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs and batch_size must be positive and lr nonnegative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for 0-based ``step`` of a ``total``-step run."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant":
            return self.lr
        span = max(total - self.warmup_steps, 1)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - self.warmup_steps) / span))

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    steps: list[tuple[int, int, int, float]] = field(default_factory=list)  # step, epoch, batch, loss
    val: list[tuple[int, float]] = field(default_factory=list)  # epoch, val MNLL
    wall_time: float = 0.0

    def losses(self) -> np.ndarray:
        return np.array([s[3] for s in self.steps])

    def to_csv(self) -> str:
        # wall time is kept out so logs of identical runs are identical bytes
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "step", "epoch", "batch", "value"])
        for step, epoch, batch, loss in self.steps:
            w.writerow(["train_loss", step, epoch, batch, repr(loss)])
        for epoch, value in self.val:
            w.writerow(["val_mnll", "", epoch, "", repr(value)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# batching


def bucket_batches(windows: Sequence[SceneWindow], batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Group window indices by vehicle count into batches.

    With ``rng`` the order within buckets and of the batches is shuffled.
    """
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, w in enumerate(windows):
        buckets[w.n_veh].append(i)
    batches = []
    for n in sorted(buckets):
        idx = np.array(buckets[n])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[s : s + batch_size].tolist() for s in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _stack(windows: Sequence[SceneWindow], idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    hist = np.stack([windows[i].history for i in idx])
    fut = np.stack([windows[i].future for i in idx])
    return hist, fut


def batch_loss(hist: np.ndarray, fut: np.ndarray, params: ad.ParameterSet, config: M.ModelConfig) -> ad.Tensor:
    """Mean mixture NLL over windows, vehicles and steps."""
    out = M.forward(hist, params, config, n_pred=fut.shape[-2])
    return ad.mean(mixture_nll_tensor(out.mean, out.sigma, out.rho, out.log_p, fut))


def dataset_nll(windows: Sequence[SceneWindow], params: ad.ParameterSet, config: M.ModelConfig, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for idx in bucket_batches(windows, batch_size, None):
        hist, fut = _stack(windows, idx)
        out = M.forward(hist, params, config, n_pred=fut.shape[-2])
        nll = mixture_nll_tensor(out.mean, out.sigma, out.rho, out.log_p, fut)
        total += float(nll.data.sum())
        count += nll.data.size
    return total / count


def train(
    windows: Sequence[SceneWindow],
    model_config: M.ModelConfig,
    train_config: TrainConfig,
    val_windows: Sequence[SceneWindow] | None = None,
    params: ad.ParameterSet | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ad.ParameterSet, TrainLog]:
    """Adam on the mean mixture NLL; returns the best-validation parameters.

    Without validation windows the final parameters are returned.
    """
    if not windows:
        raise UsageError("training split is empty")
    rng = np.random.default_rng(train_config.seed)
    params = params if params is not None else M.init_params(model_config, seed=train_config.seed)
    state = ad.AdamState.for_params(params)
    tlog = TrainLog()
    best: tuple[float, ad.ParameterSet] | None = None
    start = time.perf_counter()
    step = 0
    n_batches = len(bucket_batches(windows, train_config.batch_size, None))
    total = n_batches * train_config.epochs
    if train_config.max_steps is not None:
        total = min(total, train_config.max_steps)
    for epoch in range(train_config.epochs):
        for batch_id, idx in enumerate(bucket_batches(windows, train_config.batch_size, rng)):
            hist, fut = _stack(windows, idx)
            params.zero_grad()
            try:
                loss = batch_loss(hist, fut, params, model_config)
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch} batch {batch_id}: {exc}") from exc
            if train_config.grad_clip is not None:
                ad.clip_grad_norm(params, train_config.grad_clip)
            ad.adam_step(params, state, lr=train_config.lr_at(step, total))
            step += 1
            tlog.steps.append((step, epoch, batch_id, loss.item()))
            if checkpoint_dir is not None and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
                M.save_checkpoint(Path(checkpoint_dir) / f"step{step:06d}", params, model_config)
            if train_config.max_steps is not None and step >= train_config.max_steps:
                break
        if val_windows:
            v = dataset_nll(val_windows, params, model_config)
            tlog.val.append((epoch, v))
            log.info("epoch %d val MNLL %.4f", epoch, v)
            if best is None or v < best[0]:
                best = (v, params.copy())
        if train_config.max_steps is not None and step >= train_config.max_steps:
            break
    tlog.wall_time = time.perf_counter() - start
    params.zero_grad()
    return (best[1] if best is not None else params), tlog


# ---------------------------------------------------------------------------
# evaluation


class ModelForecaster:
    def __init__(self, params: ad.ParameterSet, config: M.ModelConfig):
        self.params = params
        self.config = config

    def __call__(self, histories: np.ndarray, n_pred: int) -> MixtureForecast:
        return M.predict(histories, self.params, self.config, n_pred)


def forecast_windows(
    forecaster: Forecaster, windows: Sequence[SceneWindow], batch_size: int = 64
) -> list[MixtureForecast]:
    """Forecast each window (``[n_veh, n_pred, n_mix]`` per window), in input order."""
    results: list[MixtureForecast | None] = [None] * len(windows)
    for idx in bucket_batches(windows, batch_size, None):
        hist, fut = _stack(windows, idx)
        fc = forecaster(hist, fut.shape[-2])
        for j, i in enumerate(idx):
            results[i] = fc[j]
    return results


def evaluate(forecaster: Forecaster, windows: Sequence[SceneWindow]) -> MetricsReport:
    """All indicators at 1-5 s, for ego vehicles and for all vehicles."""
    if not windows:
        raise UsageError("evaluation split is empty")
    fcs = forecast_windows(forecaster, windows)
    all_fc = MixtureForecast.concatenate(fcs)
    all_truth = np.concatenate([w.future for w in windows])
    ego_fc = MixtureForecast.concatenate([f[w.ego_index : w.ego_index + 1] for f, w in zip(fcs, windows)])
    ego_truth = np.stack([w.future[w.ego_index] for w in windows])
    return MetricsReport.compute({"ego": ego_fc, "all": all_fc}, {"ego": ego_truth, "all": all_truth})


# ---------------------------------------------------------------------------
# attention


def front_neighbors(window: SceneWindow, lane_width: float = 3.5) -> dict[int, int]:
    """Closest vehicle ahead in the same lane at ``t0`` for each vehicle.

    Lanes come from the ego-centered lateral position rounded to lane
    width.
    """
    pos = window.history[:, -1]
    lanes = np.round(pos[:, 1] / lane_width).astype(int)
    out = {}
    for i in range(window.n_veh):
        ahead = [j for j in range(window.n_veh) if j != i and lanes[j] == lanes[i] and pos[j, 0] > pos[i, 0]]
        if ahead:
            out[i] = min(ahead, key=lambda j: pos[j, 0])
    return out


def front_attention_score(att: np.ndarray, fronts: dict[int, int]) -> float | None:
    """Mean attention mass of each vehicle on its front neighbor."""
    if not fronts:
        return None
    return float(np.mean([att[i, j] for i, j in fronts.items()]))


def _arrows(att: np.ndarray, min_weight: float) -> list[list]:
    n = att.shape[0]
    return [[i, j, float(att[i, j])] for i in range(n) for j in range(n) if att[i, j] >= min_weight]


def export_attention(
    params: ad.ParameterSet,
    config: M.ModelConfig,
    window: SceneWindow,
    lane_width: float = 3.5,
    min_arrow_weight: float = 0.01,
) -> dict:
    """Attention matrices of both layers with plotting arrows and front scores.

    The second layer attends once per forecast step; its matrices are
    listed per step.
    """
    res = M.forward_full(window.history, params, config)
    fronts = front_neighbors(window, lane_width)
    att1 = res.attention1.data  # [H, n, n]
    att2 = res.attention2.data  # [T, H, n, n]
    layer1 = []
    for h in range(att1.shape[0]):
        m = att1[h]
        layer1.append({
            "head": h,
            "matrix": m.tolist(),
            "arrows": _arrows(m, min_arrow_weight),
            "front_score": front_attention_score(m, fronts),
        })
    layer2 = []
    for h in range(att2.shape[1]):
        per_step = att2[:, h]
        scores = [front_attention_score(m, fronts) for m in per_step]
        layer2.append({
            "head": h,
            "matrices": per_step.tolist(),
            "front_score": None if scores[0] is None else float(np.mean(scores)),
        })
    return {
        "vehicle_ids": list(window.vehicle_ids),
        "n_veh": window.n_veh,
        "uniform_baseline": 1.0 / window.n_veh,
        "front_neighbors": [[i, j] for i, j in sorted(fronts.items())],
        "layers": [{"layer": 1, "heads": layer1}, {"layer": 2, "heads": layer2}],
    }


def front_attention_summary(
    params: ad.ParameterSet, config: M.ModelConfig, windows: Sequence[SceneWindow], lane_width: float = 3.5
) -> dict:
    """Dataset-level front-vehicle attention per first-layer head.

    Averages attention on the front neighbor over every (window, vehicle)
    that has one, alongside the matching uniform mass ``1/n_veh``.
    """
    sums = None
    uniform = 0.0
    count = 0
    for idx in bucket_batches(windows, 64, None):
        hist = np.stack([windows[i].history for i in idx])
        att = M.forward_full(hist, params, config, n_pred=1).attention1.data  # [B, H, n, n]
        if sums is None:
            sums = np.zeros(att.shape[1])
        for b, i in enumerate(idx):
            for v, f in front_neighbors(windows[i], lane_width).items():
                sums += att[b, :, v, f]
                uniform += 1.0 / windows[i].n_veh
                count += 1
    if not count:
        raise UsageError("no vehicle has a same-lane front neighbor")
    per_head = (sums / count).tolist()
    base = uniform / count
    return {"per_head": per_head, "uniform": base, "ratio": max(per_head) / base, "pairs": count}
