"""Seedable straight-highway scenes with gap-keeping and lane changes.

Longitudinal motion: each vehicle tracks a noisy free speed and brakes when
its gap to the nearest vehicle ahead sharing a lane drops below
``min_headway + v * time_headway``.  A hard positional constraint keeps
every same-lane pair at least ``min_headway`` apart at every tick.
Lane changes are 2 s normalized-sigmoid lateral blends; during a change the
vehicle occupies both lanes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .scenes import Dataset, TrackPoint, Tracks, make_windows

DT = 0.2
LANE_CHANGE_TICKS = 10  # 2 s at 5 Hz


@dataclass(frozen=True)
class GenConfig:
    n_lanes: int = 3
    lane_width: float = 3.5
    n_vehicles: int = 10
    duration: float = 20.0
    lane_change_prob: float = 0.2
    seed: int = 0
    speed_range: tuple[float, float] = (20.0, 30.0)
    road_length: float = 200.0
    min_headway: float = 5.0
    time_headway: float = 1.2
    speed_noise: float = 0.3
    speed_noise_rate: float = 0.5
    lateral_noise: float = 0.01
    # followers match the leader speed observed this long ago (s)
    reaction_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lane_change_prob <= 1.0:
            raise ConfigError("lane_change_prob must be in [0, 1]")
        if not 1 <= self.n_vehicles <= 30:
            raise ConfigError("n_vehicles must be in 1..30")
        if self.n_lanes < 1 or self.lane_width <= 0:
            raise ConfigError("need at least one lane of positive width")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError("speed_range must be an increasing nonnegative interval")
        if self.reaction_time < 0:
            raise ConfigError("reaction_time must be nonnegative")
        if self.duration < 2.0:
            raise ConfigError("duration must cover at least one lane change (2 s)")


@dataclass
class GeneratedScene:
    """Positions ``x``/``y`` are ``[n_vehicles, n_ticks]`` at 5 Hz."""

    vehicle_ids: list[str]
    x: np.ndarray
    y: np.ndarray
    initial_lanes: np.ndarray
    change_decisions: np.ndarray
    lane_changes: list[dict] = field(default_factory=list)

    @property
    def n_ticks(self) -> int:
        return self.x.shape[1]

    def tracks(self) -> Tracks:
        return {
            vid: [TrackPoint(t, float(self.x[i, t]), float(self.y[i, t])) for t in range(self.n_ticks)]
            for i, vid in enumerate(self.vehicle_ids)
        }

    def speeds(self) -> np.ndarray:
        return np.diff(self.x, axis=1) / DT


def lane_blend(u) -> np.ndarray:
    """Logistic profile rescaled to run exactly from 0 at u=0 to 1 at u=1."""
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    k = 10.0
    lo = 1.0 / (1.0 + np.exp(k / 2))
    hi = 1.0 / (1.0 + np.exp(-k / 2))
    return (1.0 / (1.0 + np.exp(-k * (u - 0.5))) - lo) / (hi - lo)


def _place(rng: np.random.Generator, cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.n_vehicles
    lanes = rng.permutation(np.arange(n) % cfg.n_lanes)
    gap = 3.0 * cfg.min_headway
    per_lane = int(np.ceil(n / cfg.n_lanes))
    if per_lane * gap > cfg.road_length:
        raise ConfigError(
            f"cannot place {per_lane} vehicles per lane with {gap} m spacing on {cfg.road_length} m"
        )
    x = np.empty(n)
    for lane in range(cfg.n_lanes):
        idx = np.flatnonzero(lanes == lane)
        if idx.size == 0:
            continue
        slack = cfg.road_length - idx.size * gap
        offsets = np.sort(rng.uniform(0.0, slack, size=idx.size))
        x[idx] = offsets + gap * np.arange(idx.size)
    return lanes, x


def generate_scene(cfg: GenConfig, scene_index: int = 0) -> GeneratedScene:
    """Simulate one scene; the RNG stream is derived from ``(seed, scene_index)``."""
    rng = np.random.default_rng([cfg.seed, scene_index])
    n = cfg.n_vehicles
    n_ticks = int(round(cfg.duration / DT)) + 1
    lanes, x0 = _place(rng, cfg)
    lo, hi = cfg.speed_range
    v_des = rng.uniform(lo, hi, size=n)

    decisions = rng.random(n) < cfg.lane_change_prob
    planned = rng.integers(1, max(2, n_ticks - LANE_CHANGE_TICKS), size=n)
    direction = rng.choice([-1, 1], size=n)
    lat_noise = np.zeros(n)

    x = np.empty((n, n_ticks))
    y = np.empty((n, n_ticks))
    x[:, 0] = x0
    v = v_des.copy()
    v_free = v_des.copy()
    delay = int(round(cfg.reaction_time / DT))
    v_hist = np.empty((n, n_ticks))
    v_hist[:, 0] = v
    lane = lanes.copy()
    change: dict[int, tuple[int, int, int]] = {}  # vehicle -> (start tick, from, to)
    events = []
    buffer = cfg.min_headway + 0.5
    y[:, 0] = lane * cfg.lane_width

    def occupied(i: int, t: int) -> set[int]:
        if i in change and t - change[i][0] < LANE_CHANGE_TICKS:
            return {change[i][1], change[i][2]}
        return {int(lane[i])}

    for t in range(1, n_ticks):
        # lane-change starts
        for i in range(n):
            if not decisions[i] or i in change or t < planned[i] or t > n_ticks - 1 - LANE_CHANGE_TICKS:
                continue
            target = int(lane[i] + direction[i])
            if not 0 <= target < cfg.n_lanes:
                target = int(lane[i] - direction[i])
            if not 0 <= target < cfg.n_lanes:
                continue
            clear = all(
                abs(x[j, t - 1] - x[i, t - 1]) >= 3.0 * cfg.min_headway
                for j in range(n)
                if j != i and target in occupied(j, t)
            )
            if clear:
                change[i] = (t, int(lane[i]), target)
                events.append({"vehicle": i, "start_tick": t, "start_s": t * DT, "from_lane": int(lane[i]), "to_lane": target})

        # free speeds: mean-reverting noise inside speed_range
        v_free += cfg.speed_noise_rate * (v_des - v_free) * DT + cfg.speed_noise * np.sqrt(
            2 * cfg.speed_noise_rate * DT
        ) * rng.standard_normal(n)
        np.clip(v_free, lo, hi, out=v_free)

        order = sorted(range(n), key=lambda i: (-x[i, t - 1], i))
        done: list[int] = []
        for i in order:
            lanes_i = occupied(i, t)
            leaders = [j for j in done if lanes_i & occupied(j, t)]
            v_cmd = v_free[i]
            limit = np.inf
            if leaders:
                j = min(leaders, key=lambda j: x[j, t - 1])
                gap = x[j, t - 1] - x[i, t - 1]
                desired = cfg.min_headway + v[i] * cfg.time_headway
                if gap < desired:
                    v_lead = v[j] if delay == 0 else v_hist[j, max(t - delay, 0)]
                    v_cmd = min(v_cmd, max(0.0, v_lead - 0.5 * (desired - gap)))
                limit = min(x[k, t] for k in leaders) - buffer
            v_new = float(np.clip(v_cmd, max(0.0, v[i] - 6.0 * DT), v[i] + 2.0 * DT))
            v_new = min(v_new, hi)
            xn = x[i, t - 1] + v_new * DT
            xn = max(min(xn, limit), x[i, t - 1])
            x[i, t] = xn
            v[i] = (xn - x[i, t - 1]) / DT
            done.append(i)
        v_hist[:, t] = v

        lat_noise += -0.5 * lat_noise * DT + cfg.lateral_noise * np.sqrt(DT) * rng.standard_normal(n)
        np.clip(lat_noise, -0.025, 0.025, out=lat_noise)
        for i in range(n):
            if i in change:
                start, a, b = change[i]
                u = (t - start + 1) / LANE_CHANGE_TICKS
                y[i, t] = cfg.lane_width * (a + (b - a) * lane_blend(u)) + lat_noise[i]
                if t - start + 1 >= LANE_CHANGE_TICKS:
                    lane[i] = b
            else:
                y[i, t] = cfg.lane_width * lane[i] + lat_noise[i]
        _check_headway(x[:, t], [occupied(i, t) for i in range(n)], cfg.min_headway, t)

    ids = [str(i) for i in range(n)]
    for e in events:
        e["vehicle_id"] = ids[e.pop("vehicle")]
    return GeneratedScene(ids, x, y, lanes, decisions, events)


def _check_headway(x: np.ndarray, occupancy: list[set[int]], min_headway: float, t: int) -> None:
    lanes = set().union(*occupancy)
    for lane in lanes:
        xs = np.sort([x[i] for i, occ in enumerate(occupancy) if lane in occ])
        if xs.size > 1 and np.min(np.diff(xs)) < min_headway:
            raise DataError(f"headway invariant violated in lane {lane} at tick {t}")


def generate_scenes(cfg: GenConfig, n_scenes: int) -> list[GeneratedScene]:
    return [generate_scene(cfg, i) for i in range(n_scenes)]


# ---------------------------------------------------------------------------
# datasets for experiments

FOLLOWING_CONFIG = GenConfig(
    n_lanes=2,
    n_vehicles=8,
    duration=14.0,
    lane_change_prob=0.0,
    speed_range=(8.0, 22.0),
    road_length=100.0,
    speed_noise=2.0,
    speed_noise_rate=0.4,
    reaction_time=1.0,
)


def following_windows(seed: int, n_scenes: int, stride: int = 5, cfg: GenConfig | None = None):
    """Windows from dense no-lane-change traffic where most vehicles follow."""
    cfg = cfg or FOLLOWING_CONFIG
    cfg = GenConfig(**{**cfg.__dict__, "seed": seed})
    windows = []
    for i, scene in enumerate(generate_scenes(cfg, n_scenes)):
        windows.extend(make_windows(scene.tracks(), scene_id=f"scene{i:04d}", stride=stride))
    return windows


def bimodal_pair_tracks(seed: int, pair: int, lane_width: float = 3.5) -> list[tuple[Tracks, dict]]:
    """Keep-lane and change-lane versions of one scene.

    Vehicle ``0`` is the ego (lane 0), ``2`` drives ahead of it in lane 0
    and ``1`` drives in the adjacent lane 1; only vehicle ``1``'s future
    differs between the two versions, shifting one lane further away.
    Frames run 0..40 and ``t0`` is frame 15.
    """
    rng = np.random.default_rng([seed, pair])
    n_ticks = 41
    t0 = 15
    v_ego = rng.uniform(12.0, 16.0)
    base_v = np.array([v_ego, v_ego + rng.uniform(-1, 1), v_ego + rng.uniform(-1, 1)])
    x0 = np.array([0.0, rng.uniform(-10.0, 10.0), rng.uniform(12.0, 20.0)])
    lanes = np.array([0, 1, 0])
    speed_dev = np.zeros(3)
    x = np.empty((3, n_ticks))
    x[:, 0] = x0
    for t in range(1, n_ticks):
        speed_dev += -0.5 * speed_dev * DT + 0.3 * np.sqrt(DT) * rng.standard_normal(3)
        x[:, t] = x[:, t - 1] + (base_v + speed_dev) * DT
    lat = np.clip(np.cumsum(0.005 * rng.standard_normal((3, n_ticks)), axis=1), -0.02, 0.02)
    y_keep = lanes[:, None] * lane_width + lat
    start = int(rng.integers(t0 + 1, t0 + 6))
    u = (np.arange(n_ticks) - start + 1) / LANE_CHANGE_TICKS
    y_change = y_keep.copy()
    y_change[1] += lane_width * lane_blend(np.where(np.arange(n_ticks) < start, 0.0, u))

    out = []
    for branch, y in (("keep", y_keep), ("change", y_change)):
        tracks = {
            str(i): [TrackPoint(t, float(x[i, t]), float(y[i, t])) for t in range(n_ticks)] for i in range(3)
        }
        label = {
            "pair": pair,
            "scene_id": f"pair{pair:04d}",
            "branch": branch,
            "ego_id": "0",
            "branch_vehicle_id": "1",
            "lane_change_start_s": (start - t0) * DT if branch == "change" else None,
            "lane_width": lane_width,
        }
        out.append((tracks, label))
    return out


def generate_bimodal_benchmark(seed: int = 0, n_pairs: int = 100, lane_width: float = 3.5) -> Dataset:
    """Paired samples whose adjacent vehicle keeps or changes lane 50/50.

    Window order is pair-major, keep before change; ``labels`` is aligned
    with ``windows`` and records ``branch_index`` (the branching vehicle's
    row in the window).
    """
    windows, labels = [], []
    for pair in range(n_pairs):
        for tracks, label in bimodal_pair_tracks(seed, pair, lane_width):
            (w,) = make_windows(tracks, scene_id=label["scene_id"], egos={label["ego_id"]})
            label = dict(label, branch_index=w.vehicle_ids.index(label["branch_vehicle_id"]))
            windows.append(w)
            labels.append(label)
    return Dataset(windows, "all", labels=labels)
