"""Track ingestion, ego-centered windowing and scene-level splitting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, UsageError

SAMPLE_RATE_HZ = 5.0
N_HIST = 16
N_PRED = 25
RADIUS_M = 30.0
MAX_VEHICLES = 30
CSV_HEADER = ["vehicle_id", "frame", "x", "y"]


@dataclass(frozen=True)
class TrackPoint:
    t: int
    x: float
    y: float


@dataclass
class SceneWindow:
    """One sample: ego-centered histories and futures of every vehicle.

    ``history`` is ``[n_veh, n_hist, 2]`` and ``future`` ``[n_veh, n_pred, 2]``,
    both in meters relative to the ego position at ``t0``.
    """

    ego_index: int
    history: np.ndarray
    future: np.ndarray
    vehicle_ids: list[str]
    scene_id: str = ""
    t0: int = 0

    @property
    def n_veh(self) -> int:
        return self.history.shape[0]


@dataclass
class Dataset:
    windows: list[SceneWindow]
    split: str = "train"
    sample_rate: float = SAMPLE_RATE_HZ
    labels: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)


Tracks = dict[str, list[TrackPoint]]


def parse_tracks_csv(path: str | Path) -> Tracks:
    """Read ``vehicle_id,frame,x,y`` rows into per-vehicle sorted tracks."""
    path = Path(path)
    tracks: dict[str, list[TrackPoint]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            vid = row[0].strip()
            try:
                frame = int(row[1])
                x = float(row[2])
                y = float(row[3])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
            tracks.setdefault(vid, []).append(TrackPoint(frame, x, y))
    for vid, points in tracks.items():
        points.sort(key=lambda p: p.t)
        frames = [p.t for p in points]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise DataError(f"{path}: vehicle {vid}: repeated frame in track")
    return tracks


def write_tracks_csv(path: str | Path, tracks: Tracks) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for vid in sorted(tracks, key=_id_key):
            for p in tracks[vid]:
                w.writerow([vid, p.t, f"{p.x:.6f}", f"{p.y:.6f}"])


def _id_key(vid: str):
    return (0, int(vid), vid) if vid.lstrip("-").isdigit() else (1, 0, vid)


def make_windows(
    tracks: Tracks,
    n_hist: int = N_HIST,
    n_pred: int = N_PRED,
    radius: float = RADIUS_M,
    scene_id: str = "",
    egos: set[str] | None = None,
    stride: int = 1,
) -> list[SceneWindow]:
    """Cut every fully covered ``(ego, t0)`` into an ego-centered window.

    ``t0`` is the last history sample.  Neighbors must be observed over the
    whole window and lie within ``radius`` meters longitudinally of the ego
    at ``t0``; at most 29 neighbors (the closest) are kept.
    """
    span = n_hist + n_pred
    lookup: dict[str, dict[int, tuple[float, float]]] = {
        vid: {p.t: (p.x, p.y) for p in pts} for vid, pts in tracks.items()
    }
    ids = sorted(tracks, key=_id_key)
    windows = []
    for ego in ids:
        if egos is not None and ego not in egos:
            continue
        frames = lookup[ego]
        if not frames:
            continue
        first, last = min(frames), max(frames)
        for start in range(first, last - span + 2, stride):
            window_frames = range(start, start + span)
            if any(f not in frames for f in window_frames):
                continue
            t0 = start + n_hist - 1
            x_ego, y_ego = frames[t0]
            neighbors = []
            for other in ids:
                if other == ego:
                    continue
                of = lookup[other]
                if t0 not in of or abs(of[t0][0] - x_ego) > radius:
                    continue
                if all(f in of for f in window_frames):
                    neighbors.append((abs(of[t0][0] - x_ego), other))
            if len(neighbors) > MAX_VEHICLES - 1:
                neighbors.sort()
                keep = {vid for _, vid in neighbors[: MAX_VEHICLES - 1]}
                neighbors = [(d, v) for d, v in neighbors if v in keep]
            members = [ego] + [v for _, v in neighbors]
            traj = np.array([[lookup[v][f] for f in window_frames] for v in members], dtype=np.float64)
            traj -= np.array([x_ego, y_ego])
            windows.append(
                SceneWindow(
                    ego_index=0,
                    history=traj[:, :n_hist].copy(),
                    future=traj[:, n_hist:].copy(),
                    vehicle_ids=members,
                    scene_id=scene_id,
                    t0=t0,
                )
            )
    return windows


def split_dataset(
    windows: list[SceneWindow],
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/val/test split by ``scene_id``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    scenes = sorted({w.scene_id for w in windows})
    order = np.random.default_rng(seed).permutation(len(scenes))
    n = len(scenes)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    assignment = {}
    for rank, idx in enumerate(order):
        assignment[scenes[idx]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    parts: list[list[SceneWindow]] = [[], [], []]
    for w in windows:
        parts[assignment[w.scene_id]].append(w)
    return (Dataset(parts[0], "train"), Dataset(parts[1], "val"), Dataset(parts[2], "test"))


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path: str | Path, files: list[str], seed: int, fractions, **extra) -> None:
    doc = {"files": list(files), "seed": int(seed), "fractions": [float(f) for f in fractions]}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None
    for key in ("files", "seed", "fractions"):
        if key not in doc:
            raise ParseError(f"{path}: manifest is missing '{key}'")
    return doc


def load_manifest_windows(path: str | Path, stride: int = 1) -> tuple[list[SceneWindow], dict]:
    """Parse and window every file listed in a dataset manifest.

    Labelled manifests (the bimodal benchmark) restrict each file to its
    labelled ego and group files by their pair id.
    """
    path = Path(path)
    doc = read_manifest(path)
    labels = {lab["file"]: lab for lab in doc.get("labels", [])}
    windows = []
    for name in doc["files"]:
        tracks = parse_tracks_csv(path.parent / name)
        lab = labels.get(name)
        if lab is not None:
            ws = make_windows(tracks, scene_id=str(lab["scene_id"]), egos={str(lab["ego_id"])})
        else:
            ws = make_windows(tracks, scene_id=Path(name).stem, stride=stride)
        windows.extend(ws)
    return windows, doc


def load_split(path: str | Path, split: str, stride: int = 1) -> Dataset:
    windows, doc = load_manifest_windows(path, stride=stride)
    train, val, test = split_dataset(windows, doc["fractions"], doc["seed"])
    try:
        return {"train": train, "val": val, "test": test}[split]
    except KeyError:
        raise UsageError(f"unknown split {split!r}") from None
