"""Trajectory datasets: synthetic intersections, CSV tracks, windowing, folds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BRANCHES = ("straight", "left", "right")
# headings relative to the approach direction (+x)
BRANCH_HEADINGS = {"straight": 0.0, "left": math.pi / 2, "right": -math.pi / 2}
CSV_HEADER = ("track_id", "t", "x", "y")


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class OrderingError(ValueError):
    pass


@dataclass
class Track:
    id: str
    times: np.ndarray
    positions: np.ndarray  # (n, d)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise OrderingError(f"track {self.id}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class Normalization:
    offset: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.offset) / self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) * self.scale + self.offset


@dataclass
class Example:
    x: np.ndarray  # observed, (T_obs, d), normalized
    y: np.ndarray  # future, (T_fut, d), normalized
    norm: Normalization
    track_id: str
    label: int = -1


@dataclass
class Dataset:
    examples: list[Example]
    scale: float
    dt: float = 1.0

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def arrays(self, idx: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        ex = self.examples if idx is None else [self.examples[i] for i in idx]
        return np.stack([e.x for e in ex]), np.stack([e.y for e in ex])

    @property
    def track_ids(self) -> list[str]:
        return [e.track_id for e in self.examples]

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.examples[i] for i in idx], self.scale, self.dt)


@dataclass
class SyntheticScenarioConfig:
    """Agents approach an intersection along +x and take one of three exits."""

    probs: tuple[float, float, float] = (0.4, 0.4, 0.2)
    speed_mean: float = 1.0
    speed_std: float = 0.1
    noise_std: float = 0.02
    t_obs: int = 8
    t_fut: int = 16
    count: int = 1000
    seed: int = 0
    dt: float = 0.25

    def validate(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (3,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError(f"probs must be three non-negative values summing to 1, got {self.probs}")
        if self.speed_std < 0:
            raise ConfigError(f"speed_std must be >= 0, got {self.speed_std}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.t_obs < 2 or self.t_fut < 1 or self.count < 1:
            raise ConfigError("t_obs must be >= 2, t_fut and count >= 1")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")


@dataclass
class SyntheticTracks:
    tracks: list[Track]
    branches: np.ndarray
    config: SyntheticScenarioConfig = field(repr=False)


def generate_synthetic(cfg: SyntheticScenarioConfig) -> SyntheticTracks:
    """Sample tracks of length ``t_obs + t_fut``; the turn happens at the origin,
    which is the last observed position before noise."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.count
    branch = rng.choice(3, size=n, p=np.asarray(cfg.probs))
    speed = rng.normal(cfg.speed_mean, cfg.speed_std, size=n)
    L = cfg.t_obs + cfg.t_fut
    noise = rng.normal(0.0, cfg.noise_std, size=(n, L, 2))
    tracks = []
    steps_in = np.arange(-(cfg.t_obs - 1), 1, dtype=np.float64)
    steps_out = np.arange(1, cfg.t_fut + 1, dtype=np.float64)
    for i in range(n):
        theta = BRANCH_HEADINGS[BRANCHES[branch[i]]]
        obs = np.stack([steps_in * speed[i], np.zeros(cfg.t_obs)], axis=1)
        fut = steps_out[:, None] * speed[i] * np.array([math.cos(theta), math.sin(theta)])
        pos = np.concatenate([obs, fut]) + np.cumsum(noise[i], axis=0)
        times = np.arange(L) * cfg.dt
        tracks.append(Track(f"s{i:06d}", times, pos))
    return SyntheticTracks(tracks, branch, cfg)


def load_tracks(path: str | Path) -> list[Track]:
    """Read a ``track_id,t,x,y`` CSV; rows of a track must be time-ordered."""
    path = Path(path)
    rows: dict[str, list[tuple[float, float, float]]] = {}
    order: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise ParseError(f"{path}:1: missing column(s) {', '.join(missing)}")
        cols = [header.index(c) for c in CSV_HEADER]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            tid = row[cols[0]].strip()
            try:
                t, px, py = (float(row[c]) for c in cols[1:])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse number in {row!r}") from None
            if not all(math.isfinite(v) for v in (t, px, py)):
                raise ParseError(f"{path}:{lineno}: non-finite value in {row!r}")
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            elif t <= rows[tid][-1][0]:
                raise OrderingError(f"{path}:{lineno}: track {tid} timestamps not increasing")
            rows[tid].append((t, px, py))
    out = []
    for tid in order:
        arr = np.asarray(rows[tid])
        out.append(Track(tid, arr[:, 0], arr[:, 1:]))
    return out


def write_tracks(tracks: Sequence[Track], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for tr in tracks:
            for t, p in zip(tr.times, tr.positions):
                w.writerow([tr.id, repr(float(t)), repr(float(p[0])), repr(float(p[1]))])


def displacement_scale(tracks: Sequence[Track], resample: int = 1) -> float:
    """Std of all per-step displacement components."""
    disp = [np.diff(tr.positions[::resample], axis=0) for tr in tracks if len(tr) > resample]
    if not disp:
        raise ConfigError("no track long enough to estimate a displacement scale")
    s = float(np.std(np.concatenate(disp)))
    return s if s > 0 else 1.0


def window_and_normalize(tracks: Sequence[Track], t_obs: int, t_fut: int, stride: int,
                         K: int = 1, resample: int = 1, scale: float | None = None,
                         labels: dict[str, int] | None = None) -> Dataset:
    """Cut sliding ``(x, y)`` windows, translate so the last observed point is
    the origin and divide by a dataset-level scale."""
    if t_fut % (2 ** K):
        raise ConfigError(f"t_fut={t_fut} must be divisible by 2^K = {2 ** K}")
    if t_obs < 1 or stride < 1 or resample < 1:
        raise ConfigError("t_obs, stride and resample must be >= 1")
    if scale is None:
        scale = displacement_scale(tracks, resample)
    L = t_obs + t_fut
    examples = []
    dt = None
    for tr in tracks:
        pos = tr.positions[::resample]
        if dt is None and len(tr) > resample:
            dt = float(tr.times[resample] - tr.times[0])
        for start in range(0, len(pos) - L + 1, stride):
            win = pos[start:start + L]
            norm = Normalization(win[t_obs - 1].copy(), scale)
            w = norm.apply(win)
            lab = labels.get(tr.id, -1) if labels else -1
            examples.append(Example(w[:t_obs], w[t_obs:], norm, tr.id, lab))
    if not examples:
        raise ConfigError(f"no track is long enough for a window of {L} steps")
    return Dataset(examples, scale, dt or 1.0)


def kfold_split(track_ids: Sequence[str], folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign each distinct track id to one of ``folds`` test folds."""
    uniq = sorted(set(track_ids))
    if len(uniq) < folds:
        raise ConfigError(f"need at least {folds} tracks for {folds}-fold split, got {len(uniq)}")
    perm = np.random.default_rng(seed).permutation(len(uniq))
    assign = {}
    for f, part in enumerate(np.array_split(perm, folds)):
        for i in part:
            assign[uniq[i]] = f
    return assign


def fold_indices(dataset: Dataset, assign: dict[str, int], fold: int,
                 val_fraction: float = 0.1, seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """(train, val, test) example indices; validation tracks come from the
    training folds so no track straddles a boundary."""
    test = [i for i, t in enumerate(dataset.track_ids) if assign[t] == fold]
    train_tracks = sorted({t for t in dataset.track_ids if assign[t] != fold})
    rng = np.random.default_rng(seed + 7919 * fold)
    n_val = int(round(val_fraction * len(train_tracks)))
    val_tracks = set(rng.permutation(train_tracks)[:n_val].tolist()) if n_val else set()
    train = [i for i, t in enumerate(dataset.track_ids) if assign[t] != fold and t not in val_tracks]
    val = [i for i, t in enumerate(dataset.track_ids) if t in val_tracks]
    return train, val, test


def write_manifest(path: str | Path, entries: dict) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(entries):
            fh.write(f"{k}={entries[k]}\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def branch_of(points: np.ndarray) -> int:
    """Nearest branch heading of the final position relative to the origin."""
    end = np.asarray(points)[-1]
    ang = math.atan2(end[1], end[0])
    diffs = [abs(math.remainder(ang - BRANCH_HEADINGS[b], 2 * math.pi)) for b in BRANCHES]
    return int(np.argmin(diffs))
