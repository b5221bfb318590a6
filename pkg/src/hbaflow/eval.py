"""Evaluation metrics, the unimodal Gaussian baseline and the sampling benchmark."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hbaflow.data import BRANCHES, BRANCH_HEADINGS, ConfigError, Dataset
from hbaflow.model import SamplingTrace


def _n_keep(n: int, fraction: float) -> int:
    k = math.ceil(round(n * fraction, 9))
    if k < 1:
        raise ConfigError(f"fraction {fraction} of {n} samples keeps no sample")
    return min(k, n)


def _dists(gt: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Per-sample, per-step Euclidean distance, shape (n, T)."""
    return np.linalg.norm(np.asarray(samples) - np.asarray(gt)[None], axis=-1)


def top_fraction_error(gt, samples, fraction: float = 0.1, horizons: Sequence[int] | None = None,
                       per_horizon: bool = False) -> np.ndarray:
    """Mean error of the best ``ceil(n * fraction)`` samples at each horizon.

    Horizons are 1-based step indices into the future. Samples are ranked by
    their mean error over the full future, unless ``per_horizon`` ranks them
    independently at every horizon.
    """
    dist = _dists(gt, samples)
    n, T = dist.shape
    horizons = list(horizons) if horizons is not None else [T]
    bad = [h for h in horizons if not 1 <= h <= T]
    if bad:
        raise ConfigError(f"horizon(s) {bad} outside the future of {T} steps")
    keep = _n_keep(n, fraction)
    cols = np.array(horizons) - 1
    if per_horizon:
        return np.sort(dist[:, cols], axis=0)[:keep].mean(axis=0)
    best = np.argsort(dist.mean(axis=1), kind="stable")[:keep]
    return dist[best][:, cols].mean(axis=0)


def min_ade_fde(gt, samples, n_expected: int | None = 20) -> tuple[float, float]:
    samples = np.asarray(samples)
    if n_expected is not None and len(samples) != n_expected:
        raise ConfigError(f"expected {n_expected} samples, got {len(samples)}")
    dist = _dists(gt, samples)
    return float(dist.mean(axis=1).min()), float(dist[:, -1].min())


def cll_unit_constant(t_fut: int, dim: int, scale: float) -> float:
    """Add to a normalized-unit -CLL to express it in scene units."""
    return t_fut * dim * math.log(scale)


def negative_cll(model, xs: np.ndarray, ys: np.ndarray, batch: int = 256) -> float:
    """Mean of ``-log p(y | x)`` over the given pairs (normalized units).

    ``model`` is anything with a batched ``log_likelihood(y, x)``.
    """
    vals = []
    for i in range(0, len(xs), batch):
        vals.append(np.asarray(model.log_likelihood(ys[i:i + batch], xs[i:i + batch])))
    ll = np.concatenate(vals)
    return float(-np.sum(ll) / len(ll))


@dataclass
class BranchClassifier:
    """Assigns a trajectory to the branch nearest its final heading."""

    headings: tuple[float, ...] = tuple(BRANCH_HEADINGS[b] for b in BRANCHES)

    def __call__(self, trajectories: np.ndarray) -> np.ndarray:
        end = np.asarray(trajectories)[..., -1, :]
        ang = np.arctan2(end[..., 1], end[..., 0])
        diff = np.abs(np.remainder(ang[..., None] - np.array(self.headings) + np.pi,
                                   2 * np.pi) - np.pi)
        return np.argmin(diff, axis=-1)


def mode_coverage(samples: np.ndarray, classifier: BranchClassifier | None = None) -> np.ndarray:
    classifier = classifier or BranchClassifier()
    lab = np.asarray(classifier(samples)).reshape(-1)
    counts = np.bincount(lab, minlength=len(classifier.headings))
    return counts / max(len(lab), 1)


class ConditionalGaussianBaseline:
    """Unimodal ``y | x ~ N(A [1, vec x], S)`` with full covariance, fit by
    least squares. The strongest single-Gaussian competitor."""

    def __init__(self, ridge: float = 1e-6):
        self.ridge = ridge

    def _feats(self, xs):
        xs = np.asarray(xs)
        return np.concatenate([np.ones((len(xs), 1)), xs.reshape(len(xs), -1)], axis=1)

    def fit(self, xs: np.ndarray, ys: np.ndarray) -> "ConditionalGaussianBaseline":
        X = self._feats(xs)
        Y = np.asarray(ys).reshape(len(ys), -1)
        self.shape = np.asarray(ys).shape[1:]
        reg = self.ridge * np.eye(X.shape[1])
        self.coef = np.linalg.solve(X.T @ X + reg, X.T @ Y)
        R = Y - X @ self.coef
        D = Y.shape[1]
        self.cov = R.T @ R / len(Y) + self.ridge * np.eye(D)
        self.chol = np.linalg.cholesky(self.cov)
        self._logdet = 2 * np.sum(np.log(np.diag(self.chol)))
        return self

    def log_likelihood(self, ys, xs) -> np.ndarray:
        Y = np.asarray(ys).reshape(len(ys), -1)
        R = Y - self._feats(xs) @ self.coef
        sol = np.linalg.solve(self.chol, R.T)
        D = Y.shape[1]
        return -0.5 * np.sum(sol * sol, axis=0) - 0.5 * self._logdet - 0.5 * D * math.log(2 * math.pi)

    def sample(self, x, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        mu = self._feats(np.asarray(x)[None]) @ self.coef
        eps = rng.standard_normal((n, mu.shape[1]))
        return (mu + eps @ self.chol.T).reshape(n, *self.shape)


@dataclass
class BenchmarkResult:
    median_ms: float
    iqr_ms: float
    stages: int
    times_ms: list[float] = field(default_factory=list)


def benchmark_sampling(model, x: np.ndarray, t_future: int, batch: int = 128,
                       repeats: int = 5, warmup: int = 1) -> BenchmarkResult:
    """Wall-clock time to draw ``batch`` futures for one observed trajectory."""
    for _ in range(warmup):
        model.sample(x, batch, t_future, seed=0)
    times = []
    stages = 0
    for r in range(max(repeats, 1)):
        trace = SamplingTrace()
        t0 = time.perf_counter()
        model.sample(x, batch, t_future, seed=r, trace=trace)
        times.append((time.perf_counter() - t0) * 1e3)
        stages = trace.stages
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return BenchmarkResult(float(med), float(q3 - q1), stages, times)


@dataclass
class MetricReport:
    horizons_sec: list[float]
    top_errors: list[float]
    neg_cll: float
    cll_scene_offset: float
    made: float
    mfde: float
    n_samples: int
    n_min_samples: int
    n_examples: int
    seed: int
    sampling_ms: float | None = None
    label: str = ""

    def to_kv(self) -> str:
        lines = [f"label={self.label}", f"seed={self.seed}", f"n_examples={self.n_examples}",
                 f"n_samples={self.n_samples}", f"n_min_samples={self.n_min_samples}"]
        for h, e in zip(self.horizons_sec, self.top_errors):
            lines.append(f"top10_err@{h:g}s={e!r}")
        lines += [f"neg_cll_nats={self.neg_cll!r}", f"cll_scene_offset={self.cll_scene_offset!r}",
                  f"made={self.made!r}", f"mfde={self.mfde!r}"]
        if self.sampling_ms is not None:
            lines.append(f"sampling_ms_batch128={self.sampling_ms!r}")
        lines.append("units=errors in scene units; neg_cll in nats, normalized units")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> str:
        cols = ["label", "seed", "n_examples", "n_samples"]
        cols += [f"top10_err@{h:g}s" for h in self.horizons_sec]
        cols += ["neg_cll_nats", "cll_scene_offset", "made", "mfde", "sampling_ms_batch128"]
        return ",".join(cols)

    def to_csv_row(self) -> str:
        vals = [self.label, str(self.seed), str(self.n_examples), str(self.n_samples)]
        vals += [repr(e) for e in self.top_errors]
        vals += [repr(self.neg_cll), repr(self.cll_scene_offset), repr(self.made), repr(self.mfde),
                 "" if self.sampling_ms is None else repr(self.sampling_ms)]
        return ",".join(vals)


def aggregate_reports(reports: Sequence[MetricReport], label: str = "aggregate") -> MetricReport:
    """Unweighted mean over folds."""
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    ms = [r.sampling_ms for r in reports if r.sampling_ms is not None]
    return MetricReport(
        horizons_sec=list(reports[0].horizons_sec),
        top_errors=[mean(col) for col in zip(*(r.top_errors for r in reports))],
        neg_cll=mean([r.neg_cll for r in reports]),
        cll_scene_offset=mean([r.cll_scene_offset for r in reports]),
        made=mean([r.made for r in reports]),
        mfde=mean([r.mfde for r in reports]),
        n_samples=reports[0].n_samples,
        n_min_samples=reports[0].n_min_samples,
        n_examples=sum(r.n_examples for r in reports),
        seed=reports[0].seed,
        sampling_ms=mean(ms) if ms else None,
        label=label,
    )


def evaluate(model, dataset: Dataset, idx: Sequence[int], *, n_samples: int = 50,
             n_min_samples: int = 20, fraction: float = 0.1, horizons_sec=(1, 2, 3, 4),
             seed: int = 0, label: str = "", sampler=None) -> MetricReport:
    """Full metric report on a subset of examples; errors in scene units."""
    xs, ys = dataset.arrays(idx)
    T = ys.shape[1]
    steps = [int(round(h / dataset.dt)) for h in horizons_sec]
    sampler = sampler or (lambda x, n, s: model.sample(x, n, T, seed=s))
    top, ade, fde = [], [], []
    for j, i in enumerate(idx):
        ex = dataset[i]
        gt = ex.norm.invert(ex.y) - ex.norm.offset
        samp = sampler(ex.x, n_samples, seed + j) * ex.norm.scale
        top.append(top_fraction_error(gt, samp, fraction, steps))
        a, f = min_ade_fde(gt, samp[:n_min_samples], n_min_samples)
        ade.append(a)
        fde.append(f)
    nc = negative_cll(model, xs, ys)
    return MetricReport(
        horizons_sec=[float(h) for h in horizons_sec],
        top_errors=[float(v) for v in np.mean(top, axis=0)],
        neg_cll=nc,
        cll_scene_offset=cll_unit_constant(T, ys.shape[2], dataset.scale),
        made=float(np.mean(ade)), mfde=float(np.mean(fde)),
        n_samples=n_samples, n_min_samples=n_min_samples, n_examples=len(idx),
        seed=seed, label=label,
    )
