"""Invertible generalized Haar transform with a learnable mixing weight.

A trajectory at one scale is split into even and odd time steps, then mixed
into a coarse signal ``c = (1 - a) e + a o`` and a fine residual ``f = o - c``.
Applying this recursively to the coarse signal gives the multi-scale pyramid
``[f_1, ..., f_K, c_K]``. The Jacobian of one level is block diagonal with
2x2 blocks, so its log-determinant is ``(d * T / 2) * log(1 - a)``.

All functions operate on the last two axes ``(time, dim)`` and accept either
numpy arrays or :class:`~hbaflow.diffcore.Array` values, so the same code
serves inspection, sampling and differentiable likelihood evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hbaflow import diffcore as dc

__all__ = [
    "Trajectory", "MixParam", "HaarPyramid", "LengthError", "ParameterError",
    "StructureError", "split_even_odd", "haar_mix", "f_hba_forward",
    "f_hba_inverse", "decompose", "reconstruct", "max_scales", "interleave",
]


class LengthError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """A ``T x d`` sequence of positions sampled every ``dt`` seconds."""

    points: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise LengthError(f"trajectory must be T x d with T >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "points", pts)

    @property
    def T(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


@dataclass
class MixParam:
    """Sigmoid-parameterized mixing weight, realized in ``[0, 1 - epsilon]``.

    ``fixed`` pins the realized value (e.g. exactly 0) and removes it from
    the trainable set.
    """

    unconstrained: float = 0.0
    epsilon: float = 1e-3
    fixed: float | None = None

    @classmethod
    def from_alpha(cls, alpha: float, epsilon: float = 1e-3) -> "MixParam":
        top = 1.0 - epsilon
        if not 0.0 < alpha < top:
            raise ParameterError(f"alpha must lie in (0, {top}) to be learnable, got {alpha}")
        return cls(_logit(alpha / top), epsilon)

    @property
    def alpha(self) -> float:
        if self.fixed is not None:
            return float(self.fixed)
        return (1.0 - self.epsilon) * float(dc._sigmoid(np.array([self.unconstrained]))[0])

    def realize(self, unconstrained: dc.Array | None = None):
        """Realized alpha, differentiable when given a tracked parameter."""
        if self.fixed is not None or unconstrained is None:
            return self.alpha
        return (1.0 - self.epsilon) * dc.sigmoid(unconstrained)


@dataclass
class HaarPyramid:
    """Output of :func:`decompose`.

    ``coarse`` keeps every intermediate coarse signal ``c_1..c_K`` because
    the flow conditions scale ``k`` on ``c_k``; ``coarsest`` is ``c_K``.
    """

    fines: list
    coarse: list
    logdets: list
    alphas: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.fines)

    @property
    def coarsest(self):
        return self.coarse[-1]

    @property
    def logdet(self):
        total = self.logdets[0]
        for ld in self.logdets[1:]:
            total = total + ld
        return total


def _value(a) -> np.ndarray:
    return a.value if isinstance(a, dc.Array) else np.asarray(a)


def _check_alpha(alpha) -> None:
    a = float(np.asarray(_value(alpha)).reshape(-1)[0])
    if not 0.0 <= a < 1.0:
        raise ParameterError(f"mixing weight alpha must lie in [0, 1), got {a}")


def _log1m(alpha):
    if isinstance(alpha, dc.Array):
        return dc.log(1.0 - alpha)
    return math.log1p(-float(alpha))


def split_even_odd(y):
    """Return ``(e, o)``: 1-based even steps ``y^2, y^4, ...`` and odd steps."""
    T = y.shape[-2]
    if T % 2:
        raise LengthError(f"split_even_odd needs an even number of steps, got {T}")
    return y[..., 1::2, :], y[..., 0::2, :]


def interleave(o, e):
    """Inverse of :func:`split_even_odd`: ``[o1, e1, o2, e2, ...]``."""
    if o.shape != e.shape:
        raise StructureError(f"cannot interleave shapes {o.shape} and {e.shape}")
    *lead, n, d = o.shape
    if isinstance(o, dc.Array) or isinstance(e, dc.Array):
        pair = dc.concat([dc.reshape(o, (*lead, n, 1, d)), dc.reshape(e, (*lead, n, 1, d))],
                         axis=-2)
        return dc.reshape(pair, (*lead, 2 * n, d))
    out = np.empty((*lead, 2 * n, d))
    out[..., 0::2, :] = o
    out[..., 1::2, :] = e
    return out


def haar_mix(e, o, alpha):
    """Mix even/odd halves into ``(fine, coarse)``."""
    if e.shape != o.shape:
        raise StructureError(f"even and odd halves differ in shape: {e.shape} vs {o.shape}")
    _check_alpha(alpha)
    c = (1.0 - alpha) * e + alpha * o
    return o - c, c


def f_hba_forward(y, alpha):
    """One level of the transform: ``(f, c, logdet)``."""
    e, o = split_even_odd(y)
    f, c = haar_mix(e, o, alpha)
    n = y.shape[-1] * y.shape[-2] / 2
    return f, c, n * _log1m(alpha)


def f_hba_inverse(f, c, alpha):
    """Invert one level; exact up to floating point."""
    if f.shape != c.shape:
        raise StructureError(f"fine and coarse differ in shape: {f.shape} vs {c.shape}")
    _check_alpha(alpha)
    o = f + c
    e = (c - alpha * o) / (1.0 - alpha)
    return interleave(o, e)


def max_scales(T: int) -> int:
    """Largest K with 2^K dividing T (hence also K <= log2 T)."""
    if T < 1:
        raise LengthError(f"length must be positive, got {T}")
    K = 0
    while T % 2 == 0:
        T //= 2
        K += 1
    return K


def _alphas_for(alphas, K: int) -> list:
    if isinstance(alphas, (list, tuple)):
        if len(alphas) != K:
            raise ParameterError(f"expected {K} per-scale alphas, got {len(alphas)}")
        return list(alphas)
    return [alphas] * K


def decompose(y, K: int, alphas) -> HaarPyramid:
    """Apply the transform recursively at ``K`` scales.

    ``alphas`` is either one shared value or a sequence of ``K`` values.
    """
    if isinstance(y, Trajectory):
        y = y.points
    if not isinstance(y, dc.Array):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
    T = y.shape[-2]
    if K < 1:
        raise LengthError(f"number of scales must be >= 1, got {K}")
    if T % (2 ** K):
        raise LengthError(
            f"length {T} must be divisible by 2^K = {2 ** K} for K={K} scales "
            f"(at most {max_scales(T)} scales fit)")
    al = _alphas_for(alphas, K)
    fines, coarse, logdets = [], [], []
    c = y
    for a in al:
        f, c, ld = f_hba_forward(c, a)
        fines.append(f)
        coarse.append(c)
        logdets.append(ld)
    return HaarPyramid(fines, coarse, logdets, al)


def reconstruct(p: HaarPyramid):
    """Invert :func:`decompose`, starting from the coarsest level."""
    if not p.fines or len(p.alphas) != len(p.fines):
        raise StructureError("pyramid needs one alpha per fine component")
    c = p.coarsest
    for k in range(p.K - 1, -1, -1):
        f = p.fines[k]
        if f.shape != c.shape:
            raise StructureError(
                f"scale {k + 1}: fine shape {f.shape} does not match coarse {c.shape}")
        c = f_hba_inverse(f, c, p.alphas[k])
    return c


def pyramid_from_parts(fines: Sequence, coarsest, alphas) -> HaarPyramid:
    """Build a pyramid from ``[f_1..f_K]`` and ``c_K`` alone (e.g. sampled)."""
    K = len(fines)
    al = _alphas_for(alphas, K)
    coarse = [None] * K
    coarse[-1] = coarsest
    for k in range(K - 1, 0, -1):
        coarse[k - 1] = f_hba_inverse(fines[k], coarse[k], al[k])
    logdets = []
    for k in range(K):
        n = fines[k].shape[-1] * fines[k].shape[-2]
        logdets.append(n * _log1m(al[k]))
    return HaarPyramid(list(fines), coarse, logdets, al)
