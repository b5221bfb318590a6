"""Parameter containers and the gated dilated convolution network.

Networks are stateless descriptions; parameters live in a flat ``dict`` of
numpy arrays keyed by dotted names. At evaluation time the caller passes a
mapping whose values are either plain arrays or tracked
:class:`~hbaflow.diffcore.Array` leaves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from hbaflow import diffcore as dc

Params = dict[str, np.ndarray]


def track(params: Mapping[str, np.ndarray]) -> dict[str, dc.Array]:
    """Wrap every parameter as a gradient-tracked leaf."""
    return {k: dc.Array(v, requires_grad=True) for k, v in params.items()}


def freeze(params: Mapping[str, np.ndarray]) -> dict[str, dc.Array]:
    return {k: dc.Array(v) for k, v in params.items()}


@dataclass(frozen=True)
class GatedConvNet:
    """1x1 input projection, residual tanh*sigmoid gated dilated convs,
    zero-initialized 1x1 output projection."""

    name: str
    in_channels: int
    out_channels: int
    channels: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    zero_out: bool = True

    def init(self, rng: np.random.Generator) -> Params:
        C, k = self.channels, self.kernel
        out_w = (np.zeros((C, self.out_channels)) if self.zero_out
                 else rng.normal(0, 1 / np.sqrt(C), (C, self.out_channels)))
        p = {
            f"{self.name}.in.w": rng.normal(0, 1 / np.sqrt(self.in_channels),
                                            (self.in_channels, C)),
            f"{self.name}.in.b": np.zeros(C),
            f"{self.name}.out.w": out_w,
            f"{self.name}.out.b": np.zeros(self.out_channels),
        }
        for i in range(len(self.dilations)):
            p[f"{self.name}.gate{i}.w"] = rng.normal(0, 1 / np.sqrt(k * C), (k, C, 2 * C))
            p[f"{self.name}.gate{i}.b"] = np.zeros(2 * C)
        return p

    def __call__(self, P: Mapping, x) -> dc.Array:
        n = self.name
        C = self.channels
        h = dc.affine(x, P[f"{n}.in.w"], P[f"{n}.in.b"])
        for i, dil in enumerate(self.dilations):
            fg = dc.conv1d(h, P[f"{n}.gate{i}.w"], P[f"{n}.gate{i}.b"], dilation=dil)
            h = h + dc.tanh(fg[..., :C]) * dc.sigmoid(fg[..., C:])
        return dc.affine(h, P[f"{n}.out.w"], P[f"{n}.out.b"])


def position_channel(B: int, n: int) -> np.ndarray:
    """Normalized time index in [-1, 1], shape (B, n, 1)."""
    pos = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    return np.broadcast_to(pos[None, :, None], (B, n, 1))
