"""The Haar block-autoregressive flow model.

The future trajectory ``y`` is decomposed into ``[f_1, ..., f_K, c_K]``. Each
fine component ``f_k`` goes through its own coupling stack conditioned on the
coarse signal ``c_k`` at the same scale and an encoding of the observed past
``x``; ``c_K`` goes through a separate stack conditioned on ``x`` only. The
latents are scored under per-scale conditional Gaussians (the HBA prior) or a
fixed standard normal (the Gaussian-prior ablation).

Sampling runs coarse to fine, so it needs ``K + 1`` sequential stages.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from hbaflow import diffcore as dc
from hbaflow import haar
from hbaflow.coupling import CouplingStack, make_context
from hbaflow.haar import LengthError, MixParam
from hbaflow.nn import GatedConvNet, Params, freeze, position_channel, track

LOG_STD_MIN, LOG_STD_MAX = -7.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 2
    K: int = 2
    n_steps: int = 8
    transform: str = "nlsq"
    channels: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    prior: str = "hba"
    alpha: float = 0.5
    alpha_mode: str = "shared"
    encoder_dim: int = 16
    encoder_dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.prior not in ("hba", "gaussian"):
            raise ValueError(f"prior must be 'hba' or 'gaussian', got {self.prior!r}")
        if self.alpha_mode not in ("shared", "per_scale", "fixed"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")

    def to_text(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(i) for i in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_text(cls, kv: Mapping[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(int(i) for i in raw.split(",") if i)
            elif isinstance(default, bool):
                kw[f.name] = raw == "True"
            else:
                kw[f.name] = type(default)(raw)
        return cls(**kw)


@dataclass
class LatentStack:
    """``z_1..z_{K-1}``, ``z^f_K`` and ``z^c_K``."""

    fines: list
    coarse: object

    @property
    def K(self) -> int:
        return len(self.fines)


@dataclass
class ConditionalGaussian:
    mean: object
    log_std: object

    def log_prob(self, z):
        """Per-example diagonal Gaussian log-density."""
        scaled = (z - self.mean) * dc.exp(-self.log_std) if _tracked(self.log_std, z, self.mean) \
            else (np.asarray(z) - self.mean) * np.exp(-self.log_std)
        terms = -0.5 * scaled * scaled - self.log_std - HALF_LOG_2PI
        if isinstance(terms, dc.Array):
            return dc.sum(terms, axis=(1, 2))
        return np.sum(terms, axis=(1, 2))


@dataclass
class SamplingTrace:
    """Counts the sequential coarse-to-fine stages of one sampling call."""

    stages: int = 0


class HBAFlowModel:
    """Parameters plus the network descriptions that read them."""

    def __init__(self, config: ModelConfig, params: Params | None = None, seed: int = 0):
        self.config = config
        cfg = config
        d = cfg.dim
        self.enc_width = 2 * cfg.encoder_dim
        net_kw = dict(channels=cfg.channels, kernel=cfg.kernel, dilations=cfg.dilations)
        self.past_encoder = GatedConvNet("past", d + 1, cfg.encoder_dim, cfg.channels,
                                         cfg.kernel, cfg.encoder_dilations, zero_out=False)
        self.fine_stacks = [
            CouplingStack(f"fine{k + 1}", d, d + self.enc_width + 1, cfg.n_steps,
                          cfg.transform, **net_kw)
            for k in range(cfg.K)
        ]
        self.coarse_stack = CouplingStack("coarse", d, self.enc_width + 1, cfg.n_steps,
                                          cfg.transform, **net_kw)
        self.prior_nets: list[GatedConvNet] = []
        self.coarse_prior: GatedConvNet | None = None
        if cfg.prior == "hba":
            self.prior_nets = [GatedConvNet(f"prior{k + 1}", d + self.enc_width + 1, 2 * d,
                                            **net_kw) for k in range(cfg.K)]
            self.coarse_prior = GatedConvNet("prior_coarse", self.enc_width + 1, 2 * d,
                                             **net_kw)
        n_alpha = cfg.K if cfg.alpha_mode == "per_scale" else 1
        self.mix = [MixParam(fixed=cfg.alpha) if cfg.alpha_mode == "fixed"
                    else MixParam.from_alpha(cfg.alpha) for _ in range(n_alpha)]
        self.params = params if params is not None else self.init_params(seed)

    # -- parameters ----------------------------------------------------------

    def init_params(self, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        p: Params = {}
        p.update(self.past_encoder.init(rng))
        for s in self.fine_stacks:
            p.update(s.init(rng))
        p.update(self.coarse_stack.init(rng))
        for net in self.prior_nets:
            p.update(net.init(rng))
        if self.coarse_prior is not None:
            p.update(self.coarse_prior.init(rng))
        if self.config.alpha_mode != "fixed":
            p["mix.u"] = np.array([m.unconstrained for m in self.mix])
        return p

    def alphas(self, P: Mapping | None = None) -> list:
        """Realized per-scale alphas; tracked when ``P`` holds tracked leaves."""
        K = self.config.K
        if self.config.alpha_mode == "fixed":
            return [self.config.alpha] * K
        P = self.params if P is None else P
        u = P["mix.u"]
        eps = self.mix[0].epsilon
        if isinstance(u, dc.Array):
            vals = [(1.0 - eps) * dc.sigmoid(u[i]) for i in range(u.shape[0])]
        else:
            vals = [(1.0 - eps) * float(dc._sigmoid(np.array([ui]))[0]) for ui in u]
        return vals * K if len(vals) == 1 else vals

    def alpha_values(self) -> list[float]:
        return [float(np.asarray(dc._scalar(a))) for a in self.alphas()]

    # -- conditioning -----------------------------------------------------------

    def encode_past(self, P: Mapping, x):
        """Fixed-width encoding of the observed trajectory(ies)."""
        x = _batch(x)
        if x.shape[1] < 1:
            raise ValueError("observed trajectory must contain at least one step")
        B, T, _ = x.shape
        h = self.past_encoder(P, dc.concat([x, position_channel(B, T)], axis=-1))
        return dc.concat([dc.mean(h, axis=1), h[:, -1, :]], axis=-1)

    def _prior(self, P: Mapping, k: int | None, B: int, n: int, coarse, xenc):
        d = self.config.dim
        if self.config.prior == "gaussian":
            return ConditionalGaussian(np.zeros((B, n, d)), np.zeros((B, n, d)))
        net = self.coarse_prior if k is None else self.prior_nets[k]
        ctx = make_context(B, n, coarse, xenc)
        out = net(P, ctx.features)
        mean, log_std = out[..., :d], dc.clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX)
        return ConditionalGaussian(mean, log_std)

    # -- likelihood -------------------------------------------------------------

    def _check_length(self, T: int) -> None:
        K = self.config.K
        if T % (2 ** K):
            raise LengthError(f"future length {T} must be divisible by 2^K = {2 ** K}")

    def forward(self, P: Mapping, y, x, coarse_from_tail: bool = False):
        """Map ``y`` to latents; returns ``(log_likelihood per example, latents)``.

        With ``coarse_from_tail`` the conditioning signal at scale k is rebuilt
        from ``[f_{k+1}, ..., f_K, c_K]`` instead of read off the pyramid, i.e.
        the fully block-autoregressive ordering. Both give the same value.
        """
        y, x = _batch(y), _batch(x)
        B, T, _ = y.shape
        self._check_length(T)
        K = self.config.K
        alphas = self.alphas(P)
        pyr = haar.decompose(y, K, alphas)
        coarse = list(pyr.coarse)
        if coarse_from_tail:
            for k in range(K - 2, -1, -1):
                coarse[k] = haar.f_hba_inverse(pyr.fines[k + 1], coarse[k + 1], alphas[k + 1])
        xenc = self.encode_past(P, x)
        total = pyr.logdet
        zs = []
        for k in range(K):
            f = pyr.fines[k]
            n = f.shape[1]
            z, ld = self.fine_stacks[k].forward(P, f, make_context(B, n, coarse[k], xenc))
            total = total + ld + self._prior(P, k, B, n, coarse[k], xenc).log_prob(z)
            zs.append(z)
        cK = pyr.coarsest
        n = cK.shape[1]
        zc, ld = self.coarse_stack.forward(P, cK, make_context(B, n, None, xenc))
        total = total + ld + self._prior(P, None, B, n, None, xenc).log_prob(zc)
        if not isinstance(total, dc.Array):
            total = dc.Array(total)
        return total, LatentStack(zs, zc)

    def log_likelihood(self, y, x) -> np.ndarray:
        """Exact ``log p(y | x)`` per example (no gradient tracking)."""
        ll, _ = self.forward(freeze(self.params), y, x)
        out = np.array(ll.value, dtype=np.float64)
        return out if out.ndim else out.reshape(1)

    def prior_logprob(self, latents: LatentStack, pyramid: haar.HaarPyramid, x,
                      P: Mapping | None = None) -> np.ndarray:
        """Latent log-density given the pyramid's coarse signals and ``x``."""
        P = freeze(self.params) if P is None else P
        x = _batch(x)
        if latents.K != self.config.K or pyramid.K != self.config.K:
            raise haar.StructureError(
                f"expected {self.config.K} scales, got latents {latents.K} / pyramid {pyramid.K}")
        xenc = self.encode_past(P, x)
        B = x.shape[0]
        total = 0.0
        for k in range(self.config.K):
            z, c = _batch(latents.fines[k]), _batch(pyramid.coarse[k])
            if z.shape[1:] != c.shape[1:]:
                raise haar.StructureError(f"scale {k + 1}: latent {z.shape} vs coarse {c.shape}")
            total = total + self._prior(P, k, B, z.shape[1], c, xenc).log_prob(z)
        zc = _batch(latents.coarse)
        total = total + self._prior(P, None, B, zc.shape[1], None, xenc).log_prob(zc)
        return np.asarray(dc._scalar(total))

    # -- sampling ---------------------------------------------------------------

    def sample(self, x, n: int, t_future: int, seed: int = 0, temperature: float = 1.0,
               trace: SamplingTrace | None = None) -> np.ndarray:
        """Draw ``n`` futures per observed trajectory, shape (B, n, T, d).

        A single ``(T_obs, d)`` input gives shape (n, T, d).
        """
        single = np.ndim(x) == 2
        x = _batch(x)
        self._check_length(t_future)
        rng = np.random.default_rng(seed)
        B = x.shape[0]
        xt = np.repeat(x, n, axis=0)
        N = B * n
        K, d = self.config.K, self.config.dim
        P = freeze(self.params)
        alphas = [float(np.asarray(dc._scalar(a))) for a in self.alphas()]
        xenc = self.encode_past(P, xt).value
        trace = trace if trace is not None else SamplingTrace()

        def draw(k, m, coarse):
            g = self._prior(P, k, N, m, coarse, xenc)
            mean, log_std = np.asarray(dc._scalar(g.mean)), np.asarray(dc._scalar(g.log_std))
            return mean + temperature * np.exp(log_std) * rng.standard_normal((N, m, d))

        m = t_future // 2 ** K
        trace.stages += 1
        c, _ = self.coarse_stack.inverse(P, draw(None, m, None), make_context(N, m, None, xenc))
        for k in range(K - 1, -1, -1):
            trace.stages += 1
            z = draw(k, m, c)
            f, _ = self.fine_stacks[k].inverse(P, z, make_context(N, m, c, xenc))
            c = haar.f_hba_inverse(f, c, alphas[k])
            m *= 2
        out = c.reshape(B, n, t_future, d)
        return out[0] if single else out

    def invert(self, latents: LatentStack, x) -> np.ndarray:
        """Deterministically map latents back to trajectories."""
        x = _batch(x)
        P = freeze(self.params)
        K = self.config.K
        alphas = [float(np.asarray(dc._scalar(a))) for a in self.alphas()]
        xenc = self.encode_past(P, x).value
        B = x.shape[0]
        zc = np.asarray(dc._scalar(latents.coarse))
        m = zc.shape[1]
        c, _ = self.coarse_stack.inverse(P, zc, make_context(B, m, None, xenc))
        for k in range(K - 1, -1, -1):
            z = np.asarray(dc._scalar(latents.fines[k]))
            f, _ = self.fine_stacks[k].inverse(P, z, make_context(B, m, c, xenc))
            c = haar.f_hba_inverse(f, c, alphas[k])
            m *= 2
        return c

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "HBAFlowModel":
        return HBAFlowModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _batch(a):
    if isinstance(a, haar.Trajectory):
        a = a.points
    if isinstance(a, dc.Array):
        return a if a.ndim == 3 else dc.reshape(a, (1, *a.shape))
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (T, d) or (B, T, d), got shape {a.shape}")
    return a


def _tracked(*vals) -> bool:
    return any(isinstance(v, dc.Array) for v in vals)


def nll_tracked(model: HBAFlowModel, y, x):
    """Mean negative log-likelihood plus the tracked parameter leaves."""
    P = track(model.params)
    ll, _ = model.forward(P, y, x)
    return -dc.mean(ll), P
