"""Continuous variance-preserving diffusion on low-dimensional points."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .nn import (DTYPE, AdamW, Embedding, Mlp, Module, NumericError, ShapeError,
                 check_finite, sinusoidal_embedding)

log = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def cosine_alpha_bar(t):
    """Closed-form cumulative signal level of the cosine schedule."""
    t = np.asarray(t, dtype=np.float64)
    f = np.cos((t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
    f0 = math.cos(COSINE_OFFSET / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
    return f / f0


@dataclass
class NoiseSchedule:
    """Discretized signal/noise levels at times k/T, k = 0..T.

    ``alphas[k]**2 + sigmas[k]**2 == 1`` by construction; index 0 is clean data.
    """

    T: int
    alphas: np.ndarray
    sigmas: np.ndarray
    kind: str

    @classmethod
    def make(cls, T: int = 250, kind: str = "cosine") -> "NoiseSchedule":
        if T < 1:
            raise ValueError("T must be >= 1")
        if kind == "cosine":
            ab = cosine_alpha_bar(np.arange(T + 1) / T)
            betas = np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)
        elif kind == "linear":
            scale = 1000.0 / T
            betas = np.minimum(np.linspace(scale * 1e-4, scale * 0.02, T), MAX_BETA)
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(T=T, alphas=np.sqrt(alpha_bar), sigmas=np.sqrt(1.0 - alpha_bar), kind=kind)

    @property
    def alpha_bar(self):
        return self.alphas ** 2

    @property
    def betas(self):
        ab = self.alpha_bar
        return 1.0 - ab[1:] / ab[:-1]

    def index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("diffusion time must lie in [0, 1]")
        return np.rint(t * self.T).astype(np.int64)


def forward_noise(x, t, eps, sched: NoiseSchedule):
    """x_t = alpha_t * x + sigma_t * eps, with ``t`` scalar or per-row."""
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise ShapeError(f"x {x.shape} and eps {eps.shape} differ")
    k = sched.index(t)
    a = sched.alphas[k]
    s = sched.sigmas[k]
    if np.ndim(k):
        a, s = a[:, None], s[:, None]
    return a * x + s * eps


class LabelEmbedder(Module):
    """Learned table for integer conditions plus one drop-token row."""

    def __init__(self, n_labels: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.n_labels, self.dim = n_labels, dim
        self.table = self.add("table", Embedding(n_labels + 1, dim, rng, scale=1.0))

    def forward(self, cond, drop):
        cond = np.asarray(cond, dtype=np.int64)
        if np.any((cond < 0) | (cond >= self.n_labels)):
            raise IndexError("label out of range")
        idx = np.where(drop, self.n_labels, cond)
        return self.table.forward(idx)

    def backward(self, g):
        self.table.backward(g)


class ScoreNet(Module):
    """Noise predictor s(x_t, t, c): an MLP on [x_t, time features, condition vector]."""

    def __init__(self, rng: np.random.Generator, data_dim: int = 2, hidden: int = 256,
                 depth: int = 4, time_dim: int = 64, conditioner: Optional[Module] = None,
                 activation: str = "silu", T: int = 250):
        super().__init__()
        self.data_dim, self.time_dim = data_dim, time_dim
        self.T = T
        self.cond_dim = conditioner.dim if conditioner is not None else 0
        widths = [data_dim + time_dim + self.cond_dim] + [hidden] * (depth - 1) + [data_dim]
        self.trunk = self.add("trunk", Mlp(widths, rng, activation))
        self.conditioner = self.add("cond", conditioner) if conditioner is not None else None

    @property
    def conditional(self) -> bool:
        return self.conditioner is not None

    def forward(self, x_t, t, cond=None, drop=None):
        x_t = np.asarray(x_t)
        B = len(x_t)
        if np.ndim(t) == 0:
            temb = np.broadcast_to(sinusoidal_embedding([t], self.time_dim), (B, self.time_dim))
        else:
            temb = sinusoidal_embedding(t, self.time_dim)
        parts = [x_t, temb]
        if self.conditioner is not None:
            if drop is None:
                drop = np.zeros(B, dtype=bool)
            if cond is None:
                cond = np.zeros(B, dtype=np.int64)
                drop = np.ones(B, dtype=bool)
            parts.append(self.conditioner.forward(cond, np.asarray(drop, dtype=bool)))
        inp = np.concatenate(parts, axis=1).astype(self.trunk.dtype)
        return self.trunk.forward(inp)

    def backward(self, g):
        d_in = self.trunk.backward(g)
        if self.conditioner is not None:
            self.conditioner.backward(d_in[:, self.data_dim + self.time_dim:])
        return d_in[:, :self.data_dim]

    def predict(self, x_t, k, cond=None, drop=None):
        """Noise estimate at integer schedule index ``k`` (scalar or per-row)."""
        return self.forward(x_t, np.asarray(k) / self.T, cond, drop)


def dsm_loss(net: ScoreNet, x, cond, sched: NoiseSchedule, rng: np.random.Generator,
             p_drop: float = 0.1, backward: bool = False):
    """Mean squared noise-prediction error over a batch (sum over dims, mean over rows).

    Per-row times are uniform over schedule indices 1..T; each condition is
    replaced by the drop token with probability ``p_drop``.
    """
    x = np.asarray(x)
    B = len(x)
    if B == 0:
        raise ValueError("empty batch")
    k = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x.shape)
    drop = rng.random(B) < p_drop if net.conditional else None
    x_t = forward_noise(x, k / sched.T, eps, sched)
    pred = net.forward(x_t, k / sched.T, cond, drop)
    diff = pred - eps.astype(pred.dtype)
    loss = float((diff * diff).sum() / B)
    if backward:
        net.backward(2.0 * diff / B)
    return loss


@dataclass
class GuidanceConfig:
    """Guided estimate = (1 + w) * cond - w * uncond.

    A DiT-style "cfg scale" s corresponds to w = s - 1 (scale 1.4 -> w = 0.4).
    """

    w: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance weight must be non-negative")

    @classmethod
    def from_scale(cls, scale: float) -> "GuidanceConfig":
        return cls(w=scale - 1.0)


def guided_score(net, x_t, k, cond, g: Optional[GuidanceConfig]):
    eps_c = net.predict(x_t, k, cond)
    if g is None or not g.enabled or g.w == 0 or cond is None:
        return eps_c
    B = len(x_t)
    eps_u = net.predict(x_t, k, cond, drop=np.ones(B, dtype=bool))
    return (1.0 + g.w) * eps_c - g.w * eps_u


def sample_ddpm(net, sched: NoiseSchedule, cond, n: int, rng: np.random.Generator,
                g: Optional[GuidanceConfig] = None, batch_size: int = 8192) -> np.ndarray:
    """Ancestral sampling from N(0, I) down to index 0 with posterior variance.

    ``net`` only needs ``predict(x_t, k, cond, drop=None)`` and ``data_dim``,
    so closed-form noise predictors can stand in for trained networks.
    """
    dim = net.data_dim
    x = rng.standard_normal((n, dim))
    ab = sched.alpha_bar
    betas = sched.betas
    for k in range(sched.T, 0, -1):
        z = rng.standard_normal((n, dim)) if k > 1 else None
        eps = np.empty_like(x)
        for s in range(0, n, batch_size):
            c = None if cond is None else cond[s:s + batch_size]
            eps[s:s + batch_size] = guided_score(net, x[s:s + batch_size], k, c, g)
        beta = betas[k - 1]
        x = (x - beta / math.sqrt(1.0 - ab[k]) * eps) / math.sqrt(1.0 - beta)
        if z is not None:
            var = beta * (1.0 - ab[k - 1]) / (1.0 - ab[k])
            x = x + math.sqrt(var) * z
        if not np.all(np.isfinite(x)):
            raise NumericError(f"sampler diverged at step {k}")
    return x


class GaussianNoiseOracle:
    """Exact noise predictor for data ~ N(mean, var * I)."""

    def __init__(self, mean, var: float, sched: NoiseSchedule):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = var
        self.sched = sched
        self.data_dim = len(self.mean)

    def predict(self, x_t, k, cond=None, drop=None):
        a = self.sched.alphas[k]
        s = self.sched.sigmas[k]
        return s * (x_t - a * self.mean) / (a * a * self.var + s * s)


def train_score_net(net: ScoreNet, draw: Callable, sched: NoiseSchedule, steps: int,
                    batch_size: int, rng: np.random.Generator, lr: float = 1e-3,
                    weight_decay: float = 0.0, p_drop: float = 0.1,
                    log_every: int = 0) -> list[float]:
    """Optimize ``net`` on fresh batches ``x, cond = draw(rng, batch_size)``."""
    net.T = sched.T
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    params = net.parameters()
    losses = []
    for step in range(steps):
        # cosine decay to 10% of the base rate
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1))))
        x, cond = draw(rng, batch_size)
        loss = dsm_loss(net, x.astype(DTYPE), cond, sched, rng, p_drop=p_drop, backward=True)
        if not math.isfinite(loss):
            raise NumericError(f"loss diverged at step {step}")
        opt.step(params, net.gradients())
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    for name, p in params.items():
        check_finite(name, p)
    return losses
