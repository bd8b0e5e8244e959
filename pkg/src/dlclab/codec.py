"""Simplicial-embedding encoder and discrete latent codes built from it.

An encoder maps a point to L softmax vectors over a vocabulary of V
entries; the code is the per-position argmax. Codes condition the
continuous model through averaged per-position embeddings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .nn import (DTYPE, AdamW, Mlp, Module, NumericError, ShapeError, StateError,
                 check_finite, softmax)

log = logging.getLogger(__name__)

DROPPED = None


@dataclass
class SemConfig:
    L: int = 8
    V: int = 16
    d: int = 32
    tau: float = 0.5
    hidden: int = 128
    # one trunk per input coordinate, positions split into contiguous groups
    factorized: bool = False
    # std of Gaussian noise added to logits while training; pushes SEMs toward saturation
    logit_noise: float = 0.0

    def __post_init__(self):
        if self.L < 1 or self.V < 2:
            raise ValueError("need L >= 1 and V >= 2")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.logit_noise < 0:
            raise ValueError("logit_noise must be non-negative")


def log_code_count(L: int, V: int) -> float:
    """Natural log of the number of distinct codes, V ** L."""
    return L * math.log(V)


class SemEncoder(Module):
    def __init__(self, cfg: SemConfig, rng: np.random.Generator, data_dim: int = 2):
        super().__init__()
        self.cfg = cfg
        self.data_dim = data_dim
        n_groups = data_dim if cfg.factorized else 1
        if n_groups > cfg.L:
            raise ValueError("factorized encoder needs at least one position per coordinate")
        in_dim = 1 if cfg.factorized else data_dim
        self.trunks = [self.add(f"trunk{g}", Mlp([in_dim, cfg.hidden, cfg.hidden, cfg.d], rng))
                       for g in range(n_groups)]
        self.group = np.arange(cfg.L) * n_groups // cfg.L
        bound = 1.0 / math.sqrt(cfg.d)
        self.params["W"] = rng.uniform(-bound, bound, size=(cfg.L, cfg.d, cfg.V)).astype(DTYPE)
        self._cache = None

    def logits(self, x):
        x = np.asarray(x, dtype=self.params["W"].dtype)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ShapeError(f"encoder expects (B, {self.data_dim}) input")
        if self.cfg.factorized:
            feats = [t.forward(x[:, g:g + 1]) for g, t in enumerate(self.trunks)]
        else:
            feats = [self.trunks[0].forward(x)]
        h = np.stack([feats[g] for g in self.group], axis=1)  # (B, L, d)
        self._cache = h
        return np.einsum("bld,ldv->blv", h, self.params["W"])

    def forward(self, x, tau: float | None = None, noise=None):
        """Soft SEMs, shape (B, L, V); every row lies on the simplex.

        ``noise``, if given, is added to the logits before the softmax.
        """
        tau = self.cfg.tau if tau is None else tau
        if tau <= 0:
            raise ValueError("temperature must be positive")
        z = self.logits(x)
        if noise is not None:
            z = z + noise
        S = softmax(z / tau)
        self._tau, self._S = tau, S
        return S

    def backward(self, dS):
        if self._cache is None:
            raise StateError("SemEncoder.backward called before forward")
        S, tau, h = self._S, self._tau, self._cache
        dlogits = S * (dS - (dS * S).sum(-1, keepdims=True)) / tau
        self.grads["W"] = np.einsum("bld,blv->ldv", h, dlogits)
        dh = np.einsum("blv,ldv->bld", dlogits, self.params["W"])
        for g, trunk in enumerate(self.trunks):
            trunk.backward(dh[:, self.group == g].sum(axis=1))


def encode_sem(enc: SemEncoder, x, tau: float | None = None):
    return enc.forward(np.atleast_2d(x), tau)


def tokenize(sems) -> np.ndarray:
    """Per-position argmax; ``np.argmax`` already breaks ties toward the lowest index."""
    return np.asarray(sems).argmax(axis=-1)


def compose(a, b, rng: np.random.Generator | None = None, mask=None) -> np.ndarray:
    """Take each position from ``a`` where ``mask`` is True, else from ``b``.

    Without a mask, positions are chosen by independent fair coin flips.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"code lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    a, b = np.broadcast_arrays(a, b)
    if mask is None:
        if rng is None:
            raise ValueError("compose needs either rng or mask")
        mask = rng.random(a.shape) < 0.5
    return np.where(np.broadcast_to(mask, a.shape), a, b)


class TokenEmbedder(Module):
    """Per-position tables of V token rows plus a drop row; output is their mean."""

    def __init__(self, L: int, V: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        super().__init__()
        self.L, self.V, self.dim = L, V, dim
        self.params["E"] = (scale * rng.standard_normal((L, V + 1, dim))).astype(DTYPE)
        self._idx = None

    def forward(self, codes, drop=None):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes[None]
        B, L = codes.shape
        if L != self.L:
            raise ShapeError(f"expected codes of length {self.L}, got {L}")
        if np.any((codes < 0) | (codes >= self.V)):
            raise IndexError(f"token outside [0, {self.V})")
        if drop is not None:
            codes = np.where(np.asarray(drop, dtype=bool)[:, None], self.V, codes)
        self._idx = codes
        return self.params["E"][np.arange(L)[None, :], codes].mean(axis=1)

    def backward(self, g):
        if self._idx is None:
            raise StateError("TokenEmbedder.backward called before forward")
        E = self.params["E"]
        grad = np.zeros_like(E)
        B, L = self._idx.shape
        pos = np.broadcast_to(np.arange(L), (B, L))
        np.add.at(grad, (pos.ravel(), self._idx.ravel()),
                  np.repeat(g[:, None, :] / L, L, axis=1).reshape(-1, self.dim))
        self.grads["E"] = grad


def embed_code(emb: TokenEmbedder, code) -> np.ndarray:
    """Conditioning vector for one code, or the averaged drop rows for ``DROPPED``."""
    if code is DROPPED:
        return emb.params["E"][:, emb.V].mean(axis=0)
    return emb.forward(np.asarray(code)[None])[0]


def reconstruction_loss(enc: SemEncoder, dec: Mlp, x, backward: bool = False,
                        rng: np.random.Generator | None = None) -> float:
    x = np.asarray(x, dtype=DTYPE)
    noise = None
    if rng is not None and enc.cfg.logit_noise > 0:
        noise = (enc.cfg.logit_noise
                 * rng.standard_normal((len(x), enc.cfg.L, enc.cfg.V))).astype(x.dtype)
    S = enc.forward(x, noise=noise)
    B = len(x)
    recon = dec.forward(S.reshape(B, -1))
    diff = recon - x
    loss = float((diff * diff).sum() / B)
    if backward:
        dS = dec.backward(2.0 * diff / B).reshape(S.shape)
        enc.backward(dS)
    return loss


def make_decoder(cfg: SemConfig, rng: np.random.Generator, data_dim: int = 2) -> Mlp:
    return Mlp([cfg.L * cfg.V, cfg.hidden, cfg.hidden, data_dim], rng)


def train_encoder(enc: SemEncoder, dec: Mlp, draw, rng: np.random.Generator, steps: int = 2000,
                  batch_size: int = 256, lr: float = 3e-3) -> list[float]:
    """Fit encoder + decoder to reconstruct points from their soft SEMs.

    ``draw(rng, n)`` returns an (n, data_dim) batch. No hard argmax appears in
    the training path, so no gradient estimator is needed.
    """
    opt = AdamW(lr=lr)
    params = {**{"enc." + k: v for k, v in enc.parameters().items()},
              **{"dec." + k: v for k, v in dec.parameters().items()}}
    losses = []
    for step in range(steps):
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1))))
        loss = reconstruction_loss(enc, dec, draw(rng, batch_size), backward=True, rng=rng)
        if not math.isfinite(loss):
            raise NumericError(f"encoder training diverged at step {step}")
        grads = {**{"enc." + k: v for k, v in enc.gradients().items()},
                 **{"dec." + k: v for k, v in dec.gradients().items()}}
        opt.step(params, grads)
        losses.append(loss)
    for name, p in params.items():
        check_finite(name, p)
    return losses


def encode_codes(enc: SemEncoder, x, batch_size: int = 8192) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([tokenize(enc.forward(x[s:s + batch_size]))
                           for s in range(0, len(x), batch_size)]) if len(x) else \
        np.zeros((0, enc.cfg.L), dtype=np.int64)


def code_lookup(codes, labels) -> dict[tuple, int]:
    """Majority label per distinct code (ties go to the smallest label)."""
    table: dict[tuple, dict[int, int]] = {}
    for c, y in zip(map(tuple, np.asarray(codes)), np.asarray(labels)):
        counts = table.setdefault(c, {})
        counts[int(y)] = counts.get(int(y), 0) + 1
    return {c: min(cnt, key=lambda k: (-cnt[k], k)) for c, cnt in table.items()}
