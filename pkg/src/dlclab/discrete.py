"""Absorbing-state discrete diffusion over fixed-length token codes.

Tokens live in [0, V); the absorbing MASK symbol is V. The predictor outputs
clean-token probabilities at every code position (mean parameterization),
which is all the reverse unmasking chain needs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .nn import (DTYPE, AdamW, Embedding, LayerNorm, Linear, Module, NumericError,
                 ShapeError, StateError, TransformerBlock, check_finite, log_softmax,
                 make_rng, softmax)

log = logging.getLogger(__name__)

PAD = -1


@dataclass(frozen=True)
class MaskSchedule:
    """Probability gamma(t) that a position is masked at time t.

    ``linear``: gamma(t) = t. ``log-linear``: total noise -log(1 - t), which
    masks with the same gamma(t) = t. ``cosine``: gamma(t) = 1 - cos(pi t / 2).
    """

    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "log-linear", "cosine"):
            raise ValueError(f"unknown mask schedule {self.kind!r}")

    def gamma(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
        if self.kind != "cosine":
            return t
        g = 1.0 - np.cos(0.5 * math.pi * t)
        return np.where(t >= 1.0, 1.0, g)

    def dgamma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind != "cosine":
            return np.ones_like(t)
        return 0.5 * math.pi * np.sin(0.5 * math.pi * t)

    def total_noise(self, t):
        """Absorbing-process noise level: gamma(t) = 1 - exp(-total_noise(t))."""
        with np.errstate(divide="ignore"):
            return -np.log1p(-self.gamma(t))


@dataclass
class RemaskConfig:
    eta: float = 0.0
    window: tuple[float, float] = (0.3, 0.55)

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")
        t0, t1 = self.window
        if not 0.0 <= t0 <= t1 <= 1.0:
            raise ValueError("remask window must satisfy 0 <= t0 <= t1 <= 1")

    def sigma(self, t: float) -> float:
        t0, t1 = self.window
        return self.eta if t0 <= t <= t1 else 0.0


@dataclass
class SamplerConfig:
    steps: int = 256
    seed: int = 0
    remask: RemaskConfig = field(default_factory=RemaskConfig)
    prompt: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class DlcPredictor(Module):
    """Bidirectional transformer over [prompt slots, START, code tokens].

    Prompt slots hold small integer labels (``PAD`` for empty). Only code
    positions are predicted; the output never puts mass on MASK.
    """

    def __init__(self, L: int, V: int, rng: np.random.Generator, width: int = 128,
                 heads: int = 4, blocks: int = 2, prompt_len: int = 0, n_prompt_labels: int = 0):
        super().__init__()
        self.L, self.V = L, V
        self.mask_id = V
        self.prompt_len, self.n_prompt_labels = prompt_len, n_prompt_labels
        self.width = width
        self.offset = prompt_len + 1 if prompt_len else 0
        seq = self.offset + L
        self.tok = self.add("tok", Embedding(V + 1, width, rng))
        if prompt_len:
            self.prompt = self.add("prompt", Embedding(n_prompt_labels + 1, width, rng))
            self.params["start"] = (0.02 * rng.standard_normal(width)).astype(DTYPE)
        self.params["pos"] = (0.02 * rng.standard_normal((seq, width))).astype(DTYPE)
        self.blocks = [self.add(f"block{i}", TransformerBlock(width, heads, rng)) for i in range(blocks)]
        self.ln = self.add("ln", LayerNorm(width))
        self.head = self.add("head", Linear(width, V, rng))
        self.n_evals = 0
        self._B = None

    def _check(self, codes, prompts):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != self.L:
            raise ShapeError(f"expected codes of shape (B, {self.L})")
        if np.any((codes < 0) | (codes > self.mask_id)):
            raise IndexError("code token out of range")
        if self.prompt_len:
            if prompts is None:
                prompts = np.full((len(codes), self.prompt_len), PAD)
            prompts = np.asarray(prompts, dtype=np.int64)
            if prompts.shape != (len(codes), self.prompt_len):
                raise ShapeError(f"expected prompts of shape (B, {self.prompt_len})")
            if np.any((prompts < PAD) | (prompts >= self.n_prompt_labels)):
                raise IndexError("prompt label out of range")
        elif prompts is not None and np.size(prompts):
            raise ValueError("this predictor was built without prompt slots")
        return codes, prompts

    def logits(self, codes, prompts=None):
        codes, prompts = self._check(codes, prompts)
        B = len(codes)
        h = self.tok.forward(codes)
        if self.prompt_len:
            p = self.prompt.forward(prompts + 1)
            start = np.broadcast_to(self.params["start"], (B, 1, self.width))
            h = np.concatenate([p, start, h], axis=1)
        h = h + self.params["pos"]
        for blk in self.blocks:
            h = blk.forward(h)
        h = self.ln.forward(h)
        self._B = B
        return self.head.forward(h[:, self.offset:])

    def backward(self, dlogits):
        if self._B is None:
            raise StateError("DlcPredictor.backward called before forward")
        B = self._B
        dh_code = self.head.backward(dlogits)
        dh = np.zeros((B, self.offset + self.L, self.width), dtype=dh_code.dtype)
        dh[:, self.offset:] = dh_code
        dh = self.ln.backward(dh)
        for blk in reversed(self.blocks):
            dh = blk.backward(dh)
        self.grads["pos"] = dh.sum(axis=0)
        self.tok.backward(dh[:, self.offset:])
        if self.prompt_len:
            self.prompt.backward(dh[:, :self.prompt_len])
            self.grads["start"] = dh[:, self.prompt_len].sum(axis=0)

    def predict(self, codes, prompts=None):
        """Clean-token probabilities, shape (B, L, V)."""
        self.n_evals += 1
        return softmax(self.logits(codes, prompts).astype(np.float64))


def mask_forward(codes, t, sched: MaskSchedule, rng: np.random.Generator, mask_id: int):
    """Replace each position by ``mask_id`` independently with probability gamma(t)."""
    codes = np.asarray(codes)
    g = np.asarray(sched.gamma(t))
    if g.ndim:
        g = g.reshape(g.shape + (1,) * (codes.ndim - g.ndim))
    return np.where(rng.random(codes.shape) < g, mask_id, codes)


def masked_ce_loss(net: DlcPredictor, codes, prompts, sched: MaskSchedule,
                   rng: np.random.Generator, t=None, backward: bool = False,
                   prompt_drop: float = 0.0) -> float:
    """Weighted cross-entropy on masked positions.

    Each row gets t ~ U(0, 1] (or the given ``t``) and weight
    gamma'(t) / gamma(t), which is 1/t for the linear schedule.
    """
    codes = np.asarray(codes, dtype=np.int64)
    B = len(codes)
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = 1.0 - rng.random(B)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    noisy = mask_forward(codes, t, sched, rng, net.mask_id)
    if prompts is not None and prompt_drop > 0:
        prompts = np.where(rng.random(np.shape(prompts)) < prompt_drop, PAD, prompts)
    masked = noisy == net.mask_id
    weight = sched.dgamma(t) / sched.gamma(t)
    logits = net.logits(noisy, prompts).astype(np.float64)
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, codes[..., None], axis=-1)[..., 0]
    loss = float((weight[:, None] * masked * nll).sum() / B)
    if backward:
        g = np.exp(logp)
        g[np.arange(B)[:, None], np.arange(net.L)[None], codes] -= 1.0
        g *= (weight[:, None] * masked)[..., None] / B
        net.backward(g.astype(net.dtype))
    return loss


def _categorical(probs, u):
    """Inverse-CDF draws along the last axis."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] * cdf[..., -1:] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def unmask_probability(sched: MaskSchedule, t: float, target: float) -> float:
    gt = float(sched.gamma(t))
    if gt == 0.0:
        raise ValueError("mask probability is zero at t but masks remain")
    q = (gt - float(sched.gamma(max(target, 0.0)))) / gt
    return min(max(q, 0.0), 1.0)


def reverse_step(net, seq, t: float, dt: float, sched: MaskSchedule, rng: np.random.Generator,
                 prompts=None, target: float | None = None) -> np.ndarray:
    """One unmasking jump from time t to ``target`` (default t - dt).

    Every masked position unmasks with probability
    (gamma(t) - gamma(target)) / gamma(t); an unmasking position draws its
    token from the predictor. Unmasked positions are untouched. Always
    consumes the same random numbers, regardless of how many masks remain.

    Rows are independent, so the predictor only sees rows in which some
    position actually unmasks at this step.
    """
    seq = np.asarray(seq)
    if target is None:
        if t - dt < -1e-12:
            raise ValueError("step would move below t = 0")
        target = t - dt
    masked = seq == net.mask_id
    u_unmask = rng.random(seq.shape)
    u_token = rng.random(seq.shape)
    out = seq.copy()
    if not masked.any():
        return out
    q = unmask_probability(sched, t, target)
    flip = masked & (u_unmask < q)
    rows = np.flatnonzero(flip.any(axis=1))
    if len(rows) == 0:
        return out
    sub_prompts = None if prompts is None else np.asarray(prompts)[rows]
    draws = _categorical(net.predict(seq[rows], sub_prompts), u_token[rows])
    out[rows] = np.where(flip[rows], draws, seq[rows])
    return out


class RemaskResult(NamedTuple):
    seq: np.ndarray
    t_next: float
    n_unmasked: int
    n_remasked: int


def remask_step(net, seq, t: float, dt: float, sched: MaskSchedule, remask: RemaskConfig,
                rng: np.random.Generator, prompts=None) -> RemaskResult:
    """Reverse step with re-masking of already-decoded tokens.

    With sigma = eta inside the window (else 0) and delta = sigma * (1 - t):
    masked positions follow the base posterior toward t - dt + delta, and
    each position that was unmasked at time t is re-masked with probability
    sigma. ``t_next`` reports t - dt + delta. At sigma = 0 this is exactly
    ``reverse_step`` and draws no extra random numbers.
    """
    seq = np.asarray(seq)
    sigma = remask.sigma(t)
    delta = sigma * (1.0 - t)
    target = t - dt + delta
    was_masked = seq == net.mask_id
    out = reverse_step(net, seq, t, dt, sched, rng, prompts, target=target)
    n_unmasked = int((was_masked & (out != net.mask_id)).sum())
    n_remasked = 0
    if sigma > 0:
        hit = ~was_masked & (rng.random(seq.shape) < sigma)
        out = np.where(hit, net.mask_id, out)
        n_remasked = int(hit.sum())
    return RemaskResult(out, target, n_unmasked, n_remasked)


def _prompt_array(net, prompt, n):
    if not prompt:
        return None if not getattr(net, "prompt_len", 0) else np.full((n, net.prompt_len), PAD)
    prompt = list(prompt)
    if len(prompt) > net.prompt_len:
        raise ValueError(f"prompt of length {len(prompt)} exceeds context {net.prompt_len}")
    row = prompt + [PAD] * (net.prompt_len - len(prompt))
    return np.tile(np.asarray(row, dtype=np.int64), (n, 1))


def run_chain(net, n: int, cfg: SamplerConfig, sched: MaskSchedule = MaskSchedule(),
              prompts=None, rng: np.random.Generator | None = None, audit: list | None = None):
    """Reverse chain from all-MASK at t = 1 on the grid t_k = 1 - k / steps.

    Remasking only reindexes the posterior target time; the loop itself
    always follows the grid so it terminates after ``steps`` evaluations.
    Masks left at t = 0 (possible when the window reaches t = 0) get one
    extra full-unmask jump.
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    seq = np.full((n, net.L), net.mask_id, dtype=np.int64)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = 1.0 - k * dt
        if cfg.remask.eta > 0 or audit is not None:
            res = remask_step(net, seq, t, dt, sched, cfg.remask, rng, prompts)
            seq = res.seq
            if audit is not None:
                audit.append(res)
        else:
            seq = reverse_step(net, seq, t, dt, sched, rng, prompts, target=max(t - dt, 0.0))
    if np.any(seq == net.mask_id):
        seq = reverse_step(net, seq, max(dt, 1e-12), dt, sched, rng, prompts, target=0.0)
    return seq


def sample(net, cfg: SamplerConfig, n: int = 1, sched: MaskSchedule = MaskSchedule()) -> np.ndarray:
    """Unconditional codes (or prompt-conditioned if ``cfg.prompt`` is set), shape (n, L)."""
    return run_chain(net, n, cfg, sched, _prompt_array(net, cfg.prompt, n))


def conditional_sample(net, prompt, cfg: SamplerConfig, n: int = 1,
                       sched: MaskSchedule = MaskSchedule()) -> np.ndarray:
    return run_chain(net, n, cfg, sched, _prompt_array(net, prompt, n))


def train_prior(net: DlcPredictor, draw, steps: int, batch_size: int, rng: np.random.Generator,
                sched: MaskSchedule = MaskSchedule(), lr: float = 1e-3,
                weight_decay: float = 0.0, prompt_drop: float = 0.0,
                ema: float = 0.0) -> list[float]:
    """Minimize the masked cross-entropy on ``codes, prompts = draw(rng, batch_size)``.

    With ``ema > 0`` the net ends up holding an exponential moving average of
    its weights; the raw weights follow each batch's token frequencies.
    """
    if not 0.0 <= ema < 1.0:
        raise ValueError("ema must lie in [0, 1)")
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    params = net.parameters()
    avg = {k: p.astype(np.float64) for k, p in params.items()} if ema else None
    losses = []
    for step in range(steps):
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1))))
        codes, prompts = draw(rng, batch_size)
        loss = masked_ce_loss(net, codes, prompts, sched, rng, backward=True,
                              prompt_drop=prompt_drop)
        if not math.isfinite(loss):
            raise NumericError(f"prior training diverged at step {step}")
        opt.step(params, net.gradients())
        if avg is not None:
            for k, p in params.items():
                avg[k] += (1.0 - ema) * (p - avg[k])
        losses.append(loss)
    if avg is not None:
        for k, p in params.items():
            p[...] = avg[k]
    for name, p in params.items():
        check_finite(name, p)
    return losses
