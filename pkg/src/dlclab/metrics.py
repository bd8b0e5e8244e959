"""Sample-quality metrics: KDE-based KL, Vendi diversity, mode coverage."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .nn import make_rng
from .toydata import GridMixtureSpec, exact_log_density, sample

LOG_FLOOR = math.log(1e-300)
EVAL_SEED = 20240917


class DegenerateInputError(ValueError):
    pass


def silverman_bandwidth(samples, dim: int | None = None) -> float:
    """h = s * (4 / (d + 2)) ** (1 / (d + 4)) * n ** (-1 / (d + 4)).

    ``s`` is the mean of the per-dimension sample standard deviations.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if dim is not None and dim != d:
        raise ValueError(f"samples have dimension {d}, expected {dim}")
    if n < 2:
        raise DegenerateInputError("Silverman bandwidth needs at least two samples")
    s = x.std(axis=0, ddof=1).mean()
    if not s > 0:
        raise DegenerateInputError("samples have zero variance")
    return s * (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4))


@dataclass
class KdeModel:
    support: np.ndarray
    bandwidth: float

    @classmethod
    def fit(cls, samples, bandwidth: float | None = None) -> "KdeModel":
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
        if not h > 0:
            raise ValueError("bandwidth must be positive")
        return cls(support=x, bandwidth=h)

    def log_density(self, x, chunk_elems: int = 4_000_000) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        S = self.support
        n, d = S.shape
        h2 = self.bandwidth ** 2
        norm = math.log(n) + 0.5 * d * math.log(2 * math.pi * h2)
        s2 = (S * S).sum(1)
        out = np.empty(len(x))
        step = max(1, chunk_elems // n)
        for i in range(0, len(x), step):
            xb = x[i:i + step]
            d2 = (xb * xb).sum(1)[:, None] + s2[None] - 2.0 * xb @ S.T
            np.maximum(d2, 0.0, out=d2)
            out[i:i + step] = logsumexp(-d2 / (2 * h2), axis=1) - norm
        return np.maximum(out, LOG_FLOOR)


def kl_estimate(spec: GridMixtureSpec, model_samples, n_eval: int = 5000,
                eval_seed: int = EVAL_SEED, direction: str = "data_model",
                min_bandwidth: float = 1e-3, min_samples: int = 1000) -> float:
    """Monte-Carlo KL between the exact mixture and a KDE of ``model_samples``.

    ``direction="data_model"`` gives KL(p_data || p_model), averaging over
    fresh data points drawn with ``eval_seed``. ``"model_data"`` averages over
    held-out model samples instead. A degenerate sample set (zero spread)
    gets ``min_bandwidth``.
    """
    m = np.asarray(model_samples, dtype=np.float64)
    if len(m) < min_samples:
        raise ValueError(f"need at least {min_samples} model samples, got {len(m)}")
    if not np.all(np.isfinite(m)):
        raise ValueError("model samples contain non-finite values")
    rng = make_rng(eval_seed)
    if direction == "data_model":
        try:
            kde = KdeModel.fit(m)
        except DegenerateInputError:
            kde = KdeModel.fit(m, bandwidth=min_bandwidth)
        x = sample(spec, n_eval, rng).x
        return float(np.mean(exact_log_density(spec, x) - kde.log_density(x)))
    if direction == "model_data":
        perm = rng.permutation(len(m))
        half = len(m) // 2
        fit, ev = m[perm[:half]], m[perm[half:half + n_eval]]
        try:
            kde = KdeModel.fit(fit)
        except DegenerateInputError:
            kde = KdeModel.fit(fit, bandwidth=min_bandwidth)
        lp = np.maximum(exact_log_density(spec, ev), LOG_FLOOR)
        return float(np.mean(kde.log_density(ev) - lp))
    raise ValueError(f"unknown KL direction {direction!r}")


def rbf_kernel(x, bandwidth: float | None = None) -> np.ndarray:
    """Unit-diagonal RBF Gram matrix; default bandwidth is the median pairwise distance."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    sq = (x * x).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    if bandwidth is None:
        iu = np.triu_indices(len(x), 1)
        bandwidth = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 0.0
    if bandwidth <= 0:
        # all points coincide (or a single point): the kernel is all ones
        if np.all(d2 == 0):
            return np.ones_like(d2)
        raise ValueError("bandwidth must be positive")
    return np.exp(-d2 / (2 * bandwidth ** 2))


def vendi_score(samples=None, bandwidth: float | None = None, kernel=None,
                neg_tol: float = 1e-8) -> float:
    """exp(Shannon entropy of the eigenvalues of K / n)."""
    K = rbf_kernel(samples, bandwidth) if kernel is None else np.asarray(kernel, dtype=np.float64)
    n = len(K)
    if n < 1:
        raise ValueError("need at least one sample")
    lam = np.linalg.eigvalsh(K / n)
    if lam.min() < -neg_tol:
        raise ValueError(f"kernel is not positive semi-definite (eigenvalue {lam.min():.3g})")
    lam = lam[lam > 1e-12]
    if lam.max() - lam.min() <= 1e-12 * lam.max():
        # flat spectrum over k eigenvalues: exp(log k) is k, without round-off
        return float(len(lam))
    lam = lam / lam.sum()
    return float(math.exp(-(lam * np.log(lam)).sum()))


def nearest_mode(spec: GridMixtureSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest center and the distance to it."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    C = spec.centers()
    d2 = ((x[:, None, :] - C[None]) ** 2).sum(-1) if len(C) * len(x) < 5e7 else None
    if d2 is None:
        idx = np.empty(len(x), dtype=np.int64)
        dist = np.empty(len(x))
        for s in range(0, len(x), 20000):
            part = ((x[s:s + 20000, None, :] - C[None]) ** 2).sum(-1)
            idx[s:s + 20000] = part.argmin(1)
            dist[s:s + 20000] = np.sqrt(part.min(1))
        return idx, dist
    return d2.argmin(1), np.sqrt(d2.min(1))


def mode_stats(spec: GridMixtureSpec, samples, radius_sigmas: float = 3.0):
    """(coverage, precision): modes hit within 3 std, and samples within 3 std of their mode."""
    idx, dist = nearest_mode(spec, samples)
    close = dist <= radius_sigmas * spec.std
    coverage = len(np.unique(idx[close])) / spec.n_modes
    precision = float(close.mean()) if len(close) else 0.0
    return coverage, precision


@dataclass
class EvalReport:
    kld: float
    vendi: float
    mode_coverage: float
    mode_precision: float
    n_samples: int

    def as_row(self) -> dict:
        return asdict(self)

    def pretty(self) -> str:
        return "\n".join(f"{k:>15}: {v:.6g}" if isinstance(v, float) else f"{k:>15}: {v}"
                         for k, v in asdict(self).items())


def evaluate(spec: GridMixtureSpec, samples, vendi_n: int = 2000, seed: int = EVAL_SEED) -> EvalReport:
    samples = np.asarray(samples, dtype=np.float64)
    cov, prec = mode_stats(spec, samples)
    sub = samples[make_rng(seed).permutation(len(samples))[:vendi_n]]
    return EvalReport(kld=kl_estimate(spec, samples), vendi=vendi_score(sub),
                      mode_coverage=cov, mode_precision=prec, n_samples=len(samples))
