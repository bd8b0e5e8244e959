"""Gaussian mixture fitting by expectation-maximization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


@dataclass
class GmmModel:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, D)
    covariances: np.ndarray  # (K, D, D)
    kind: str = "isotropic"

    @property
    def K(self) -> int:
        return len(self.weights)

    def component_log_prob(self, x) -> np.ndarray:
        """log w_k + log N(x | mu_k, Sigma_k), shape (N, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        N, D = x.shape
        out = np.empty((N, self.K))
        if self.kind == "isotropic":
            var = self.covariances[:, 0, 0]
            sq = (x * x).sum(1)[:, None] + (self.means ** 2).sum(1)[None] - 2 * x @ self.means.T
            np.maximum(sq, 0.0, out=sq)
            out[:] = -0.5 * sq / var - 0.5 * D * np.log(2 * np.pi * var)
        else:
            for k in range(self.K):
                L = np.linalg.cholesky(self.covariances[k])
                z = np.linalg.solve(L, (x - self.means[k]).T)
                out[:, k] = (-0.5 * (z * z).sum(0) - np.log(np.diag(L)).sum()
                             - 0.5 * D * math.log(2 * math.pi))
        with np.errstate(divide="ignore"):
            return out + np.log(self.weights)[None]

    def responsibilities(self, x) -> np.ndarray:
        lp = self.component_log_prob(x)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def mean_log_likelihood(self, x) -> float:
        return float(logsumexp(self.component_log_prob(x), axis=1).mean())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"gmm.weights": self.weights, "gmm.means": self.means,
                "gmm.covariances": self.covariances}

    @classmethod
    def from_arrays(cls, arrays, kind: str = "isotropic") -> "GmmModel":
        return cls(np.asarray(arrays["gmm.weights"], np.float64),
                   np.asarray(arrays["gmm.means"], np.float64),
                   np.asarray(arrays["gmm.covariances"], np.float64), kind)


def kmeanspp_init(data, K: int, rng: np.random.Generator, n_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding: best of ``n_trials`` D^2-sampled candidates per center."""
    x = np.asarray(data, dtype=np.float64)
    N = len(x)
    n_trials = n_trials or 2 + int(math.log(K))
    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(N)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            centers[k:] = x[rng.integers(N, size=K - k)]
            break
        cand = np.searchsorted(np.cumsum(d2), rng.random(n_trials) * total)
        cand = np.minimum(cand, N - 1)
        cd2 = ((x[None] - x[cand][:, None]) ** 2).sum(-1)
        new = np.minimum(d2[None], cd2)
        best = int(new.sum(1).argmin())
        centers[k] = x[cand[best]]
        d2 = new[best]
    return centers


def _m_step(x, resp, kind: str, rng: np.random.Generator):
    N, D = x.shape
    Nk = resp.sum(0)
    empty = Nk < 1e-8
    if np.any(empty):
        # no responsibility mass: restart those components from random data points
        log.warning("re-seeding %d empty GMM components", int(empty.sum()))
        resp = resp.copy()
        for k in np.flatnonzero(empty):
            resp[:, k] = 0.0
            resp[rng.integers(N), k] = 1.0
        Nk = resp.sum(0)
    weights = Nk / N
    means = (resp.T @ x) / Nk[:, None]
    if kind == "isotropic":
        sq = (x * x).sum(1)[:, None] + (means ** 2).sum(1)[None] - 2 * x @ means.T
        var = np.maximum((resp * np.maximum(sq, 0)).sum(0) / (Nk * D), VAR_FLOOR)
        cov = var[:, None, None] * np.eye(D)[None]
    elif kind == "full":
        cov = np.empty((len(Nk), D, D))
        for k in range(len(Nk)):
            diff = x - means[k]
            c = (resp[:, k, None] * diff).T @ diff / Nk[k]
            w, v = np.linalg.eigh((c + c.T) / 2)
            cov[k] = (v * np.maximum(w, VAR_FLOOR)) @ v.T
    else:
        raise ValueError(f"unknown covariance kind {kind!r}")
    return GmmModel(weights, means, cov, kind), bool(np.any(empty))


def em_fit(data, K: int, rng: np.random.Generator, max_iters: int = 200, tol: float = 1e-6,
           kind: str = "isotropic", init: str = "kmeans++"):
    """Fit a K-component mixture; returns ``(model, ll_trace)``.

    ``ll_trace[i]`` is the mean log-likelihood of the parameters after i
    M-steps. Iteration stops once the improvement drops below ``tol``.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data must be (N, D)")
    N, D = x.shape
    if N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    if init == "kmeans++":
        means = kmeanspp_init(x, K, rng)
    elif init == "random":
        means = x[rng.choice(N, size=K, replace=False)]
    else:
        raise ValueError(f"unknown init {init!r}")
    var0 = max(float(x.var(0).mean()) / K, VAR_FLOOR)
    model = GmmModel(np.full(K, 1.0 / K), means, var0 * np.tile(np.eye(D), (K, 1, 1)), kind)
    # hard assignment to the seeds gives the first M-step
    resp = np.zeros((N, K))
    d2 = (x * x).sum(1)[:, None] + (means ** 2).sum(1)[None] - 2 * x @ means.T
    resp[np.arange(N), d2.argmin(1)] = 1.0
    model, _ = _m_step(x, resp, kind, rng)
    trace = []
    for _ in range(max_iters):
        lp = model.component_log_prob(x)
        norm = logsumexp(lp, axis=1, keepdims=True)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        model, _ = _m_step(x, np.exp(lp - norm), kind, rng)
    return model, np.array(trace)


def assign_index(model: GmmModel, x) -> np.ndarray:
    """Most responsible component per point; ``argmax`` breaks ties toward the lowest index."""
    return model.component_log_prob(x).argmax(axis=1)


def label_agreement(pred, truth) -> float:
    """Fraction of matching labels under the best one-to-one relabeling."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    P, T = pred.max() + 1, truth.max() + 1
    conf = np.zeros((P, T), dtype=np.int64)
    np.add.at(conf, (pred, truth), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / len(pred))
