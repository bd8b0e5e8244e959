"""Small dense-array numerics with hand-written backward passes.

Every layer caches what it needs during ``forward`` and writes parameter
gradients into ``self.grads`` during ``backward``. Parameters live in plain
numpy arrays so the optimizer can update them in place.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; accepts an int, SeedSequence or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def spawn(seed, n: int) -> list[np.random.Generator]:
    """Independent child generators, one per chain/worker."""
    if isinstance(seed, np.random.Generator):
        seqs = seed.bit_generator.seed_seq.spawn(n)
    else:
        seqs = np.random.SeedSequence(int(seed)).spawn(n)
    return [make_rng(s) for s in seqs]


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed for the sub-task named by ``keys``."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sinusoidal_embedding(t, dim: int = 64, scale: float = 1000.0) -> np.ndarray:
    """Sin/cos features of continuous time ``t`` in [0, 1], shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = (scale * t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Module:
    """Parameter container. Children are registered by attribute assignment order."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = OrderedDict()
        self.grads: dict[str, np.ndarray] = OrderedDict()
        self.children: dict[str, Module] = OrderedDict()

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for cname, child in self.children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            if k not in self.grads:
                raise StateError(f"no gradient for {prefix + k}; call backward first")
            yield prefix + k, self.grads[k]
        for cname, child in self.children.items():
            yield from child.named_grads(prefix + cname + ".")

    def parameters(self) -> dict[str, np.ndarray]:
        return OrderedDict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return OrderedDict(self.named_grads())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def load_parameters(self, arrays: dict[str, np.ndarray], strict: bool = True):
        own = self.parameters()
        if strict:
            missing = set(own) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, target in own.items():
            if name not in arrays:
                continue
            src = np.asarray(arrays[name])
            if src.shape != target.shape:
                raise ShapeError(f"{name}: expected {target.shape}, got {src.shape}")
            target[...] = src

    def astype(self, dtype) -> "Module":
        """Cast parameters in place (used by the float64 gradient checker)."""
        for k in list(self.params):
            self.params[k] = self.params[k].astype(dtype)
        for child in self.children.values():
            child.astype(dtype)
        self.grads.clear()
        return self

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return DTYPE


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.params["W"] = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(DTYPE)
        if bias:
            self.params["b"] = rng.uniform(-bound, bound, size=(n_out,)).astype(DTYPE)
        self.n_in, self.n_out = n_in, n_out
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got {x.shape[-1]}")
        W = self.params["W"]
        x = np.asarray(x, dtype=W.dtype)
        self._x = x
        y = x @ W
        if "b" in self.params:
            y = y + self.params["b"]
        return y

    def backward(self, dy):
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        x2 = self._x.reshape(-1, self.n_in)
        d2 = dy.reshape(-1, self.n_out)
        self.grads["W"] = x2.T @ d2
        if "b" in self.params:
            self.grads["b"] = d2.sum(axis=0)
        return dy @ self.params["W"].T


class Activation(Module):
    def __init__(self, kind: str = "silu"):
        super().__init__()
        if kind not in ("silu", "relu"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._x = None

    def forward(self, x):
        self._x = x
        if self.kind == "relu":
            return np.maximum(x, 0)
        return silu(x)

    def backward(self, dy):
        x = self._x
        if x is None:
            raise StateError("Activation.backward called before forward")
        if self.kind == "relu":
            return dy * (x > 0)
        s = sigmoid(x)
        return dy * (s * (1.0 + x * (1.0 - s)))


class Mlp(Module):
    """Stack of Linear layers with an activation between consecutive layers."""

    def __init__(self, widths, rng: np.random.Generator, activation: str = "silu"):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        self.activation = activation
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(self.add(f"l{i}", Linear(a, b, rng)))
            if i < len(widths) - 2:
                self.layers.append(self.add(f"a{i}", Activation(activation)))
        self._ran_forward = False

    def forward(self, x):
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"Mlp expects input dim {self.widths[0]}, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer.forward(x)
        self._ran_forward = True
        return x

    def backward(self, dy):
        if not self._ran_forward:
            raise StateError("Mlp.backward called before forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        super().__init__()
        self.params["E"] = (scale * rng.standard_normal((n, dim))).astype(DTYPE)
        self._idx = None

    def forward(self, idx):
        idx = np.asarray(idx)
        n = self.params["E"].shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"embedding index out of range [0, {n})")
        self._idx = idx
        return self.params["E"][idx]

    def backward(self, dy):
        if self._idx is None:
            raise StateError("Embedding.backward called before forward")
        g = np.zeros_like(self.params["E"])
        np.add.at(g, self._idx.reshape(-1), dy.reshape(-1, g.shape[1]))
        self.grads["E"] = g
        return None


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.params["g"] = np.ones(dim, dtype=DTYPE)
        self.params["b"] = np.zeros(dim, dtype=DTYPE)
        self.eps = eps
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        self._cache = (xhat, rstd)
        return xhat * self.params["g"] + self.params["b"]

    def backward(self, dy):
        if self._cache is None:
            raise StateError("LayerNorm.backward called before forward")
        xhat, rstd = self._cache
        d = xhat.shape[-1]
        self.grads["g"] = (dy * xhat).reshape(-1, d).sum(axis=0)
        self.grads["b"] = dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.params["g"]
        return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                       - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


class SelfAttention(Module):
    """Bidirectional multi-head self-attention over (B, S, D)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim, self.heads, self.hd = dim, heads, dim // heads
        self.qkv = self.add("qkv", Linear(dim, 3 * dim, rng))
        self.out = self.add("out", Linear(dim, dim, rng))
        self._cache = None

    def forward(self, x):
        B, S, D = x.shape
        H, hd = self.heads, self.hd
        qkv = self.qkv.forward(x).reshape(B, S, 3, H, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, H, S, hd)
        scale = 1.0 / math.sqrt(hd)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = att @ v
        self._cache = (q, k, v, att, scale)
        return self.out.forward(o.transpose(0, 2, 1, 3).reshape(B, S, D))

    def backward(self, dy):
        if self._cache is None:
            raise StateError("SelfAttention.backward called before forward")
        q, k, v, att, scale = self._cache
        B, H, S, hd = q.shape
        do = self.out.backward(dy).reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        dscore = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscore @ k
        dk = dscore.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, S, 3 * H * hd)
        return self.qkv.backward(dqkv)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        super().__init__()
        self.ln1 = self.add("ln1", LayerNorm(dim))
        self.attn = self.add("attn", SelfAttention(dim, heads, rng))
        self.ln2 = self.add("ln2", LayerNorm(dim))
        self.mlp = self.add("mlp", Mlp([dim, mlp_ratio * dim, dim], rng))

    def forward(self, x):
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.mlp.forward(self.ln2.forward(x))

    def backward(self, dy):
        dy = dy + self.ln2.backward(self.mlp.backward(dy))
        return dy + self.ln1.backward(self.attn.backward(dy))


class AdamW:
    """AdamW with decoupled weight decay, keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name}")
            if g.shape != params[name].shape:
                raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return params


def gradient_check(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   loss_fn: Callable[[], float], rng: np.random.Generator,
                   n_samples: int = 64, step: float = 1e-3) -> float:
    """Max relative error between analytic grads and central differences
    over ``n_samples`` distinct parameter entries.

    ``loss_fn`` must recompute the loss from the current contents of
    ``params``; entries are perturbed in place and restored. Run it on a
    float64 copy of the model, float32 round-off swamps a 1e-3 step.
    """
    names = list(params)
    ends = np.cumsum([params[n].size for n in names])
    picks = rng.choice(int(ends[-1]), size=min(n_samples, int(ends[-1])), replace=False)
    worst = 0.0
    for flat in picks:
        i = int(np.searchsorted(ends, flat, side="right"))
        name = names[i]
        p = params[name].reshape(-1)
        j = int(flat - (ends[i - 1] if i else 0))
        old = p[j]
        p[j] = old + step
        up = float(loss_fn())
        p[j] = old - step
        down = float(loss_fn())
        p[j] = old
        numeric = (up - down) / (2 * step)
        analytic = float(grads[name].reshape(-1)[j])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
