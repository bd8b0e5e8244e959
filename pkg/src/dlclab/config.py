"""Run configuration: line-based ``key = value`` text with dotted namespaces.

    # comment
    seed = 7
    data.rows = 4
    toy.grids = 9, 121, 441

Unknown keys and unparsable values raise ``ConfigError``. Every known key has
a default, so an empty file is a valid config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .codec import SemConfig
from .diffusion import NoiseSchedule
from .discrete import MaskSchedule, RemaskConfig
from .toydata import GridMixtureSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    rows: int = 4
    cols: int = 4
    spacing: float = 1.0
    variance: float = 0.01

    def spec(self) -> GridMixtureSpec:
        return GridMixtureSpec(self.rows, self.cols, self.spacing, self.variance)


@dataclass
class ContConfig:
    T: int = 250
    schedule: str = "cosine"
    hidden: int = 256
    depth: int = 4
    time_dim: int = 64
    cond_dim: int = 64
    activation: str = "silu"
    steps: int = 1500
    batch: int = 512
    lr: float = 1e-3
    weight_decay: float = 0.0
    p_drop: float = 0.1
    guidance: float = 0.0

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.make(self.T, self.schedule)


@dataclass
class CodecConfig:
    L: int = 2
    V: int = 4
    d: int = 32
    tau: float = 0.5
    hidden: int = 128
    factorized: bool = True
    logit_noise: float = 1.0
    steps: int = 2000
    batch: int = 256
    lr: float = 3e-3

    def sem(self) -> SemConfig:
        return SemConfig(self.L, self.V, self.d, self.tau, self.hidden, self.factorized,
                         self.logit_noise)


@dataclass
class PriorConfig:
    width: int = 128
    heads: int = 4
    blocks: int = 2
    steps: int = 1500
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "linear"
    sample_steps: int = 256
    eta: float = 0.0
    window: tuple[float, ...] = (0.3, 0.55)
    prompt_drop: float = 0.5
    ema: float = 0.995

    def mask_schedule(self) -> MaskSchedule:
        return MaskSchedule(self.schedule)

    def remask(self, eta: float | None = None) -> RemaskConfig:
        if len(self.window) != 2:
            raise ConfigError("prior.window needs exactly two values")
        return RemaskConfig(self.eta if eta is None else eta, tuple(self.window))


@dataclass
class GmmConfig:
    kind: str = "isotropic"
    max_iters: int = 200
    tol: float = 1e-6
    fit_samples: int = 50000


@dataclass
class EvalConfig:
    n_samples: int = 50000
    n_eval: int = 5000
    vendi_n: int = 2000
    eval_seed: int = 20240917


@dataclass
class ToyConfig:
    grids: tuple[int, ...] = (9, 121, 441)
    regimes: tuple[str, ...] = ("uncond", "oracle", "gmm")
    n_samples: int = 20000
    lr: float = 3e-3


@dataclass
class ComposeConfig:
    mode_a: tuple[int, ...] = (0, 0)
    mode_b: tuple[int, ...] = (2, 3)
    n: int = 4000


@dataclass
class SweepConfig:
    etas: tuple[float, ...] = (0.0, 0.01, 0.1, 0.5)
    n: int = 4000


SECTIONS = {
    "data": DataConfig, "cont": ContConfig, "codec": CodecConfig, "prior": PriorConfig,
    "gmm": GmmConfig, "eval": EvalConfig, "toy": ToyConfig, "compose": ComposeConfig,
    "sweep": SweepConfig,
}
REGIMES = ("uncond", "oracle", "gmm")


@dataclass
class RunConfig:
    name: str = "dlclab"
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    cont: ContConfig = field(default_factory=ContConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or not key:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            if key in seen:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            seen.add(key)
            cfg.set(key, value, where=f"line {lineno}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                return cls.from_text(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e

    def set(self, key: str, value: str, where: str = "override"):
        section, _, name = key.rpartition(".")
        target = getattr(self, section, None) if section else self
        if section and section not in SECTIONS or (not section and key in SECTIONS):
            raise ConfigError(f"{where}: unknown key {key!r}")
        hints = typing.get_type_hints(type(target))
        if name not in hints:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            setattr(target, name, _parse(hints[name], value))
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key!r}: {e}") from e

    def items(self):
        """Flat (key, value) pairs in canonical order."""
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in SECTIONS:
                for g in dataclasses.fields(v):
                    yield f"{f.name}.{g.name}", getattr(v, g.name)
            else:
                yield f.name, v

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def hash(self) -> str:
        """Digest of every setting except ``seed`` and ``out`` (those are reported separately)."""
        body = "".join(f"{k} = {_format(v)}\n" for k, v in self.items() if k not in ("seed", "out"))
        return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]

    def validate(self):
        try:
            self.data.spec()
            self.cont.noise_schedule()
            self.codec.sem()
            self.prior.mask_schedule()
            self.prior.remask()
            for eta in self.sweep.etas:
                self.prior.remask(eta)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.cont.activation not in ("silu", "relu"):
            raise ConfigError(f"cont.activation must be silu or relu, got {self.cont.activation!r}")
        if not 0 <= self.cont.p_drop < 1 or not 0 <= self.prior.prompt_drop < 1:
            raise ConfigError("drop probabilities must lie in [0, 1)")
        for key in ("cont.lr", "codec.lr", "prior.lr", "toy.lr"):
            section, name = key.split(".")
            if not getattr(getattr(self, section), name) > 0:
                raise ConfigError(f"{key} must be positive")
        if not 0 <= self.prior.ema < 1:
            raise ConfigError("prior.ema must lie in [0, 1)")
        if self.cont.guidance < 0:
            raise ConfigError("cont.guidance must be non-negative")
        if self.gmm.kind not in ("isotropic", "full"):
            raise ConfigError(f"gmm.kind must be isotropic or full, got {self.gmm.kind!r}")
        bad = [r for r in self.toy.regimes if r not in REGIMES]
        if bad:
            raise ConfigError(f"unknown regimes {bad}; choose from {REGIMES}")
        for g in self.toy.grids:
            if round(g ** 0.5) ** 2 != g:
                raise ConfigError(f"toy grid size {g} is not a perfect square")
        for key in ("mode_a", "mode_b"):
            rc = getattr(self.compose, key)
            if len(rc) != 2 or not (0 <= rc[0] < self.data.rows and 0 <= rc[1] < self.data.cols):
                raise ConfigError(f"compose.{key} must be 'row, col' inside the grid")
        positive = {k: v for k, v in self.items()
                    if isinstance(v, int) and not isinstance(v, bool)
                    and k.rsplit(".", 1)[-1] in ("steps", "batch", "n", "n_samples", "n_eval",
                                                 "vendi_n", "fit_samples", "max_iters",
                                                 "sample_steps", "hidden", "width", "heads",
                                                 "blocks", "depth", "time_dim", "cond_dim")}
        for k, v in positive.items():
            if v < 1:
                raise ConfigError(f"{k} must be positive, got {v}")
        for key in ("eval.n_samples", "sweep.n", "toy.n_samples"):
            section, name = key.split(".")
            if getattr(getattr(self, section), name) < 1000:
                raise ConfigError(f"{key} must be at least 1000 for KL estimation")


def _parse(tp, text: str):
    if typing.get_origin(tp) is tuple:
        (elem, _) = typing.get_args(tp)
        parts = [p.strip() for p in text.split(",")] if text.strip() else []
        return tuple(_parse(elem, p) for p in parts)
    if tp is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text, 0)
    if tp is float:
        return float(text)
    return text


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
