"""End-to-end runs behind the command line: training, sampling, evaluation, reports.

Every randomized stage draws from its own generator, seeded by
``derive_seed(run seed, stage name, ...)``, so stages can be rerun or
reordered without disturbing each other's streams.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint, select
from .codec import (SemEncoder, TokenEmbedder, code_lookup, compose, encode_codes, make_decoder,
                    train_encoder)
from .config import ConfigError, RunConfig
from .diffusion import GuidanceConfig, LabelEmbedder, ScoreNet, sample_ddpm, train_score_net
from .discrete import PAD, DlcPredictor, SamplerConfig, run_chain, train_prior
from .gmm import assign_index, em_fit, label_agreement
from .metrics import kl_estimate, mode_stats, nearest_mode, rbf_kernel, vendi_score
from .nn import NumericError, derive_seed, make_rng
from .toydata import GridMixtureSpec, sample

log = logging.getLogger(__name__)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


@dataclass
class Run:
    cfg: RunConfig
    out: Path

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def rng(self, *keys) -> np.random.Generator:
        return make_rng(derive_seed(self.seed, *keys))

    def path(self, name: str) -> Path:
        return self.out / name

    def write_csv(self, name: str, header: list[str], rows: list[dict]) -> Path:
        """Write rows with the seed and config hash appended to every line."""
        tag = {"seed": self.seed, "config_hash": self.cfg.hash()}
        full = list(header) + list(tag)
        atomic_write(self.path(name), csv_text(full, [{**r, **tag} for r in rows]))
        return self.path(name)

    def save(self, name: str, models: dict):
        save_checkpoint(self.path(name), models, self.cfg.to_text())

    def load(self, name: str):
        """Checkpoint plus the config it was written with."""
        ck = load_checkpoint(self.path(name))
        return ck, RunConfig.from_text(ck.config_text)


def worker_count() -> int:
    raw = os.environ.get("DLCLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DLCLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DLCLAB_THREADS must be a positive integer, got {raw!r}")
    return n


def _guidance(cfg: RunConfig) -> GuidanceConfig | None:
    return GuidanceConfig(cfg.cont.guidance) if cfg.cont.guidance > 0 else None


def _score_net(cfg: RunConfig, rng, conditioner=None) -> ScoreNet:
    c = cfg.cont
    return ScoreNet(rng, hidden=c.hidden, depth=c.depth, time_dim=c.time_dim,
                    conditioner=conditioner, activation=c.activation, T=c.T)


def _train(cfg: RunConfig, net: ScoreNet, draw, rng, lr: float | None = None) -> list[float]:
    c = cfg.cont
    return train_score_net(net, draw, c.noise_schedule(), c.steps, c.batch, rng,
                           lr=c.lr if lr is None else lr,
                           weight_decay=c.weight_decay, p_drop=c.p_drop)


# ---------------------------------------------------------------- toy study

TOY_HEADER = ["n_modes", "regime", "kld", "kld_reverse", "mode_coverage", "mode_precision",
              "gmm_agreement", "final_loss", "status"]


def toy_cell(cfg: RunConfig, n_modes: int, regime: str) -> dict:
    """Train one conditioning regime on one grid size and score its samples."""
    spec = GridMixtureSpec.square(n_modes, spacing=cfg.data.spacing, variance=cfg.data.variance)
    rng = make_rng(derive_seed(cfg.seed, "toy", n_modes, regime))
    row = dict(n_modes=n_modes, regime=regime, kld=math.nan, kld_reverse=math.nan,
               mode_coverage=math.nan, mode_precision=math.nan, gmm_agreement="",
               final_loss=math.nan, status="ok")
    n = cfg.toy.n_samples
    try:
        if regime == "uncond":
            net = _score_net(cfg, rng)
            labels = None

            def draw(r, b):
                return sample(spec, b, r).x, None
        elif regime == "oracle":
            net = _score_net(cfg, rng, LabelEmbedder(n_modes, cfg.cont.cond_dim, rng))
            labels = rng.integers(n_modes, size=n)

            def draw(r, b):
                s = sample(spec, b, r)
                return s.x, s.mode
        elif regime == "gmm":
            fit_data = sample(spec, cfg.gmm.fit_samples, rng)
            gmm, _ = em_fit(fit_data.x, n_modes, rng, max_iters=cfg.gmm.max_iters,
                            tol=cfg.gmm.tol, kind=cfg.gmm.kind)
            row["gmm_agreement"] = label_agreement(assign_index(gmm, fit_data.x), fit_data.mode)
            net = _score_net(cfg, rng, LabelEmbedder(n_modes, cfg.cont.cond_dim, rng))
            labels = rng.choice(n_modes, size=n, p=gmm.weights / gmm.weights.sum())

            def draw(r, b):
                x = sample(spec, b, r).x
                return x, assign_index(gmm, x)
        else:
            raise ConfigError(f"unknown regime {regime!r}")
        losses = _train(cfg, net, draw, rng, lr=cfg.toy.lr)
        row["final_loss"] = float(np.mean(losses[-100:]))
        x = sample_ddpm(net, cfg.cont.noise_schedule(), labels, n, rng,
                        g=_guidance(cfg) if labels is not None else None)
        row.update(_scores(cfg, spec, x))
    except NumericError as e:
        log.error("toy cell %d/%s failed: %s", n_modes, regime, e)
        row["status"] = f"failed: {e}"
    return row


def _scores(cfg: RunConfig, spec: GridMixtureSpec, x) -> dict:
    cov, prec = mode_stats(spec, x)
    kw = dict(n_eval=cfg.eval.n_eval, eval_seed=cfg.eval.eval_seed)
    return dict(kld=kl_estimate(spec, x, **kw),
                kld_reverse=kl_estimate(spec, x, direction="model_data", **kw),
                mode_coverage=cov, mode_precision=prec)


def _toy_cell_star(args):
    return toy_cell(*args)


def reproduce_toy(run: Run) -> int:
    """All regimes on all grid sizes -> kld_vs_modes.csv / .svg. Returns an exit code."""
    cells = [(run.cfg, g, r) for g in run.cfg.toy.grids for r in run.cfg.toy.regimes]
    workers = min(worker_count(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_toy_cell_star, cells))
    else:
        rows = []
        for c in cells:
            rows.append(toy_cell(*c))
            log.info("toy %s", {k: rows[-1][k] for k in ("n_modes", "regime", "kld")})
    path = run.write_csv("kld_vs_modes.csv", TOY_HEADER, rows)
    plotting.kld_vs_modes(path, run.path("kld_vs_modes.svg"))
    for r in rows:
        print(f"{r['n_modes']:>5} {r['regime']:<7} kld={_fmt(r['kld'])} status={r['status']}")
    return 2 if any(r["status"] != "ok" for r in rows) else 0


# ---------------------------------------------------------------- DLC pipeline

def _spec(cfg: RunConfig) -> GridMixtureSpec:
    return cfg.data.spec()


def grid_prompts(spec: GridMixtureSpec, rows, cols) -> np.ndarray:
    """Prompt slots ``[row label, col label]``; column labels follow the row labels."""
    return np.stack([np.asarray(rows), spec.rows + np.asarray(cols)], axis=1).astype(np.int64)


def build_encoder(cfg: RunConfig, rng):
    sem = cfg.codec.sem()
    return SemEncoder(sem, rng), make_decoder(sem, rng)


def build_prior(cfg: RunConfig, rng) -> DlcPredictor:
    p, spec = cfg.prior, _spec(cfg)
    return DlcPredictor(cfg.codec.L, cfg.codec.V, rng, width=p.width, heads=p.heads,
                        blocks=p.blocks, prompt_len=2, n_prompt_labels=spec.rows + spec.cols)


def build_cond(cfg: RunConfig, rng) -> ScoreNet:
    emb = TokenEmbedder(cfg.codec.L, cfg.codec.V, cfg.cont.cond_dim, rng)
    return _score_net(cfg, rng, emb)


def load_encoder(run: Run) -> SemEncoder:
    ck, cfg = run.load("encoder.dlck")
    enc, _ = build_encoder(cfg, make_rng(0))
    enc.load_parameters(select(ck.arrays, "enc"))
    return enc


def load_prior(run: Run) -> DlcPredictor:
    ck, cfg = run.load("prior.dlck")
    net = build_prior(cfg, make_rng(0))
    net.load_parameters(select(ck.arrays, "prior"))
    return net


def load_cond(run: Run) -> ScoreNet:
    ck, cfg = run.load("cond.dlck")
    net = build_cond(cfg, make_rng(0))
    net.load_parameters(select(ck.arrays, "cond"))
    return net


def identifiability(run: Run, enc: SemEncoder) -> tuple[float, int]:
    """Held-out accuracy of a code -> mode lookup table, and the number of distinct codes."""
    spec, rng = _spec(run.cfg), run.rng("identifiability")
    train, test = sample(spec, 20000, rng), sample(spec, 5000, rng)
    table = code_lookup(encode_codes(enc, train.x), train.mode)
    pred = np.array([table.get(tuple(c), -1) for c in encode_codes(enc, test.x)])
    return float((pred == test.mode).mean()), len(table)


def cmd_train_encoder(run: Run) -> SemEncoder:
    cfg, spec, rng = run.cfg, _spec(run.cfg), run.rng("encoder")
    enc, dec = build_encoder(cfg, rng)
    c = cfg.codec
    losses = train_encoder(enc, dec, lambda r, n: sample(spec, n, r).x, rng, steps=c.steps,
                           batch_size=c.batch, lr=c.lr)
    run.save("encoder.dlck", {"enc": enc, "dec": dec})
    acc, n_codes = identifiability(run, enc)
    run.write_csv("encoder.csv", ["final_loss", "n_codes", "identifiability"],
                  [dict(final_loss=float(np.mean(losses[-100:])), n_codes=n_codes,
                        identifiability=acc)])
    centers = spec.centers()
    codes = encode_codes(enc, centers)
    rc = [spec.row_col(m) for m in range(spec.n_modes)]
    header = ["mode", "row", "col"] + [f"t{i}" for i in range(c.L)]
    run.write_csv("codebook.csv", header,
                  [dict(mode=m, row=rc[m][0], col=rc[m][1], **{f"t{i}": codes[m, i] for i in range(c.L)})
                   for m in range(spec.n_modes)])
    print(f"encoder: loss={losses[-1]:.5f} codes={n_codes} identifiability={acc:.4f}")
    return enc


def cmd_tokenize(run: Run):
    enc = load_encoder(run)
    spec = _spec(run.cfg)
    data = sample(spec, run.cfg.eval.n_eval, run.rng("tokenize"))
    codes = encode_codes(enc, data.x)
    L = codes.shape[1]
    header = ["x0", "x1", "mode", "row", "col"] + [f"t{i}" for i in range(L)]
    rows = [dict(x0=data.x[j, 0], x1=data.x[j, 1], mode=data.mode[j], row=data.row[j],
                 col=data.col[j], **{f"t{i}": codes[j, i] for i in range(L)})
            for j in range(len(codes))]
    run.write_csv("codes.csv", header, rows)
    print(f"tokenized {len(codes)} points into {len({tuple(c) for c in codes})} distinct codes")
    return codes


def _loss_rows(losses, every: int = 50) -> list[dict]:
    return [dict(step=s, loss=float(np.mean(losses[s:s + every])))
            for s in range(0, len(losses), every)]


def cmd_train_prior(run: Run) -> DlcPredictor:
    cfg, spec, rng = run.cfg, _spec(run.cfg), run.rng("prior")
    enc = load_encoder(run)
    net = build_prior(cfg, rng)

    def draw(r, n):
        s = sample(spec, n, r)
        return encode_codes(enc, s.x), grid_prompts(spec, s.row, s.col)

    p = cfg.prior
    losses = train_prior(net, draw, p.steps, p.batch, rng, p.mask_schedule(), lr=p.lr,
                         weight_decay=p.weight_decay, prompt_drop=p.prompt_drop, ema=p.ema)
    run.save("prior.dlck", {"prior": net})
    run.write_csv("prior_loss.csv", ["step", "loss"], _loss_rows(losses))
    print(f"prior: final loss {np.mean(losses[-100:]):.4f}")
    return net


def cmd_train_cond(run: Run) -> ScoreNet:
    cfg, spec, rng = run.cfg, _spec(run.cfg), run.rng("cond")
    enc = load_encoder(run)
    net = build_cond(cfg, rng)

    def draw(r, n):
        x = sample(spec, n, r).x
        return x, encode_codes(enc, x)

    losses = _train(cfg, net, draw, rng)
    run.save("cond.dlck", {"cond": net})
    run.write_csv("cond_loss.csv", ["step", "loss"], _loss_rows(losses))
    print(f"conditional diffusion: final loss {np.mean(losses[-100:]):.4f}")
    return net


def sample_codes(run: Run, prior: DlcPredictor, n: int, eta: float | None = None,
                 prompts=None, audit: list | None = None, key: str = "prior-sample") -> np.ndarray:
    p = run.cfg.prior
    scfg = SamplerConfig(steps=p.sample_steps, seed=derive_seed(run.seed, key),
                         remask=p.remask(eta))
    if prompts is None:
        prompts = np.full((n, prior.prompt_len), PAD, dtype=np.int64)
    return run_chain(prior, n, scfg, p.mask_schedule(), prompts, audit=audit)


def decode_codes(run: Run, cond: ScoreNet, codes, key: str) -> np.ndarray:
    return sample_ddpm(cond, run.cfg.cont.noise_schedule(), codes, len(codes), run.rng(key),
                       g=_guidance(run.cfg))


PIPE_HEADER = ["method", "kld", "kld_reverse", "vendi", "mode_coverage", "mode_precision",
               "n_samples"]


def cmd_pipeline(run: Run, reuse: bool = False) -> dict:
    """Two-stage sampling (code from the prior, point from the code) vs. an unconditional
    model trained with the same diffusion budget."""
    cfg, spec = run.cfg, _spec(run.cfg)
    if reuse:
        prior, cond = load_prior(run), load_cond(run)
        ck, _ = run.load("uncond.dlck")
        uncond = _score_net(cfg, make_rng(0))
        uncond.load_parameters(select(ck.arrays, "uncond"))
    else:
        cmd_train_encoder(run)
        prior = cmd_train_prior(run)
        cond = cmd_train_cond(run)
        rng = run.rng("uncond")
        uncond = _score_net(cfg, rng)
        _train(cfg, uncond, lambda r, n: (sample(spec, n, r).x, None), rng)
        run.save("uncond.dlck", {"uncond": uncond})
    n = cfg.eval.n_samples
    codes = sample_codes(run, prior, n)
    x_pipe = decode_codes(run, cond, codes, "pipeline-decode")
    x_unc = sample_ddpm(uncond, cfg.cont.noise_schedule(), None, n, run.rng("uncond-sample"))
    rows = []
    for method, x in (("pipeline", x_pipe), ("uncond", x_unc)):
        sub = x[run.rng("vendi", method).permutation(n)[:cfg.eval.vendi_n]]
        rows.append(dict(method=method, vendi=vendi_score(sub), n_samples=n,
                         **_scores(cfg, spec, x)))
    path = run.write_csv("pipeline.csv", PIPE_HEADER, rows)
    keep = min(n, 2000)
    run.write_csv("pipeline_samples.csv", ["method", "x0", "x1"],
                  [dict(method=m, x0=x[j, 0], x1=x[j, 1])
                   for m, x in (("pipeline", x_pipe), ("uncond", x_unc)) for j in range(keep)])
    plotting.scatter(run.path("pipeline_samples.csv"), run.path("pipeline.svg"))
    for r in rows:
        print(" ".join(f"{k}={_fmt(r[k])}" for k in PIPE_HEADER))
    log.info("wrote %s", path)
    return {r["method"]: r for r in rows}


# ---------------------------------------------------------------- composition

def prototype_code(enc: SemEncoder, spec: GridMixtureSpec, row: int, col: int) -> np.ndarray:
    """Code of the center of mode (row, col)."""
    return encode_codes(enc, spec.centers()[[spec.mode_index(row, col)]])[0]


def cmd_compose(run: Run, mode_a=None, mode_b=None) -> dict:
    cfg, spec = run.cfg, _spec(run.cfg)
    (r1, c1) = mode_a or cfg.compose.mode_a
    (r2, c2) = mode_b or cfg.compose.mode_b
    for r, c in ((r1, c1), (r2, c2)):
        if not (0 <= r < spec.rows and 0 <= c < spec.cols):
            raise ConfigError(f"mode ({r}, {c}) lies outside the {spec.rows}x{spec.cols} grid")
    enc, cond = load_encoder(run), load_cond(run)
    a, b = prototype_code(enc, spec, r1, c1), prototype_code(enc, spec, r2, c2)
    if np.array_equal(a, b):
        log.warning("parents share the code %s; composition reduces to conditional generation",
                    a.tolist())
    n = cfg.compose.n
    composed = compose(np.tile(a, (n, 1)), np.tile(b, (n, 1)), rng=run.rng("compose-mask"))
    x_comp = decode_codes(run, cond, composed, "compose-decode")
    x_a = decode_codes(run, cond, np.tile(a, (n, 1)), "parent-a-decode")
    x_b = decode_codes(run, cond, np.tile(b, (n, 1)), "parent-b-decode")

    targets = sorted({spec.mode_index(r, c) for r in (r1, r2) for c in (c1, c2)})
    idx, dist = nearest_mode(spec, x_comp)
    close = dist <= 3 * spec.std
    frac = np.bincount(idx[close], minlength=spec.n_modes) / n
    hist = [dict(mode=m, row=spec.row_col(m)[0], col=spec.row_col(m)[1], fraction=frac[m],
                 is_target=m in targets) for m in range(spec.n_modes)]
    run.write_csv("compose_hist.csv", ["mode", "row", "col", "fraction", "is_target"], hist)

    # one bandwidth for all sets so their Vendi scores are comparable
    m = min(n, cfg.eval.vendi_n)
    subs = {name: x[run.rng("vendi", name).permutation(n)[:m]]
            for name, x in (("composed", x_comp), ("parent_a", x_a), ("parent_b", x_b))}
    pooled = np.concatenate(list(subs.values()))
    d = np.sqrt(((pooled[:, None] - pooled[None]) ** 2).sum(-1))
    bw = float(np.median(d[np.triu_indices(len(pooled), 1)]))
    summary = []
    for name, x in subs.items():
        near, dist_x = nearest_mode(spec, x)
        on = np.isin(near, targets) & (dist_x <= 3 * spec.std)
        summary.append(dict(condition=name, n=m, vendi=vendi_score(kernel=rbf_kernel(x, bw)),
                            target_fraction=float(on.mean()), bandwidth=bw))
    target_frac = float(frac[targets].sum())
    n_big = int((frac[targets] >= 0.05).sum())
    summary[0]["target_fraction"] = target_frac
    run.write_csv("compose.csv", ["condition", "n", "vendi", "target_fraction", "bandwidth"],
                  summary)
    run.write_csv("compose_samples.csv", ["condition", "x0", "x1"],
                  [dict(condition=k, x0=x[j, 0], x1=x[j, 1]) for k, x in subs.items()
                   for j in range(len(x))])
    plotting.mode_histogram(run.path("compose_hist.csv"), run.path("compose_hist.svg"))
    plotting.scatter(run.path("compose_samples.csv"), run.path("compose.svg"), group="condition")
    print(f"composed ({r1},{c1}) x ({r2},{c2}): {target_frac:.3f} on crossed modes, "
          f"{n_big} modes >= 5%, vendi composed={summary[0]['vendi']:.3f} "
          f"parents={summary[1]['vendi']:.3f}/{summary[2]['vendi']:.3f}")
    return dict(target_fraction=target_frac, n_big=n_big,
                vendi={s["condition"]: s["vendi"] for s in summary}, fractions=frac,
                targets=targets)


# ---------------------------------------------------------------- remasking sweep

SWEEP_HEADER = ["eta", "kld", "mode_coverage", "mode_precision", "n_unmasked", "n_remasked",
                "network_evals", "matches_base"]


def cmd_remask_sweep(run: Run) -> list[dict]:
    cfg, spec = run.cfg, _spec(run.cfg)
    prior, cond = load_prior(run), load_cond(run)
    n = cfg.sweep.n
    base = sample_codes(run, prior, n, eta=0.0, key="sweep")
    rows = []
    for eta in cfg.sweep.etas:
        audit = []
        prior.n_evals = 0
        codes = sample_codes(run, prior, n, eta=eta, audit=audit, key="sweep")
        x = decode_codes(run, cond, codes, "sweep-decode")
        cov, prec = mode_stats(spec, x)
        rows.append(dict(eta=eta, kld=kl_estimate(spec, x, n_eval=cfg.eval.n_eval,
                                                  eval_seed=cfg.eval.eval_seed),
                         mode_coverage=cov, mode_precision=prec,
                         n_unmasked=sum(a.n_unmasked for a in audit),
                         n_remasked=sum(a.n_remasked for a in audit),
                         network_evals=prior.n_evals,
                         matches_base=bool(np.array_equal(codes, base)) if eta == 0 else ""))
    path = run.write_csv("remask_sweep.csv", SWEEP_HEADER, rows)
    plotting.remask_sweep(path, run.path("remask_sweep.svg"))
    for r in rows:
        print(" ".join(f"{k}={_fmt(r[k])}" for k in SWEEP_HEADER))
    return rows


# ---------------------------------------------------------------- evaluation

EVAL_HEADER = ["kld", "kld_reverse", "vendi", "mode_coverage", "mode_precision", "n_samples"]


def read_points(path) -> np.ndarray:
    rows = plotting.read_rows(path)
    if not rows or "x0" not in rows[0] or "x1" not in rows[0]:
        raise ConfigError(f"{path}: expected a CSV with x0 and x1 columns")
    try:
        return np.array([[float(r["x0"]), float(r["x1"])] for r in rows])
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def cmd_eval(run: Run, samples_path) -> dict:
    cfg, spec = run.cfg, _spec(run.cfg)
    x = read_points(samples_path)
    if len(x) < 1000:
        raise ConfigError(f"{samples_path}: KL estimation needs at least 1000 samples, got {len(x)}")
    sub = x[run.rng("vendi", "eval").permutation(len(x))[:cfg.eval.vendi_n]]
    row = dict(vendi=vendi_score(sub), n_samples=len(x), **_scores(cfg, spec, x))
    run.write_csv("eval.csv", EVAL_HEADER, [row])
    for k in EVAL_HEADER:
        print(f"{k:>15}: {_fmt(row[k])}")
    return row
