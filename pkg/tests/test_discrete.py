import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from oracles import TablePredictor
from dlclab.discrete import (PAD, DlcPredictor, MaskSchedule, RemaskConfig, SamplerConfig,
                             conditional_sample, mask_forward, masked_ce_loss, remask_step,
                             reverse_step, run_chain, sample, train_prior, unmask_probability)
from dlclab.nn import gradient_check, make_rng

GRAD_TOL = 1e-4


class ConstantPredictor:
    def __init__(self, L, V, token=None):
        self.L, self.V, self.mask_id = L, V, V
        self.token = token
        self.n_evals = 0

    def predict(self, seqs, prompts=None):
        self.n_evals += 1
        p = np.full((len(seqs), self.L, self.V), 1.0 / self.V)
        if self.token is not None:
            p[:] = 0
            p[..., self.token] = 1
        return p


@pytest.mark.parametrize("kind", ["linear", "log-linear", "cosine"])
def test_mask_schedule_endpoints_and_monotone(kind):
    s = MaskSchedule(kind)
    assert s.gamma(0.0) == 0.0 and s.gamma(1.0) == 1.0
    g = s.gamma(np.linspace(0, 1, 1001))
    assert np.all(np.diff(g) >= 0)


def test_log_linear_noise_masks_linearly():
    s = MaskSchedule("log-linear")
    t = np.linspace(0.0, 0.999, 50)
    np.testing.assert_allclose(s.total_noise(t), -np.log(1 - t), rtol=1e-12)
    np.testing.assert_allclose(1 - np.exp(-s.total_noise(t)), MaskSchedule("linear").gamma(t),
                               atol=1e-12)
    assert s.total_noise(1.0) == np.inf


def test_cosine_schedule_derivative():
    s = MaskSchedule("cosine")
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    np.testing.assert_allclose(s.dgamma(t), (s.gamma(t + h) - s.gamma(t - h)) / (2 * h), rtol=1e-6)


def test_mask_forward_endpoints(rng):
    c = rng.integers(4, size=(20, 8))
    np.testing.assert_array_equal(mask_forward(c, 0.0, MaskSchedule(), rng, 4), c)
    assert np.all(mask_forward(c, 1.0, MaskSchedule(), rng, 4) == 4)


def test_mask_forward_fraction(rng):
    c = np.zeros((10_000, 100), dtype=int)
    frac = (mask_forward(c, 0.5, MaskSchedule(), rng, 7) == 7).mean(1)
    assert abs(frac.mean() - 0.5) <= 0.02
    assert np.all(np.abs(frac - 0.5) <= 0.25)


def _net(rng, L=2, V=2, **kw):
    return DlcPredictor(L, V, rng, width=8, heads=2, blocks=1, **kw)


def test_ce_loss_is_zero_without_masks(rng):
    net = _net(rng)
    assert masked_ce_loss(net, rng.integers(2, size=(5, 2)), None, MaskSchedule(), rng, t=1e-9) == 0


def test_ce_loss_uniform_predictor_fully_masked(rng):
    net = DlcPredictor(5, 7, rng, width=8, heads=2, blocks=1)
    net.head.params["W"][:] = 0
    net.head.params["b"][:] = 0
    loss = masked_ce_loss(net, rng.integers(7, size=(4, 5)), None, MaskSchedule(), rng, t=1.0)
    assert loss == pytest.approx(5 * math.log(7), rel=1e-6)


def test_ce_loss_matches_straight_line_recomputation():
    net = _net(make_rng(0))
    codes = np.array([[0, 1], [1, 1], [1, 0]])
    loss = masked_ce_loss(net, codes, None, MaskSchedule(), make_rng(5))

    r = make_rng(5)
    t = 1.0 - r.random(3)
    noisy = np.where(r.random((3, 2)) < t[:, None], 2, codes)
    logits = net.logits(noisy).astype(np.float64).tolist()
    total = 0.0
    for b in range(3):
        for i in range(2):
            if noisy[b, i] == 2:
                p = oracles.softmax_row(logits[b][i])
                total += -math.log(p[codes[b, i]]) / t[b]
    assert loss == pytest.approx(total / 3, rel=1e-6)


def test_ce_loss_rejects_empty_batch(rng):
    with pytest.raises(ValueError):
        masked_ce_loss(_net(rng), np.zeros((0, 2), int), None, MaskSchedule(), rng)


@pytest.mark.parametrize("kind", ["linear", "log-linear", "cosine"])
def test_predictor_gradient_check(rng, kind):
    net = DlcPredictor(3, 4, rng, width=8, heads=2, blocks=2, prompt_len=2,
                       n_prompt_labels=3).astype(np.float64)
    codes = rng.integers(4, size=(6, 3))
    prompts = rng.integers(-1, 3, size=(6, 2))
    sched = MaskSchedule(kind)

    def loss():
        return masked_ce_loss(net, codes, prompts, sched, make_rng(9), prompt_drop=0.3)

    masked_ce_loss(net, codes, prompts, sched, make_rng(9), backward=True, prompt_drop=0.3)
    grads = {k: v.copy() for k, v in net.gradients().items()}
    # embeddings start at scale 0.02 and feed a LayerNorm, so the loss is sharply
    # curved in them; a 1e-3 step is dominated by truncation error
    assert gradient_check(net.parameters(), grads, loss, rng, step=1e-5) <= GRAD_TOL


def test_predictor_outputs_distributions(rng):
    net = DlcPredictor(4, 5, rng, width=16, heads=2, blocks=2)
    p = net.predict(rng.integers(6, size=(10, 4)))
    assert p.shape == (10, 4, 5)
    assert np.max(np.abs(p.sum(-1) - 1)) <= 1e-5


@given(st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.sampled_from(["linear", "log-linear", "cosine"]))
def test_unmask_probability_normalizes(t, frac, kind):
    s = MaskSchedule(kind)
    q = unmask_probability(s, t, t * frac)
    assert 0 <= q <= 1
    assert abs(q + (1 - q) - 1) <= 1e-6
    stay = float(s.gamma(t * frac)) / float(s.gamma(t))
    assert q == pytest.approx(1 - stay, abs=1e-12)


def test_unmask_probability_zero_gamma():
    with pytest.raises(ValueError):
        unmask_probability(MaskSchedule(), 0.0, 0.0)


def test_jump_to_zero_unmasks_everything(rng):
    net = ConstantPredictor(6, 4)
    seq = np.full((50, 6), 4)
    out = reverse_step(net, seq, 0.37, 0.37, MaskSchedule(), rng)
    assert not np.any(out == 4)


def test_point_mass_predictor_writes_its_token(rng):
    net = ConstantPredictor(5, 10, token=7)
    seq = np.full((100, 5), 10)
    seq[:, 0] = 2
    out = reverse_step(net, seq, 0.5, 0.25, MaskSchedule(), rng)
    assert np.all(out[:, 0] == 2)
    assert np.all((out[:, 1:] == 7) | (out[:, 1:] == 10))
    assert (out[:, 1:] == 7).any()


def test_reverse_step_rejects_negative_target(rng):
    with pytest.raises(ValueError):
        reverse_step(ConstantPredictor(2, 2), np.full((1, 2), 2), 0.1, 0.2, MaskSchedule(), rng)


def test_single_step_draws_from_the_first_prediction():
    net = TablePredictor()
    codes = sample(net, SamplerConfig(steps=1, seed=3), n=20_000)
    first = np.array(net.probs((3, 3)))
    for i in range(2):
        freq = np.bincount(codes[:, i], minlength=3) / len(codes)
        assert np.all(np.abs(freq - first[i]) <= 0.02)


def test_sampler_matches_exhaustive_enumeration_small():
    net = TablePredictor()
    n = 20_000
    codes = run_chain(net, n, SamplerConfig(steps=3, seed=4))
    exact = oracles.enumerate_chain(net.probs, 2, 3, 3)
    emp = {}
    for c in map(tuple, codes.tolist()):
        emp[c] = emp.get(c, 0) + 1 / n
    assert oracles.total_variation(emp, exact) <= 0.03


def test_sampler_is_deterministic_and_mask_free():
    net = TablePredictor()
    a = sample(net, SamplerConfig(steps=5, seed=11), n=64)
    b = sample(net, SamplerConfig(steps=5, seed=11), n=64)
    np.testing.assert_array_equal(a, b)
    assert not np.any(a == 3)


def test_eta_zero_is_bit_identical_to_base_chain():
    net = TablePredictor()
    base = run_chain(net, 500, SamplerConfig(steps=16, seed=2))
    audit = []
    cfg = SamplerConfig(steps=16, seed=2, remask=RemaskConfig(eta=0.0))
    np.testing.assert_array_equal(run_chain(net, 500, cfg, audit=audit), base)
    assert len(audit) == 16 and all(r.n_remasked == 0 for r in audit)


def test_remask_step_outside_window_matches_reverse_step(rng):
    net = ConstantPredictor(4, 3)
    seq = np.where(rng.random((30, 4)) < 0.5, 3, rng.integers(3, size=(30, 4)))
    cfg = RemaskConfig(eta=0.5, window=(0.3, 0.55))
    res = remask_step(net, seq, 0.8, 0.1, MaskSchedule(), cfg, make_rng(1))
    np.testing.assert_array_equal(res.seq, reverse_step(net, seq, 0.8, 0.1, MaskSchedule(),
                                                         make_rng(1)))
    assert res.t_next == pytest.approx(0.7)


def test_remask_counts_and_time_correction(rng):
    net = ConstantPredictor(10, 4)
    cfg = RemaskConfig(eta=0.5, window=(0.3, 0.55))
    decoded = remasked = 0
    for _ in range(300):
        seq = np.where(rng.random((20, 10)) < 0.5, 4, rng.integers(4, size=(20, 10)))
        res = remask_step(net, seq, 0.4, 0.01, MaskSchedule(), cfg, rng)
        before = (seq == 4).sum()
        assert (res.seq == 4).sum() - before == res.n_remasked - res.n_unmasked
        assert res.t_next == pytest.approx(0.4 - 0.01 + 0.5 * 0.6)
        decoded += (seq != 4).sum()
        remasked += res.n_remasked
    assert abs(remasked / decoded - 0.5) <= 0.02


def test_masks_only_decrease_outside_window():
    net = TablePredictor()
    audit = []
    cfg = SamplerConfig(steps=32, seed=9, remask=RemaskConfig(eta=0.3, window=(0.3, 0.55)))
    run_chain(net, 400, cfg, audit=audit)
    t = 1.0
    for res in audit:
        if not 0.3 <= t <= 0.55:
            assert res.n_remasked == 0
        t -= 1 / 32


def test_eta_must_be_below_one():
    with pytest.raises(ValueError):
        RemaskConfig(eta=1.0)
    with pytest.raises(ValueError):
        RemaskConfig(window=(0.6, 0.3))
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)


@pytest.mark.parametrize("L", [2, 8])
def test_network_evaluations_equal_steps(L):
    net = ConstantPredictor(L, 4)
    run_chain(net, 2000, SamplerConfig(steps=16, seed=0))
    assert net.n_evals == 16


def test_prompt_positions_fixed_and_checked(rng):
    net = DlcPredictor(3, 4, rng, width=8, heads=2, blocks=1, prompt_len=2, n_prompt_labels=5)
    a = conditional_sample(net, [1, 4], SamplerConfig(steps=4, seed=1), n=8)
    b = conditional_sample(net, [1, 4], SamplerConfig(steps=4, seed=1), n=8)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (8, 3) and not np.any(a == 4)
    with pytest.raises(ValueError):
        conditional_sample(net, [1, 2, 3], SamplerConfig(steps=2), n=1)
    with pytest.raises(IndexError):
        net.predict(np.zeros((1, 3), int), np.array([[5, PAD]]))


def test_empty_prompt_is_the_unconditional_chain(rng):
    net = DlcPredictor(2, 3, rng, width=8, heads=2, blocks=1, prompt_len=2, n_prompt_labels=4)
    np.testing.assert_array_equal(conditional_sample(net, [], SamplerConfig(steps=4, seed=6), n=50),
                                  sample(net, SamplerConfig(steps=4, seed=6), n=50))


def test_training_learns_a_point_mass(rng):
    net = DlcPredictor(2, 3, rng, width=16, heads=2, blocks=1)
    target = np.array([2, 0])
    losses = train_prior(net, lambda r, b: (np.tile(target, (b, 1)), None), 150, 32, rng, lr=3e-3)
    assert losses[-1] < 0.1 * losses[0]
    codes = sample(net, SamplerConfig(steps=4, seed=0), n=200)
    assert (codes == target).all(1).mean() >= 0.95


def test_prior_ema_matches_recursion():
    def run(steps, ema):
        net = _net(make_rng(3))
        train_prior(net, lambda r, n: (r.integers(2, size=(n, 2)), None), steps, 16,
                    make_rng(4), lr=1e-2, ema=ema)
        return net.parameters()

    init = _net(make_rng(3)).parameters()
    p1, p2 = run(1, 0.0), run(2, 0.0)
    smooth = run(2, 0.9)
    for k in init:
        want = 0.9 * (0.9 * init[k] + 0.1 * p1[k].astype(np.float64)) + 0.1 * p2[k]
        np.testing.assert_allclose(smooth[k], want, rtol=1e-5, atol=1e-7)
    with pytest.raises(ValueError):
        run(1, 1.0)
