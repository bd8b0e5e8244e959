"""Properties of the trained default pipeline: prompted and unprompted code sampling."""

import numpy as np
import pytest
from scipy.stats import chi2_contingency, chisquare

from dlclab.codec import code_lookup, encode_codes
from dlclab.config import RunConfig
from dlclab.discrete import PAD
from dlclab.experiments import (Run, decode_codes, load_cond, load_encoder, load_prior,
                                sample_codes)
from dlclab.metrics import nearest_mode
from dlclab.nn import make_rng
from dlclab.toydata import sample

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained(default_pipeline):
    out, _ = default_pipeline
    run = Run(RunConfig(), out)
    spec = run.cfg.data.spec()
    ref = sample(spec, 20000, make_rng(77))
    lookup = code_lookup(encode_codes(load_encoder(run), ref.x), ref.mode)
    return run, spec, load_prior(run), lookup


def _modes(lookup, codes):
    return np.array([lookup.get(tuple(c), -1) for c in codes])


def test_sampled_code_marginal_is_uniform_over_modes(trained):
    run, spec, prior, lookup = trained
    modes = _modes(lookup, sample_codes(run, prior, 10_000, key="marginal-test"))
    assert np.mean(modes < 0) <= 0.01
    counts = np.bincount(modes[modes >= 0], minlength=spec.n_modes)
    assert chisquare(counts).pvalue > 0.01


def test_empty_prompt_matches_unconditional(trained):
    run, spec, prior, lookup = trained
    n = 10_000
    empty = np.full((n, prior.prompt_len), PAD)
    a = _modes(lookup, sample_codes(run, prior, n, prompts=empty, key="empty-prompt"))
    b = _modes(lookup, sample_codes(run, prior, n, key="no-prompt"))
    cats = spec.n_modes + 1
    table = np.stack([np.bincount(a + 1, minlength=cats), np.bincount(b + 1, minlength=cats)])
    table = table[:, table.sum(0) > 0]
    assert chi2_contingency(table).pvalue > 0.01


@pytest.mark.parametrize("row", [0, 3])
def test_row_prompt_places_samples_in_that_row(trained, row):
    run, spec, prior, _ = trained
    n = 1000
    prompts = np.tile([row, PAD], (n, 1))
    codes = sample_codes(run, prior, n, prompts=prompts, key=f"row-{row}")
    x = decode_codes(run, load_cond(run), codes, f"row-{row}-decode")
    idx, dist = nearest_mode(spec, x)
    rows = np.array([spec.row_col(m)[0] for m in idx])
    assert np.mean((rows == row) & (dist <= 3 * spec.std)) >= 0.9
