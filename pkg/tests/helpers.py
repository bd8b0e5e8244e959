"""Shared test settings."""

# a configuration small enough that every command finishes in well under a second
TINY = """\
cont.T = 20
cont.hidden = 16
cont.depth = 2
cont.time_dim = 8
cont.cond_dim = 8
cont.steps = 15
cont.batch = 64
codec.d = 8
codec.hidden = 16
codec.steps = 20
codec.batch = 64
prior.width = 8
prior.heads = 2
prior.blocks = 1
prior.steps = 10
prior.batch = 32
prior.sample_steps = 8
gmm.fit_samples = 2000
gmm.max_iters = 20
eval.n_samples = 1000
eval.n_eval = 200
eval.vendi_n = 100
toy.grids = 9
toy.n_samples = 1000
compose.n = 1000
sweep.n = 1000
"""
