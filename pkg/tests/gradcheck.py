"""Finite-difference helpers shared by the test modules."""

import numpy as np

from gma import autodiff as ad


def loss_and_grads(build, params):
    with ad.Tape() as tape:
        loss = build()
    return float(loss.data), ad.backward(tape, loss, accumulate=False)


def worst_mismatch(build, params, h=1e-5):
    """Largest violation ratio over all parameters (<= 1 passes)."""
    _, grads = loss_and_grads(build, params)
    worst = 0.0
    for p in params:
        numeric = ad.finite_difference(lambda: float(build().data), p, h=h)
        analytic = grads.get(p.name, np.zeros_like(p.data))
        worst = max(worst, ad.gradient_mismatch(analytic, numeric))
    return worst


def rand_param(name, dims, rng, scale=1.0):
    return ad.Parameter(name, rng.normal(0.0, scale, size=dims))


def pipeline_case(variant="gma_mcb_att", seed=0):
    """Full model loss on a 2x2 grid: 2 rounds, 3-token questions, 4 options.

    Returns ``(build, params)``; granules=3 so the top-K cut is exercised.
    sketch_dim=5 makes every bucket of the sketch convolution reachable: an
    empty bucket holds FFT roundoff (~1e-17) that signed_sqrt, which has no
    derivative at 0, turns into finite-difference noise.
    """
    from gma.harness.config import RunConfig
    from gma.harness.models import Batch, Model

    cfg = RunConfig(grid=2, embed_dim=4, hidden_dim=3, sketch_dim=5, granules=3, seed=seed)
    model = Model(cfg, variant)
    rng = np.random.default_rng(seed)
    B, R, T, O, Ta = 1, 2, 3, 4, 2
    batch = Batch(
        images=rng.normal(size=(B, 2, 2, cfg.channels)),
        questions=rng.integers(0, 20, size=(B, R, T)),
        word_keep=np.array([[[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]]),
        caption=rng.integers(0, 20, size=(B, 4)),
        qa=rng.integers(0, 20, size=(B, R - 1, T + Ta)),
        options=rng.integers(0, 20, size=(B, R, O, Ta)),
        gt=np.array([[1, 3]]),
        relevance=np.zeros((B, R, O)),
        saliency=np.array([[[0.9, 0.1, 0.5, 0.3], [0.2, 0.8, 0.4, 0.6]]]),
    )
    params = model.parameters()
    # xavier biases start at zero; nudge them so their gradients are generic
    for p in params:
        p.assign(p.data + rng.normal(0.0, 0.1, size=p.data.shape))
    return (lambda: model.loss(batch)), params
