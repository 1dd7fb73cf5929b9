"""Shared fixtures-as-functions for the unit and acceptance suites."""

import numpy as np

from hyperfscil.encoder import init_params, set_phase
from hyperfscil.objective import LossConfig, TrainingBatch, loss_and_grad


def random_loss_case(rng, incremental: bool, hyperbolic: bool, d=5, r=2, M=3):
    """Random (params, batch, cfg) with non-zero adapters and L1 terms away from their kinks."""
    params = init_params(d, d, rank=r, seed=int(rng.integers(1 << 30)))
    for b in params.blocks().values():
        b.A[:] = rng.normal(0, 0.5, b.A.shape)
        b.B[:] = rng.normal(0, 0.5, b.B.shape)
    params = set_phase(params, "incremental" if incremental else "base")
    n_cur, n_past = 3, (2 if incremental else 0)
    ids = rng.permutation(20)[: n_cur + n_past]
    past_ids, cur_ids = ids[:n_past], ids[n_past:]
    n = 4
    batch = TrainingBatch(
        images=rng.normal(size=(n, d)),
        labels=rng.choice(cur_ids, size=n),
        text_ids=cur_ids,
        text_templates=rng.normal(size=(n_cur, M, d)),
        past_ids=past_ids,
        past_text=rng.normal(size=(n_past, d)) if incremental else None,
        proto_ids=np.concatenate([past_ids, past_ids]) if incremental else np.zeros(0, dtype=np.int64),
        prototypes=rng.normal(size=(2 * n_past, d)) if incremental else None,
    )
    cfg = LossConfig(
        tau=float(rng.uniform(0.1, 1.0)),
        alpha=float(rng.uniform(0, 0.5)),
        beta=float(rng.uniform(0, 0.5)),
        gamma=float(rng.uniform(0.5, 3)) if incremental else 0.0,
        c=float(rng.uniform(0.2, 1.0)),
        hyperbolic=hyperbolic,
    )
    return params, batch, cfg


def _with_entry(params, name, which, idx, value):
    blk = params.blocks()[name]
    arr = getattr(blk, which).copy()
    arr[idx] = value
    from dataclasses import replace

    return replace(params, **{name: replace(blk, **{which: arr})})


def gradcheck(params, batch, cfg, h=1e-5):
    """Largest relative error between analytic and central-difference gradients over blocks."""
    res = loss_and_grad(params, batch, cfg)
    worst = 0.0
    for name, (dA, dB) in res.grads.items():
        blk = params.blocks()[name]
        for which, g in (("A", dA), ("B", dB)):
            base = getattr(blk, which)
            fd = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                v = base[idx]
                fp = loss_and_grad(_with_entry(params, name, which, idx, v + h), batch, cfg, need_grad=False).total
                fm = loss_and_grad(_with_entry(params, name, which, idx, v - h), batch, cfg, need_grad=False).total
                fd[idx] = (fp - fm) / (2 * h)
            err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
            worst = max(worst, float(err))
    return worst, res
