import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfscil.encoder import (
    AdapterBlock,
    adapt_backward,
    adapt_forward,
    encode_image,
    encode_text,
    init_params,
    normalize,
    set_phase,
    trainable_count,
)


def _random_params(rng, d, r=3, scale=0.4):
    p = init_params(d, d, rank=r, seed=int(rng.integers(1 << 30)))
    for b in p.blocks().values():
        b.A[:] = rng.normal(0, scale, b.A.shape)
        b.B[:] = rng.normal(0, scale, b.B.shape)
    return p


def test_init_deterministic():
    a, b = init_params(16, 8, seed=3), init_params(16, 8, seed=3)
    for name in ("vision", "text"):
        np.testing.assert_array_equal(a.blocks()[name].A, b.blocks()[name].A)
    assert not a.vision.B.any() and not a.text.B.any()


def test_init_sizes():
    p = init_params(512, 512, rank=4)
    assert p.vision.size == 2 * 4 * 512
    assert p.rank == 4


def test_fresh_params_are_identity_after_normalisation():
    rng = np.random.default_rng(0)
    p = init_params(6, 6)
    f = rng.normal(size=(3, 6))
    np.testing.assert_allclose(encode_image(f, p), normalize(f), atol=1e-15)
    g = rng.normal(size=(1, 6))
    np.testing.assert_allclose(encode_text(g, p), normalize(g[0]), atol=1e-15)


def test_text_template_mean():
    p = init_params(2, 2)
    out = encode_text(np.array([[1.0, 0.0], [0.0, 1.0]]), p)
    np.testing.assert_allclose(out, [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-15)


def test_forward_closed_form():
    rng = np.random.default_rng(1)
    p = _random_params(rng, 5)
    f = rng.normal(size=5)
    e = f + p.vision.B @ np.tanh(p.vision.A @ f)
    np.testing.assert_allclose(encode_image(f, p), e / np.sqrt(e @ e), rtol=1e-13)
    g = rng.normal(size=(4, 5))
    m = g.sum(axis=0) / 4
    e = m + p.text.B @ np.tanh(p.text.A @ m)
    np.testing.assert_allclose(encode_text(g, p), e / np.sqrt(e @ e), rtol=1e-13)


def test_phases():
    p = init_params(512, 512, rank=4)
    base = set_phase(p, "base")
    inc = set_phase(p, "incremental")
    assert base.vision.trainable and base.text.trainable
    assert not inc.vision.trainable and inc.text.trainable
    assert trainable_count(base) == 8192
    assert trainable_count(inc) == 4096
    # arrays are shared, not copied
    assert inc.vision.A is p.vision.A
    with pytest.raises(ValueError):
        set_phase(p, "warmup")


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        encode_image(np.ones(4), init_params(5, 5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_adapter_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = _random_params(rng, 4, r=2)
    blk = p.vision
    X = rng.normal(size=(3, 4))
    W = rng.normal(size=(3, 4))
    N, cache = adapt_forward(X, blk)
    dA, dB = adapt_backward(cache, W, blk)

    def f(A, B):
        return float(np.sum(W * adapt_forward(X, AdapterBlock(A, B))[0]))

    h = 1e-6
    for grad, which in ((dA, "A"), (dB, "B")):
        base = getattr(blk, which)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            args = (plus, blk.B) if which == "A" else (blk.A, plus)
            args_m = (minus, blk.B) if which == "A" else (blk.A, minus)
            fd[idx] = (f(*args) - f(*args_m)) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)


@given(st.integers(0, 10_000))
def test_outputs_unit_norm(seed):
    rng = np.random.default_rng(seed)
    p = _random_params(rng, 6)
    out = encode_image(rng.normal(size=(5, 6)), p)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-12)
