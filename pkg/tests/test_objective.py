import math

import numpy as np
import pytest
from helpers import gradcheck, random_loss_case

from hyperfscil import hyperbolic as hyp
from hyperfscil.encoder import init_params, normalize, set_phase
from hyperfscil.objective import (
    ClassBank,
    FrozenRefs,
    LossConfig,
    TrainingBatch,
    ce_base_loss,
    ce_current_loss,
    ce_past_loss,
    class_probabilities,
    class_probabilities_ssp,
    loss_and_grad,
    reg_loss,
    similarity,
    softmax,
    total_base_loss,
    total_incremental_loss,
)

HYP = LossConfig(tau=0.1, c=0.5)
COS = LossConfig(tau=0.1, hyperbolic=False)


def _oracle_ce(Z, labels, ids, H, sim, tau):
    """-log softmax recomputed one sample at a time."""
    total = 0.0
    for z, y in zip(Z, labels):
        s = [sim(z, h) / tau for h in H]
        m = max(s)
        lse = m + math.log(sum(math.exp(v - m) for v in s))
        total += lse - s[list(ids).index(y)]
    return total / len(Z)


def _hyp_sim(c):
    return lambda z, h: -hyp.hyperbolic_distance(hyp.exp_map_zero(z, c), hyp.exp_map_zero(h, c), c)


def _cos_sim(z, h):
    return float(z @ h / (np.linalg.norm(z) * np.linalg.norm(h)))


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(c=-0.1)
    with pytest.raises(ValueError):
        LossConfig(gamma=-1)
    assert LossConfig(c=0.0).sim_mode == "cosine"
    assert LossConfig(c=0.5, hyperbolic=False).sim_mode == "cosine"


def test_similarity_examples():
    z = np.array([0.3, -0.2, 0.5])
    assert similarity(z, z, HYP) == 0
    assert similarity(z, z, COS) == pytest.approx(1.0)
    assert similarity([1, 0], [0, 1], COS) == pytest.approx(0.0)
    assert similarity(z, -z, HYP) < similarity(z, z + 0.01, HYP)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(4)), 0.25)
    # exact logistic(1), logistic(-1)
    np.testing.assert_allclose(softmax(np.array([-1.0, -2.0])), [0.7310585786300049, 0.2689414213699951], rtol=1e-15)
    np.testing.assert_array_equal(softmax(np.array([3.0])), [1.0])


def test_probabilities():
    h = np.array([[1.0, 0.0]])
    bank = ClassBank([4], h)
    assert class_probabilities([0.2, 0.3], bank, HYP) == pytest.approx([1.0])
    np.testing.assert_allclose(class_probabilities_ssp([0.2, 0.3], bank, HYP), class_probabilities([0.2, 0.3], bank, HYP))
    two = ClassBank([1], [[1.0, 0.0]], past_ids=[0], past_text=[[0.0, 1.0]])
    np.testing.assert_allclose(class_probabilities_ssp([1.0, 1.0], two, COS), [0.5, 0.5])
    assert list(two.ids) == [0, 1]


def test_bank_rejects_overlap():
    with pytest.raises(ValueError):
        ClassBank([1], [[1.0, 0]], past_ids=[1], past_text=[[0, 1.0]])


def test_ce_base_examples():
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    bank = ClassBank([0, 1], H)
    # equidistant sample: two equal logits
    assert ce_base_loss([[1.0, 1.0]], [0], bank, COS) == pytest.approx(math.log(2))
    assert ce_base_loss([[1.0, 0.0]], [0], bank, LossConfig(tau=1e-3, hyperbolic=False)) == pytest.approx(0, abs=1e-12)


@pytest.mark.parametrize("cfg,sim", [(HYP, _hyp_sim(0.5)), (COS, _cos_sim)])
def test_ce_losses_match_oracle(cfg, sim):
    rng = np.random.default_rng(3)
    H = rng.normal(size=(4, 6))
    P = rng.normal(size=(2, 6))
    Z = rng.normal(size=(7, 6))
    cur, past = [10, 11, 12, 13], [3, 5]
    labels = rng.choice(cur, 7)
    bank = ClassBank(cur, H)
    assert ce_base_loss(Z, labels, bank, cfg) == pytest.approx(_oracle_ce(Z, labels, cur, H, sim, cfg.tau), rel=1e-12)
    full = ClassBank(cur, H, past_ids=past, past_text=P)
    allH = np.vstack([P, H])
    assert ce_current_loss(Z, labels, full, cfg) == pytest.approx(_oracle_ce(Z, labels, past + cur, allH, sim, cfg.tau), rel=1e-12)
    protos = rng.normal(size=(4, 6))
    plab = [3, 5, 3, 5]
    assert ce_past_loss(protos, plab, full, cfg) == pytest.approx(_oracle_ce(protos, plab, past + cur, allH, sim, cfg.tau), rel=1e-12)


def test_ce_current_uniform_five():
    bank = ClassBank([3, 4], np.zeros((2, 3)) + [1, 0, 0], past_ids=[0, 1, 2], past_text=np.zeros((3, 3)) + [1, 0, 0])
    assert ce_current_loss([[0.0, 1.0, 0.0]], [3], bank, COS) == pytest.approx(math.log(5))


def test_ce_current_without_past_is_base_form():
    rng = np.random.default_rng(4)
    bank = ClassBank([0, 1, 2], rng.normal(size=(3, 4)))
    Z = rng.normal(size=(5, 4))
    y = rng.choice(3, 5)
    assert ce_current_loss(Z, y, bank, HYP) == ce_base_loss(Z, y, bank, HYP)


def test_ce_past_saturated():
    # prototypes sit on their own snapshot and the current class is far away
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    bank = ClassBank([2], [[-1.0, -1.0]], past_ids=[0, 1], past_text=P)
    assert ce_past_loss(P, [0, 1], bank, LossConfig(tau=0.01, hyperbolic=False)) < 1e-20


def test_ce_past_uniform_two():
    bank = ClassBank([1], [[1.0, 0.0]], past_ids=[0], past_text=[[0.0, 1.0]])
    assert ce_past_loss([[1.0, 1.0]], [0], bank, COS) == pytest.approx(math.log(2))


def test_reg_loss():
    f = normalize(np.ones((2, 3)))
    assert reg_loss(f, f) == 0
    assert reg_loss([0.1, -0.2], [0.0, 0.0]) == pytest.approx(0.3)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    assert reg_loss(a, b) == pytest.approx(sum(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb)) / 4)


def test_total_losses_compose():
    rng = np.random.default_rng(8)
    H = normalize(rng.normal(size=(3, 4)))
    Z = normalize(rng.normal(size=(5, 4)))
    y = rng.choice([0, 1, 2], 5)
    bank = ClassBank([0, 1, 2], H)
    refs = FrozenRefs(Z, H)
    assert total_base_loss(Z, y, bank, refs, LossConfig(alpha=10, beta=25)) == ce_base_loss(Z, y, bank, LossConfig())
    shifted = FrozenRefs(Z + 0.1, H - 0.05)
    cfg = LossConfig(tau=0.2, alpha=0.7, beta=1.3)
    expect = ce_base_loss(Z, y, bank, cfg) + 0.7 * reg_loss(Z, Z + 0.1) + 1.3 * reg_loss(H, H - 0.05)
    assert total_base_loss(Z, y, bank, shifted, cfg) == pytest.approx(expect, rel=1e-14)

    full = ClassBank([0, 1, 2], H, past_ids=[7], past_text=normalize(rng.normal(size=(1, 4))))
    P = rng.normal(size=(2, 4))
    inc = LossConfig(tau=0.2, alpha=0.7, beta=1.3, gamma=4.0)
    expect = (ce_current_loss(Z, y, full, inc) + 4.0 * ce_past_loss(P, [7, 7], full, inc)
              + 0.7 * reg_loss(Z, Z + 0.1) + 1.3 * reg_loss(H, H - 0.05))
    assert total_incremental_loss(Z, y, P, [7, 7], full, shifted, inc) == pytest.approx(expect, rel=1e-14)
    no_past = LossConfig(tau=0.2, alpha=0.7, beta=1.3, gamma=0.0)
    assert total_incremental_loss(Z, y, P, [7, 7], full, shifted, no_past) == pytest.approx(
        ce_current_loss(Z, y, full, no_past) + 0.7 * reg_loss(Z, Z + 0.1) + 1.3 * reg_loss(H, H - 0.05), rel=1e-14)


def test_loss_and_grad_matches_value_functions():
    rng = np.random.default_rng(12)
    params, batch, cfg = random_loss_case(rng, incremental=True, hyperbolic=True)
    res = loss_and_grad(params, batch, cfg)
    from hyperfscil.encoder import encode_image, encode_text

    Z = encode_image(batch.images, params)
    H = encode_text(batch.text_templates, params)
    bank = ClassBank(batch.text_ids, H, past_ids=batch.past_ids, past_text=batch.past_text)
    refs = FrozenRefs(normalize(batch.images), normalize(batch.text_templates.mean(axis=1)))
    expect = total_incremental_loss(Z, batch.labels, batch.prototypes, batch.proto_ids, bank, refs, cfg)
    assert res.total == pytest.approx(expect, rel=1e-12)


def test_frozen_vision_has_no_gradient():
    rng = np.random.default_rng(1)
    params, batch, cfg = random_loss_case(rng, incremental=True, hyperbolic=True)
    grads = loss_and_grad(params, batch, cfg).grads
    assert set(grads) == {"text"}
    base = set_phase(params, "base")
    assert set(loss_and_grad(base, batch, cfg).grads) == {"vision", "text"}


@pytest.mark.parametrize("seed", range(8))
def test_gradients_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    params, batch, cfg = random_loss_case(rng, incremental=seed % 2 == 1, hyperbolic=seed < 4)
    err, _ = gradcheck(params, batch, cfg)
    assert err < 1e-4


def test_non_finite_loss_raises():
    params = init_params(3, 3)
    batch = TrainingBatch(images=np.array([[np.nan, 1.0, 0.0]]), labels=[0], text_ids=[0], text_templates=np.ones((1, 1, 3)))
    with pytest.raises((FloatingPointError, ValueError)):
        loss_and_grad(params, batch, HYP)
