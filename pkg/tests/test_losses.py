import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipguard import losses as L
from flipguard import tensor as T

from _oracles import check_gradient

PCT = L.UpdateHyperparams("pct", 1.0, 1.0, 2.0)
PCAT = L.UpdateHyperparams("pcat", 1.0, 1.0, 2.0)
RCAT = L.UpdateHyperparams("rcat", 1.0, 0.5, 0.4)


def val(t):
    return t.item()


def test_cross_entropy_examples():
    assert val(L.cross_entropy([0.0, 0.0], 0)) == pytest.approx(math.log(2), abs=1e-12)
    big = val(L.cross_entropy([1000.0, 0.0], 0))
    assert math.isfinite(big) and big == pytest.approx(0.0, abs=1e-300)


def _ce_decimal(z, y):
    getcontext().prec = 50
    exps = [Decimal(float(v)).exp() for v in z]
    return float(sum(exps).ln() - Decimal(float(z[y])))


def test_cross_entropy_matches_extended_precision():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z = rng.uniform(-20, 20, int(rng.integers(2, 8)))
        y = int(rng.integers(0, len(z)))
        assert abs(val(L.cross_entropy(z, y)) - _ce_decimal(z, y)) < 1e-10


def test_label_out_of_range():
    with pytest.raises(ValueError):
        L.cross_entropy([0.0, 1.0], 2)


def test_logit_distill_examples():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(5)
    assert val(L.logit_distill(a, a)) == 0.0
    assert val(L.logit_distill([1.0, 0.0], [0.0, 1.0])) == 1.0
    for _ in range(50):
        a, b = rng.standard_normal((2, 4))
        assert val(L.logit_distill(a, b)) == val(L.logit_distill(b, a))


def test_logit_distill_shape_mismatch():
    with pytest.raises(T.ShapeError):
        L.logit_distill([1.0, 0.0], [1.0, 0.0, 0.0])


def test_distill_target_is_constant():
    f = T.tensor([1.0, 2.0], requires_grad=True)
    ref = T.tensor([0.0, 0.5], requires_grad=True)
    T.backward(L.logit_distill(f, ref))
    assert ref.grad is None
    np.testing.assert_allclose(f.grad, [1.0, 1.5])


def test_focal_distill_examples():
    f, old = np.array([1.0, 0.0]), np.array([0.0, 0.0])  # L_D = 0.5
    assert val(L.focal_distill(f, old, True, 1.0, 2.0)) == 1.5
    assert val(L.focal_distill(f, old, False, 1.0, 2.0)) == 0.5
    assert val(L.focal_distill(f, old, True, 0.7, 0.0)) == val(L.focal_distill(f, old, False, 0.7, 0.0)) == 0.35
    with pytest.raises(ValueError):
        L.focal_distill(f, old, True, -1.0, 0.0)


def test_pct_reductions():
    rng = np.random.default_rng(2)
    z, old = rng.standard_normal((2, 6, 4))
    y = rng.integers(0, 4, 6)
    off = L.UpdateHyperparams("pct", 0.0, 1.0, 2.0)
    assert np.array_equal(L.pct_sample_loss(z, old, y, off).data, L.cross_entropy(z, y).data)
    old_right = np.array([3.0, 0.0, 0.0])
    assert val(L.pct_sample_loss(old_right, old_right, 0, PCT)) == val(L.cross_entropy(old_right, 0))


def test_pct_hand_computation():
    hp = L.UpdateHyperparams("pct", 1.0, 1.0, 1.0)
    ce = math.log(1 + math.exp(-1))
    # old model wrong: weight alpha = 1, L_D = 1
    assert val(L.pct_sample_loss([1.0, 0.0], [0.0, 1.0], 0, hp)) == pytest.approx(ce + 1.0, abs=1e-12)
    # old model right: weight alpha + beta = 2, L_D = 0.5
    assert val(L.pct_sample_loss([1.0, 0.0], [2.0, 0.0], 0, hp)) == pytest.approx(ce + 1.0, abs=1e-12)


def test_pcat_hand_computation():
    ce = math.log(1 + math.e)
    # L_D = 0.5 * (1.5^2 + 1.5^2) = 2.25, weight 1 + 2
    got = val(L.pcat_sample_loss([0.5, -0.5], [-1.0, 1.0], 1, True, PCAT))
    assert got == pytest.approx(ce + 6.75, abs=1e-12)


def test_pcat_reductions():
    rng = np.random.default_rng(3)
    z, old = rng.standard_normal((2, 5, 4))
    y = rng.integers(0, 4, 5)
    off = L.UpdateHyperparams("pcat", 0.0, 1.0, 2.0)
    assert np.array_equal(L.pcat_sample_loss(z, old, y, None, off).data, L.cross_entropy(z, y).data)
    # with x' = x the pcat integrand is the pct one with the clean indicator
    mask = L.old_correct(old, y)
    np.testing.assert_array_equal(L.pcat_sample_loss(z, old, y, mask, PCAT).data, L.pct_sample_loss(z, old, y, PCT).data)


def test_rcat_reductions():
    rng = np.random.default_rng(4)
    z, src, old = rng.standard_normal((3, 5, 4))
    y = rng.integers(0, 4, 5)
    at = L.UpdateHyperparams("rcat", 1.0, 0.0, 0.0)
    assert np.array_equal(L.rcat_sample_loss(z, src, old, y, None, at).data, L.cross_entropy(z, y).data)
    assert RCAT.gamma == pytest.approx(0.1)
    same = np.array([2.0, 0.0, -1.0, 0.5])
    got = val(L.rcat_sample_loss(same, same, same, 0, True, RCAT))
    assert got == pytest.approx(RCAT.gamma * val(L.cross_entropy(same, 0)), abs=1e-15)


@pytest.mark.parametrize("alpha,beta", [(0.7, 0.4), (-0.1, 0.5), (0.5, 1.2)])
def test_rcat_rejects_bad_weights(alpha, beta):
    with pytest.raises(ValueError):
        L.UpdateHyperparams("rcat", 1.0, alpha, beta)


def test_method_mismatch():
    with pytest.raises(ValueError):
        L.pct_sample_loss([0.0, 1.0], [0.0, 1.0], 0, RCAT)
    with pytest.raises(ValueError):
        L.UpdateHyperparams("trades")


def test_indicator_decrement_exact():
    rng = np.random.default_rng(5)
    for _ in range(100):
        z, src, old = rng.standard_normal((3, 4))
        y = int(rng.integers(0, 4))
        ld = val(L.logit_distill(z, old))
        for hp in (PCT, L.UpdateHyperparams("pct", 0.5, 1.0, 5.0)):
            drop = val(L.pct_sample_loss(z, old, y, hp, True)) - val(L.pct_sample_loss(z, old, y, hp, False))
            assert drop == pytest.approx(hp.lam * hp.beta * ld, rel=1e-12, abs=1e-14)
        drop = val(L.pcat_sample_loss(z, old, y, True, PCAT)) - val(L.pcat_sample_loss(z, old, y, False, PCAT))
        assert drop == pytest.approx(PCAT.lam * PCAT.beta * ld, rel=1e-12, abs=1e-14)
        drop = val(L.rcat_sample_loss(z, src, old, y, True, RCAT)) - val(L.rcat_sample_loss(z, src, old, y, False, RCAT))
        assert drop == pytest.approx(RCAT.beta * ld, rel=1e-12, abs=1e-14)


def test_penalty_form_regroups_batch_loss():
    rng = np.random.default_rng(6)
    for hp in (RCAT, PCT, L.UpdateHyperparams("rcat", 1.0, 0.3, 0.6)):
        z, src, old = rng.standard_normal((3, 40, 4)) * 2
        y = rng.integers(0, 4, 40)
        total = float(np.sum(L.sample_loss(hp, z, y, old, src).data))
        risk, cons, mu = L.penalty_form(hp, z, y, old, src)
        assert mu == hp.mu
        assert abs(total - (risk + mu * cons)) <= 1e-12 * max(1.0, abs(total))


def test_sample_loss_without_hyperparams_is_ce():
    z = np.array([[0.3, -0.2, 1.0]])
    assert np.array_equal(L.sample_loss(None, z, [2]).data, L.cross_entropy(z, [2]).data)


@pytest.mark.parametrize("hp", [PCT, PCAT, RCAT], ids=lambda h: h.method)
def test_composite_gradient_wrt_logits(hp):
    rng = np.random.default_rng(7)
    for _ in range(10):
        z, src, old = rng.standard_normal((3, 3, 4))
        y = rng.integers(0, 4, 3)
        mask = rng.random(3) < 0.5
        assert check_gradient(lambda t: T.sum(L.sample_loss(hp, t, y, old, src, mask)), [z]) < 1e-5


finite = st.floats(-30, 30)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(finite, min_size=4, max_size=4),
    st.lists(finite, min_size=4, max_size=4),
    st.lists(finite, min_size=4, max_size=4),
    st.integers(0, 3),
    st.booleans(),
)
def test_losses_non_negative(z, src, old, y, mask):
    z, src, old = map(np.array, (z, src, old))
    for hp in (PCT, PCAT, RCAT, L.UpdateHyperparams("rcat", 1.0, 0.0, 1.0)):
        assert val(L.sample_loss(hp, z, y, old, src, mask)) >= 0.0
    assert val(L.cross_entropy(z, y)) >= 0.0
