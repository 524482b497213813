import itertools

import numpy as np
import pytest

from flipguard import tensor as T
from flipguard.attacks import (
    AttackConfig,
    PerturbationDomain,
    attack,
    dlr_loss,
    evaluation_config,
    fat_step,
    fgsm,
    is_robust,
    pgd,
    project,
    robust_bits_over_budgets,
)
from flipguard.losses import cross_entropy
from flipguard.models import Model, ModelSpec, init_model


def linear(W, b):
    W = np.asarray(W, dtype=float)
    return Model(ModelSpec(W.shape[0], (), W.shape[1]), [W, np.asarray(b, dtype=float)])


def feasible(adv, x, dom):
    return np.all(np.abs(adv - x) <= dom.epsilon + 1e-9) and np.all(adv >= dom.box_lo) and np.all(adv <= dom.box_hi)


# -- projection ---------------------------------------------------------------


def test_project_examples():
    dom = PerturbationDomain(0.1)
    assert project(np.array([0.75]), np.array([0.5]), dom)[0] == pytest.approx(0.6)
    assert project(np.array([0.55]), np.array([0.5]), dom)[0] == 0.55
    assert project(np.array([-0.3]), np.array([0.02]), dom)[0] == 0.0


def test_project_idempotent():
    rng = np.random.default_rng(0)
    dom = PerturbationDomain(0.07)
    x = rng.uniform(0, 1, (50, 3))
    p = project(x + rng.normal(0, 0.3, x.shape), x, dom)
    assert np.array_equal(project(p, x, dom), p)
    assert feasible(p, x, dom)


@pytest.mark.parametrize("kwargs", [dict(epsilon=-0.1), dict(epsilon=0.1, box_lo=1, box_hi=0), dict(epsilon=0.1, norm="2")])
def test_domain_validation(kwargs):
    with pytest.raises(ValueError):
        PerturbationDomain(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(kind="fgsm", iterations=5), dict(iterations=0), dict(restarts=0), dict(loss="hinge"), dict(kind="cw")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_evaluation_config_defaults():
    cfg = evaluation_config(10)
    assert (cfg.kind, cfg.iterations, cfg.restarts, cfg.loss) == ("pgd", 50, 2, "dlr")
    assert cfg.step_for(PerturbationDomain(0.03)) == pytest.approx(0.0075)
    assert evaluation_config(3).loss == "cross_entropy"


# -- fgsm and fat ---------------------------------------------------------------


def test_fgsm_zero_budget():
    m = init_model(ModelSpec(3, (4,), 4), 0)
    x = np.array([0.2, 0.4, 0.6])
    out = fgsm(m, x, 1, PerturbationDomain(0.0))
    assert np.array_equal(out.adv_point, x)
    assert out.achieved_loss == pytest.approx(cross_entropy(m.logits(x), 1).item())


def test_fgsm_one_dimensional_logistic():
    # class-1 logit w * x with w > 0: raising x increases the class-0 loss
    m = linear([[0.0, 2.0]], [0.0, 0.0])
    out = fgsm(m, np.array([0.3]), 0, PerturbationDomain(0.1))
    assert out.adv_point[0] == pytest.approx(0.4)
    out = fgsm(m, np.array([0.95]), 0, PerturbationDomain(0.1))
    assert out.adv_point[0] == 1.0


def test_fgsm_zero_gradient_keeps_point():
    m = linear(np.zeros((2, 4)), np.zeros(4))
    x = np.array([0.3, 0.6])
    assert np.array_equal(fgsm(m, x, 2, PerturbationDomain(0.1)).adv_point, x)


def test_fat_zero_budget_and_determinism():
    m = init_model(ModelSpec(2, (5,), 4), 1)
    x = np.random.default_rng(0).uniform(0, 1, (6, 2))
    y = np.arange(6) % 4
    assert np.array_equal(fat_step(m, x, y, PerturbationDomain(0.0), seed=3).adv_point, x)
    a = fat_step(m, x, y, PerturbationDomain(0.05), seed=3).adv_point
    b = fat_step(m, x, y, PerturbationDomain(0.05), seed=3).adv_point
    c = fat_step(m, x, y, PerturbationDomain(0.05), seed=4).adv_point
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert feasible(a, x, PerturbationDomain(0.05))


def test_fat_random_start_is_uniform():
    # a constant model has zero gradient, so the FAT output is the random start itself
    m = linear(np.zeros((1, 4)), np.zeros(4))
    x = np.full((10_000, 1), 0.5)
    out = fat_step(m, x, np.zeros(10_000, dtype=int), PerturbationDomain(0.1), seed=0)
    u = out.adv_point[:, 0] - 0.5
    assert abs(u.mean()) <= 0.003
    assert np.abs(u).max() <= 0.1
    assert np.abs(u).max() > 0.099


def test_fat_stream_independent_of_batch_order():
    m = init_model(ModelSpec(2, (5,), 4), 1)
    x = np.random.default_rng(0).uniform(0, 1, (8, 2))
    y = np.arange(8) % 4
    ids = np.arange(100, 108)
    full = fat_step(m, x, y, PerturbationDomain(0.05), seed=9, sample_ids=ids).adv_point
    perm = np.random.default_rng(1).permutation(8)
    part = fat_step(m, x[perm], y[perm], PerturbationDomain(0.05), seed=9, sample_ids=ids[perm]).adv_point
    assert np.array_equal(full[perm], part)


# -- dlr -------------------------------------------------------------------------


def test_dlr_examples():
    assert dlr_loss(np.array([4.0, 3.0, 2.0, 1.0]), 0).item() == pytest.approx(-0.5)
    assert dlr_loss(np.array([1.0, 4.0, 2.0, 0.0]), 0).item() == pytest.approx(1.0)


def test_dlr_shift_invariance_exact():
    rng = np.random.default_rng(0)
    for _ in range(200):
        # dyadic logits keep the shifted differences exact in binary floating point
        z = rng.integers(-64, 64, 6) / 8.0
        if len(np.unique(z)) < 3:
            continue
        y = int(rng.integers(0, 6))
        assert dlr_loss(z + 10.0, y).item() == dlr_loss(z, y).item()


def test_dlr_degenerate_falls_back_to_ce():
    z = np.array([2.0, 2.0, 2.0, 0.0])
    assert dlr_loss(z, 3).item() == pytest.approx(cross_entropy(z, 3).item())


def test_dlr_needs_four_classes():
    with pytest.raises(ValueError):
        dlr_loss(np.array([1.0, 2.0, 3.0]), 0)


# -- pgd ---------------------------------------------------------------------------


def test_pgd_returns_clean_misclassification():
    m = linear([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]], [0.0, 0.0, 0.0, 0.0])
    x = np.array([0.9, 0.1])
    out = pgd(m, x, 1, PerturbationDomain(0.05), evaluation_config(4))
    assert out.success and np.array_equal(out.adv_point, x)


def test_pgd_dominates_fgsm():
    rng = np.random.default_rng(0)
    dom = PerturbationDomain(0.05)
    cfg = AttackConfig("pgd", 50, None, 2, "cross_entropy", seed=1)
    wins = 0
    for t in range(200):
        m = init_model(ModelSpec(3, (8,), 4), t)
        x = rng.uniform(0.1, 0.9, 3)
        y = int(m.predict(x))  # clean-correct, so the search is not skipped
        wins += pgd(m, x, y, dom, cfg).achieved_loss >= fgsm(m, x, y, dom).achieved_loss - 1e-12
    assert wins >= 190


def test_pgd_linear_maximizer_is_corner():
    # two classes, large clean margin: the attack never succeeds, best point is the corner
    W = np.array([[1.0, -1.0], [-2.0, 0.5], [0.5, 3.0]])
    m = linear(W, [10.0, 0.0])
    dom = PerturbationDomain(0.1)
    rng = np.random.default_rng(2)
    cfg = AttackConfig("pgd", 50, None, 2, "cross_entropy", seed=0)
    for _ in range(20):
        x = rng.uniform(0.2, 0.8, 3)
        out = pgd(m, x, 0, dom, cfg)
        expect = x + dom.epsilon * np.sign(W[:, 1] - W[:, 0])
        np.testing.assert_allclose(out.adv_point, expect, atol=1e-12)
        assert not out.success


def _grid_robust(m, x, y, dom, steps=50):
    lo, hi = np.maximum(x - dom.epsilon, 0), np.minimum(x + dom.epsilon, 1)
    axes = [np.linspace(a, b, 2 * steps + 1) for a, b in zip(lo, hi)]
    pts = np.array(list(itertools.product(*axes)))
    return bool(np.all(m.predict(pts) == y))


def _linear_case(classes, seed):
    rng = np.random.default_rng(seed)
    m = linear(rng.standard_normal((2, classes)), rng.standard_normal(classes) * 0.3)
    x = rng.uniform(0, 1, (100, 2))
    y = m.predict(x)
    y[::7] = (y[::7] + 1) % classes  # some clean mistakes
    return m, x, y


def test_is_robust_matches_grid_oracle_on_linear_model():
    m, x, y = _linear_case(2, 5)
    dom = PerturbationDomain(0.08)
    bits = is_robust(m, x, y, dom, evaluation_config(2, seed=2))
    oracle = np.array([_grid_robust(m, xi, yi, dom) for xi, yi in zip(x, y)])
    assert np.array_equal(bits, oracle)
    assert 0 < bits.sum() < 100


def test_is_robust_is_sound_on_multiclass_linear_model():
    # with several classes sign ascent can miss a corner, but never reports a spurious attack
    m, x, y = _linear_case(4, 5)
    dom = PerturbationDomain(0.08)
    bits = is_robust(m, x, y, dom, evaluation_config(4, seed=2))
    oracle = np.array([_grid_robust(m, xi, yi, dom) for xi, yi in zip(x, y)])
    assert not np.any(oracle & ~bits)
    assert np.mean(bits == oracle) >= 0.9


def test_is_robust_trivial_cases():
    m = init_model(ModelSpec(2, (6,), 4), 3)
    x = np.array([0.4, 0.6])
    y = int(m.predict(x))
    assert is_robust(m, x, y, PerturbationDomain(0.0), evaluation_config(4))
    assert not is_robust(m, x, (y + 1) % 4, PerturbationDomain(0.05), evaluation_config(4))


def test_pgd_deterministic_per_sample():
    m = init_model(ModelSpec(3, (8,), 4), 4)
    x = np.random.default_rng(0).uniform(0, 1, (12, 3))
    y = np.arange(12) % 4
    cfg = evaluation_config(4, iterations=10, seed=5)
    dom = PerturbationDomain(0.1)
    a = pgd(m, x, y, dom, cfg, sample_ids=np.arange(12))
    perm = np.arange(12)[::-1]
    b = pgd(m, x[perm], y[perm], dom, cfg, sample_ids=perm)
    assert np.array_equal(a.adv_point[perm], b.adv_point)
    assert np.array_equal(np.asarray(a.success)[perm], b.success)


def test_attack_dispatch_feasible():
    m = init_model(ModelSpec(3, (8,), 4), 6)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (20, 3))
    y = rng.integers(0, 4, 20)
    dom = PerturbationDomain(0.2, 0.0, 1.0)
    for cfg in (AttackConfig("fgsm", 1, loss="cross_entropy"), AttackConfig("fat", 1, loss="cross_entropy", seed=2), evaluation_config(4, iterations=5)):
        assert feasible(attack(m, x, y, dom, cfg).adv_point, x, dom)


def test_monotone_budget():
    m = init_model(ModelSpec(2, (16,), 4), 7)
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (60, 2))
    y = m.predict(x)
    eps = [0.08, 0.01, 0.04, 0.02]
    bits = robust_bits_over_budgets(m, x, y, eps, evaluation_config(4, iterations=20))
    order = np.argsort(eps)
    for small, big in zip(order, order[1:]):
        # robust at the larger budget implies robust at the smaller one
        assert not np.any(bits[big] & ~bits[small])


def test_clean_error_bounds_robust_error():
    m = init_model(ModelSpec(2, (8,), 4), 8)
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (80, 2))
    y = rng.integers(0, 4, 80)
    bits = is_robust(m, x, y, PerturbationDomain(0.05), evaluation_config(4, iterations=10))
    assert np.mean(~bits) >= np.mean(m.predict(x) != y)


def test_dlr_gradient_matches_fd():
    from _oracles import check_gradient

    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.standard_normal((3, 5)) * 2
        y = rng.integers(0, 5, 3)
        assert check_gradient(lambda t: T.sum(dlr_loss(t, y)), [z]) < 1e-5
