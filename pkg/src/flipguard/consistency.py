"""Consistency of non-regression-constrained ERM on a grid of linear classifiers.

The data are a two-class isotropic Gaussian mixture in the plane. A
hypothesis is ``x -> [cos(t) x1 + sin(t) x2 > b]`` for ``(t, b)`` on a fixed
grid, so empirical minimizers are exact and the population risks are
available in closed form:

* the zero-one risk from the normal CDF of the projected class means;
* the robust zero-one risk of an L-infinity ball of radius ``eps``, which
  for a unit-norm ``w`` shrinks the margin by ``eps * |w|_1``;
* the risk on the old-model-correct region, a bivariate normal orthant
  probability evaluated through Owen's T function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import ndtr, owens_t

from .rng import stream

LOSSES = ("zero_one", "robust_zero_one")


@dataclass(frozen=True)
class Grid:
    """Angles ``t`` (radians) and offsets ``b``; both uniform."""

    angles: np.ndarray
    offsets: np.ndarray

    @classmethod
    def uniform(cls, angle_lo: float, angle_hi: float, n_angles: int, offset_lo: float, offset_hi: float, n_offsets: int) -> "Grid":
        return cls(np.linspace(angle_lo, angle_hi, n_angles), np.linspace(offset_lo, offset_hi, n_offsets))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.angles), len(self.offsets)

    def point(self, flat_index: int) -> tuple[float, float]:
        i, j = np.unravel_index(flat_index, self.shape)
        return float(self.angles[i]), float(self.offsets[j])

    def index_of(self, angle: float, offset: float) -> int:
        i = int(np.argmin(np.abs(self.angles - angle)))
        j = int(np.argmin(np.abs(self.offsets - offset)))
        return int(np.ravel_multi_index((i, j), self.shape))


@dataclass(frozen=True)
class ConsistencyProblem:
    """Two Gaussian classes with means ``mean0``/``mean1``, shared ``sigma``, equal priors.

    ``old`` is the fixed old classifier as ``(angle, offset)``; ``epsilon``
    is the L-infinity budget of the robust loss; ``epsilon_hat`` bounds the
    empirical loss on the old-correct subset (``inf`` disables it).
    """

    mean0: tuple[float, float] = (-0.5, 0.0)
    mean1: tuple[float, float] = (0.5, 0.0)
    sigma: float = 1.0
    loss: str = "zero_one"
    epsilon: float = 0.1
    old: tuple[float, float] = (0.35, 0.2)
    epsilon_hat: float = math.inf
    grid: Grid = field(default_factory=lambda: Grid.uniform(-math.pi / 3, math.pi / 3, 721, -1.5, 1.5, 601))

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")

    @property
    def budget(self) -> float:
        return self.epsilon if self.loss == "robust_zero_one" else 0.0

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.integers(0, 2, size=n)
        means = np.array([self.mean0, self.mean1])
        return means[y] + self.sigma * rng.standard_normal((n, 2)), y

    # -- population quantities ---------------------------------------------

    def _standardized(self, angles, offsets, mean, shift):
        # (t, b) -> (b + shift - w.m) / sigma for every grid point
        proj = np.cos(angles) * mean[0] + np.sin(angles) * mean[1]
        return (offsets[None, :] + shift[:, None] - proj[:, None]) / self.sigma

    def _slack(self, angles) -> np.ndarray:
        return self.budget * (np.abs(np.cos(angles)) + np.abs(np.sin(angles)))

    def population_risk(self, angles=None, offsets=None) -> np.ndarray:
        """``L(f, Z)`` on the grid (or on the given angle/offset vectors)."""
        a = self.grid.angles if angles is None else np.atleast_1d(angles)
        b = self.grid.offsets if offsets is None else np.atleast_1d(offsets)
        s = self._slack(a)
        # class 1 is wrong when proj <= b + s, class 0 when proj > b - s
        h1 = self._standardized(a, b, self.mean1, s)
        h0 = self._standardized(a, b, self.mean0, -s)
        return 0.5 * ndtr(h1) + 0.5 * (1.0 - ndtr(h0))

    def old_correct_mass(self) -> float:
        return float(1.0 - self.population_risk(np.array([self.old[0]]), np.array([self.old[1]]))[0, 0])

    def population_constraint(self, angles=None, offsets=None) -> np.ndarray:
        """``L(f, Z0)``: risk conditional on the old model being right."""
        a = self.grid.angles if angles is None else np.atleast_1d(angles)
        b = self.grid.offsets if offsets is None else np.atleast_1d(offsets)
        ta, tb = self.old
        s = self._slack(a)
        s_old = self._slack(np.array([ta]))[0]
        rho = np.cos(a - ta)[:, None] * np.ones((1, len(b)))
        # class 1: P(f wrong) - P(f wrong and old wrong)
        h1 = self._standardized(a, b, self.mean1, s)
        k1 = (tb + s_old - (math.cos(ta) * self.mean1[0] + math.sin(ta) * self.mean1[1])) / self.sigma
        joint1 = ndtr(h1) - bvn_cdf(h1, np.full_like(h1, k1), rho)
        # class 0 (upper tails): old right when proj_old <= tb - s_old
        h0 = self._standardized(a, b, self.mean0, -s)
        k0 = (tb - s_old - (math.cos(ta) * self.mean0[0] + math.sin(ta) * self.mean0[1])) / self.sigma
        joint0 = ndtr(k0) - bvn_cdf(h0, np.full_like(h0, k0), rho)
        return (0.5 * joint1 + 0.5 * joint0) / self.old_correct_mass()

    # -- empirical quantities ----------------------------------------------

    def error_counts(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-grid-point count of samples with loss one, shape ``grid.shape``."""
        a, b = self.grid.angles, self.grid.offsets
        k = len(b)
        db = (b[-1] - b[0]) / (k - 1)
        proj = np.cos(a)[:, None] * x[None, :, 0] + np.sin(a)[:, None] * x[None, :, 1]
        s = self._slack(a)[:, None]
        rows = np.arange(len(a))[:, None] * (k + 1)
        counts = np.zeros((len(a), k))
        pos = y == 1
        if np.any(pos):
            # wrong for offsets b_j >= proj - s
            j = np.clip(np.ceil((proj[:, pos] - s - b[0]) / db - 1e-9), 0, k).astype(np.int64)
            hist = np.bincount((rows + j).ravel(), minlength=len(a) * (k + 1)).reshape(len(a), k + 1)
            counts += np.cumsum(hist, axis=1)[:, :k]
        neg = ~pos
        if np.any(neg):
            # wrong for offsets b_j < proj + s
            j = np.clip(np.ceil((proj[:, neg] + s - b[0]) / db - 1e-9), 0, k).astype(np.int64)
            hist = np.bincount((rows + j).ravel(), minlength=len(a) * (k + 1)).reshape(len(a), k + 1)
            counts += np.cumsum(hist[:, ::-1], axis=1)[:, ::-1][:, 1:]
        return counts

    def old_correct(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ta, tb = self.old
        proj = math.cos(ta) * x[:, 0] + math.sin(ta) * x[:, 1]
        s = self._slack(np.array([ta]))[0]
        return np.where(y == 1, proj - s > tb, proj + s <= tb)


def bvn_cdf(h, k, rho) -> np.ndarray:
    """``P(X <= h, Y <= k)`` for standard normals with correlation ``rho`` (Owen 1956)."""
    h, k, rho = np.broadcast_arrays(np.asarray(h, float), np.asarray(k, float), np.asarray(rho, float))
    out = np.empty(h.shape)
    one = np.abs(rho) >= 1.0 - 1e-15
    if np.any(one):
        hp, kp, rp = h[one], k[one], rho[one]
        out[one] = np.where(rp > 0, ndtr(np.minimum(hp, kp)), np.maximum(ndtr(hp) - ndtr(-kp), 0.0))
    m = ~one
    if np.any(m):
        # exact zeros only matter as limits; nudge them off the singular point
        hh = np.where(h[m] == 0, 1e-12, h[m])
        kk = np.where(k[m] == 0, 1e-12, k[m])
        rr = rho[m]
        root = np.sqrt(1.0 - rr * rr)
        th = owens_t(hh, (kk - rr * hh) / (hh * root))
        tk = owens_t(kk, (hh - rr * kk) / (kk * root))
        corr = np.where(hh * kk < 0, 0.5, 0.0)
        out[m] = np.clip(0.5 * ndtr(hh) + 0.5 * ndtr(kk) - th - tk - corr, 0.0, 1.0)
    return out


@dataclass
class ErmSolution:
    index: int
    angle: float
    offset: float
    risk: float
    constraint: float
    feasible: bool = True


def _empirical(problem: ConsistencyProblem, x, y):
    mask = problem.old_correct(x, y)
    risk_counts = problem.error_counts(x, y).ravel()
    n0 = int(mask.sum())
    c_counts = problem.error_counts(x[mask], y[mask]).ravel() if n0 else np.zeros_like(risk_counts)
    return risk_counts.astype(np.int64), c_counts.astype(np.int64), len(y), n0


def _solution(problem, idx, r, c, n, n0, feasible=True) -> ErmSolution:
    a, b = problem.grid.point(idx)
    return ErmSolution(int(idx), a, b, r[idx] / n, (c[idx] / n0) if n0 else 0.0, feasible)


def _lexmin(*keys) -> int:
    # np.lexsort sorts by the last key first
    return int(np.lexsort(tuple(reversed(keys)))[0])


def solve_constrained_erm(x, y, problem: ConsistencyProblem, epsilon_hat: float | None = None) -> ErmSolution:
    """Grid argmin of empirical risk subject to empirical old-correct loss <= epsilon_hat.

    Ties go to the smaller constraint value, then the lower grid index. With
    no feasible grid point, the least-violating point is returned with
    ``feasible=False``.
    """
    eps_hat = problem.epsilon_hat if epsilon_hat is None else epsilon_hat
    return _constrained(problem, _empirical(problem, x, y), eps_hat)


def _constrained(problem, emp, eps_hat: float) -> ErmSolution:
    r, c, n, n0 = emp
    order = np.arange(len(r))
    if math.isinf(eps_hat) or n0 == 0:
        return _solution(problem, _lexmin(r, c, order), r, c, n, n0)
    # same float division as the reported constraint, so a reported value is always feasible for itself
    feasible = (c / n0) <= eps_hat
    if np.any(feasible):
        big = np.iinfo(np.int64).max
        return _solution(problem, _lexmin(np.where(feasible, r, big), c, order), r, c, n, n0)
    return _solution(problem, _lexmin(c, r, order), r, c, n, n0, feasible=False)


def solve_penalized_erm(x, y, problem: ConsistencyProblem, mu: float) -> ErmSolution:
    """Grid argmin of ``L(f, D) + mu * L(f, D0)``, compared exactly on counts."""
    return _penalized(problem, _empirical(problem, x, y), mu)


def _penalized(problem, emp, mu: float) -> ErmSolution:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    r, c, n, n0 = emp
    order = np.arange(len(r))
    if n0 == 0:
        return _solution(problem, _lexmin(r, order), r, c, n, n0)
    frac = Fraction(str(mu)) if not isinstance(mu, Fraction) else mu
    # r/n + (p/q) c/n0  ~  q*n0*r + p*n*c, compared exactly
    q, p = int(frac.denominator), int(frac.numerator)
    if q * n0 * int(r.max()) + p * n * int(c.max()) < 2**62:
        return _solution(problem, _lexmin(q * n0 * r + p * n * c, c, order), r, c, n, n0)
    obj = [q * n0 * int(ri) + p * n * int(ci) for ri, ci in zip(r, c)]
    best = min(range(len(r)), key=lambda i: (obj[i], c[i], i))
    return _solution(problem, best, r, c, n, n0)


def penalty_frontier(x, y, problem: ConsistencyProblem, mus=(0, 0.1, 1, 10, 10**6)) -> list[tuple[float, float, float]]:
    """``(mu, empirical risk, empirical constraint)`` for each penalty weight."""
    emp = _empirical(problem, x, y)
    out = []
    for mu in mus:
        sol = _penalized(problem, emp, mu)
        out.append((mu, sol.risk, sol.constraint))
    return out


def frontier_equivalence(x, y, problem: ConsistencyProblem, mus=(0, 0.1, 1, 10, 10**6)) -> list[dict]:
    """Check that each penalized solution is also the constrained solution at its own level.

    For every ``mu`` the constraint value ``c_mu`` of the penalized optimum is
    used as ``epsilon_hat``; the constrained optimum must reproduce the same
    (risk, constraint) pair.
    """
    emp = _empirical(problem, x, y)
    rows = []
    for mu in mus:
        pen = _penalized(problem, emp, mu)
        risk, cons = pen.risk, pen.constraint
        sol = _constrained(problem, emp, cons)
        rows.append({"mu": mu, "epsilon_hat": cons, "penalized": (risk, cons), "constrained": (sol.risk, sol.constraint), "match": (risk, cons) == (sol.risk, sol.constraint)})
    return rows


@dataclass
class RateFit:
    n_list: list[int]
    mean_excess: list[float]
    constraint_values: list[float]
    population_constraint_mean: list[float]
    population_constraint_std: list[float]
    slope: float
    intercept: float
    saturated: bool = False
    infeasible_trials: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def optimum(problem: ConsistencyProblem) -> tuple[int, float, float]:
    """Population minimizer on the grid under the population constraint."""
    risk = problem.population_risk().ravel()
    if math.isinf(problem.epsilon_hat):
        idx = int(np.argmin(risk))
    else:
        cons = problem.population_constraint().ravel()
        ok = cons <= problem.epsilon_hat
        idx = int(np.argmin(np.where(ok, risk, np.inf))) if np.any(ok) else int(np.argmin(cons))
    cons_val = float(problem.population_constraint().ravel()[idx])
    return idx, float(risk[idx]), cons_val


def measure_rate(problem: ConsistencyProblem, n_list, trials: int = 20, seed: int = 0) -> RateFit:
    """Mean excess population risk of the constrained estimator versus ``n``.

    The excess is ``|L(f_hat, Z) - L(f*, Z)|``: with an active constraint
    the estimator may sit on either side of the population boundary.
    """
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing")
    if trials < 10:
        raise ValueError("trials must be >= 10")
    _, best_risk, _ = optimum(problem)
    risk = problem.population_risk().ravel()
    pcons = problem.population_constraint().ravel()
    means, cons, pc_mean, pc_std, infeasible = [], [], [], [], 0
    for n in n_list:
        ex, cv, pv = [], [], []
        for t in range(trials):
            x, y = problem.sample(n, stream(seed, n, t))
            sol = solve_constrained_erm(x, y, problem)
            infeasible += not sol.feasible
            ex.append(abs(risk[sol.index] - best_risk))
            cv.append(sol.constraint)
            pv.append(pcons[sol.index])
        means.append(float(np.mean(ex)))
        cons.append(float(np.mean(cv)))
        pc_mean.append(float(np.mean(pv)))
        pc_std.append(float(np.std(pv)))
    floor = 1e-12
    saturated = all(m <= floor for m in means)
    if saturated:
        slope, intercept = 0.0, float("-inf")
    else:
        ln_n = np.log(n_list)
        ln_e = np.log(np.maximum(means, floor))
        slope, intercept = np.polyfit(ln_n, ln_e, 1)
    return RateFit(n_list, means, cons, pc_mean, pc_std, float(slope), float(intercept), saturated, infeasible)
