"""Conditional-risk oracles and numerical checks of the consistency bounds.

Everything here works on finite problems: a conditional distribution ``p``
over ``n`` labels, an abstention cost ``c`` and, for expectation statements,
a weighted set of such atoms. Labels are 0-based and the abstain decision is
index ``n``. The augmented weight vector ``p+ = (p, 1 - c)`` turns the
abstention conditional risk into ``1 - p+[decision]`` and the surrogate
conditional risk into a weighted comp-sum risk over ``n + 1`` categories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.special import logsumexp

from .losses import (
    EXPONENTIAL,
    Margin,
    canonical_mu,
    check_cost,
    margin,
    predict_label,
    weighted_comp_sum,
)

PROB_TOL = 1e-12
VIOLATION_TOL = 1e-9
MAX_RECORDED_VIOLATIONS = 50


# --------------------------------------------------------------------------
# Distributions
# --------------------------------------------------------------------------


def _check_prob_rows(p: np.ndarray, tol: float, what: str = "probability vector"):
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{what} has non-finite entries")
    if np.any(p < -tol):
        raise ValueError(f"{what} has negative entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{what} must sum to 1 (off by {worst:.3g})")


@dataclass(frozen=True)
class ConditionalDistribution:
    """Label distribution at one input together with the abstention cost."""

    p: np.ndarray
    c: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("p must be a vector over at least two labels")
        _check_prob_rows(p, PROB_TOL)
        p = np.clip(p, 0.0, None)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "c", check_cost(self.c))

    @property
    def n(self) -> int:
        return self.p.size

    @property
    def augmented(self) -> np.ndarray:
        return np.append(self.p, 1.0 - self.c)


@dataclass
class DiscreteProblem:
    """Finite mixture of atoms sharing ``n`` and ``c``.

    Parameters
    ----------
    weights : (A,) array
        Positive atom masses summing to one.
    probs : (A, n) array
        Conditional label distribution of each atom.
    c : float
        Abstention cost.
    features : (A, d) array, optional
        Feature vector attached to each atom, needed whenever a parametric
        model family is evaluated on the problem.
    """

    weights: np.ndarray
    probs: np.ndarray
    c: float
    features: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.c = check_cost(self.c)
        if self.probs.shape[0] != self.weights.size:
            raise ValueError("one probability row per atom is required")
        if self.probs.shape[1] < 2:
            raise ValueError("problems need at least two labels")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("atom weights must be positive and finite")
        if abs(self.weights.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"atom weights must sum to 1, got {self.weights.sum():.15g}")
        _check_prob_rows(self.probs, PROB_TOL)
        self.probs = np.clip(self.probs, 0.0, None)
        if self.features is not None:
            f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
            if f.shape[0] != self.weights.size or not np.all(np.isfinite(f)):
                raise ValueError("features must be finite with one row per atom")
            self.features = f

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[float, ConditionalDistribution]], features=None):
        if not atoms:
            raise ValueError("a problem needs at least one atom")
        cs = {d.c for _, d in atoms}
        ns = {d.n for _, d in atoms}
        if len(cs) != 1 or len(ns) != 1:
            raise ValueError("all atoms must share n and c")
        weights = np.array([w for w, _ in atoms], dtype=np.float64)
        probs = np.stack([d.p for _, d in atoms])
        return cls(weights, probs, cs.pop(), features)

    @property
    def n(self) -> int:
        return self.probs.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def augmented(self) -> np.ndarray:
        return augment(self.probs, self.c)

    @property
    def deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.probs.max(axis=1), 1.0, rtol=0, atol=PROB_TOL)))

    def atoms(self) -> list[tuple[float, ConditionalDistribution]]:
        return [(float(w), ConditionalDistribution(p, self.c)) for w, p in zip(self.weights, self.probs)]


def augment(probs, c: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    tail = np.full(probs.shape[:-1] + (1,), 1.0 - c)
    return np.concatenate([probs, tail], axis=-1)


def random_simplex(rng: np.random.Generator, size, n: int) -> np.ndarray:
    """Uniform draws from the probability simplex via normalized exponentials."""
    e = rng.exponential(size=tuple(np.atleast_1d(size)) + (n,))
    return e / e.sum(axis=-1, keepdims=True)


def random_problem(rng: np.random.Generator, atoms: int, n: int, c: float) -> DiscreteProblem:
    w = random_simplex(rng, (), atoms)
    w = np.maximum(w, 1e-6)
    return DiscreteProblem(w / w.sum(), random_simplex(rng, atoms, n), c)


# --------------------------------------------------------------------------
# Abstention-loss conditional quantities
# --------------------------------------------------------------------------


def _dist_parts(dist):
    if isinstance(dist, ConditionalDistribution):
        return dist.p, dist.c
    p, c = dist
    return np.asarray(p, dtype=np.float64), check_cost(c)


def conditional_risk_abstention(decision, dist) -> float:
    """``1 - p+[decision]``: the expected abstention loss of a fixed decision."""
    p, c = _dist_parts(dist)
    n = p.shape[-1]
    d = np.asarray(decision)
    if np.any(d < 0) or np.any(d > n):
        raise ValueError(f"decision must lie in [0, {n}]")
    out = 1.0 - np.take_along_axis(augment(p, c), d[..., None], axis=-1)[..., 0]
    return float(out) if out.ndim == 0 else out


def chow_decision(dist):
    """Bayes-optimal decision: abstain iff ``1 - c >= max p``.

    Accepts a :class:`ConditionalDistribution`, or a pair ``(probs, c)``
    where ``probs`` may carry leading batch axes.
    """
    p, c = _dist_parts(dist)
    n = p.shape[-1]
    top = np.argmax(p, axis=-1)
    out = np.where(1.0 - c >= np.max(p, axis=-1), n, top)
    return int(out) if out.ndim == 0 else out


def abstention_calibration_gap(decision, dist):
    """``p+[chow] - p+[decision]`` with every decision reachable."""
    p, c = _dist_parts(dist)
    pa = augment(p, c)
    best = np.asarray(chow_decision((p, c)))
    d = np.asarray(decision)
    out = (
        np.take_along_axis(pa, best[..., None], axis=-1)[..., 0]
        - np.take_along_axis(pa, np.broadcast_to(d, best.shape)[..., None], axis=-1)[..., 0]
    )
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Surrogate conditional risk and its minimum
# --------------------------------------------------------------------------


def conditional_risk_surrogate(scores, dist, mu: float):
    """``sum_y p+[y] * l_mu(s, y)`` over the ``n + 1`` categories."""
    p, c = _dist_parts(dist)
    s = np.asarray(scores, dtype=np.float64)
    w = augment(p, c)
    val = weighted_comp_sum(s, w, mu, grad=False)
    return float(val[0]) if s.ndim == 1 else val


def analytic_weighted_minimum(weights, mu: float):
    """Infimum over scores of ``sum_y w[y] l_mu(s, y)`` in closed form.

    In softmax coordinates the risk is convex for ``mu < 2`` with minimizer
    ``q ∝ w ** (1 / (2 - mu))``; it is linear at ``mu = 2`` and concave above,
    so the infimum then sits on the vertex of the heaviest weight.

    Returns
    -------
    value : (B,) array
    q : (B, K) array
        Minimizing (or limiting) softmax vector.
    """
    mu = canonical_mu(mu)
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    total = w.sum(axis=1)
    if mu < 2.0:
        r = w ** (1.0 / (2.0 - mu))
        S = r.sum(axis=1)
        q = r / S[:, None]
        if mu == 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(w > 0, w * np.log(q), 0.0)
            value = -terms.sum(axis=1)
        else:
            value = (S ** (2.0 - mu) - total) / (1.0 - mu)
    else:
        k = np.argmax(w, axis=1)
        q = np.zeros_like(w)
        q[np.arange(w.shape[0]), k] = 1.0
        value = (total - w.max(axis=1)) / (mu - 1.0)
    return value, q


def _risk_newton_parts(x, w, mu, hessian=True):
    """Value, free-coordinate gradient and Hessian with the last logit at 0."""
    s = np.concatenate([x, np.zeros((x.shape[0], 1))], axis=1)
    lse = logsumexp(s, axis=1, keepdims=True)
    sig = np.exp(s - lse)
    pos = w > 0
    z = np.where(pos, np.maximum(lse - s, 0.0), 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp((1.0 - mu) * z)
        lz = z if mu == 1.0 else np.expm1((1.0 - mu) * z) / (1.0 - mu)
        val = np.sum(np.where(pos, w * lz, 0.0), axis=1)
        wa = np.where(pos, w * a, 0.0)
    A = wa.sum(axis=1, keepdims=True)
    g = A * sig - wa
    if not hessian:
        return val, g
    cc = (1.0 - mu) * wa
    C = cc.sum(axis=1)[:, None, None]
    ss = sig[:, :, None] * sig[:, None, :]
    sc = sig[:, :, None] * cc[:, None, :]
    H = A[:, :, None] * (_diag(sig) - ss) + C * ss - sc - np.swapaxes(sc, 1, 2) + _diag(cc)
    return val, g, H[:, :-1, :-1]


def _diag(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[:, idx, idx] = v
    return out


@dataclass
class OracleResult:
    """Batched output of :func:`minimize_weighted_comp_sum`."""

    value: np.ndarray
    softmax: np.ndarray
    scores: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    iterations: int


def _newton_direction(H, g):
    """Plain Newton step where it descends, eigenvalue-modified step elsewhere."""
    d = np.full_like(g, np.nan)
    try:
        d = -np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        pass
    slope = np.einsum("bi,bi->b", g, d)
    pd = np.all(np.isfinite(d), axis=1) & (slope < 0)
    bad = np.flatnonzero(~pd)
    if bad.size:
        lam, V = np.linalg.eigh(H[bad])
        scale = np.maximum(np.abs(lam).max(axis=1, keepdims=True), 1.0)
        lam = np.maximum(np.abs(lam), 1e-14 * scale)
        d[bad] = -np.einsum("bij,bj->bi", V, np.einsum("bji,bj->bi", V, g[bad]) / lam)
    return d


def _newton(x, w, mu, tol, max_iter, max_step=5.0):
    B = x.shape[0]
    x = x.copy()
    val, g_full, H = _risk_newton_parts(x, w, mu)
    done = np.linalg.norm(g_full, axis=1) < tol
    it = 0
    while it < max_iter and not np.all(done):
        it += 1
        act = np.flatnonzero(~done)
        xa, va, ga, Ha = x[act], val[act], g_full[act], H[act]
        gf = ga[:, :-1]
        d = _newton_direction(Ha, gf)
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        d *= np.minimum(1.0, max_step / np.maximum(norm, 1e-300))
        slope = np.einsum("bi,bi->b", gf, d)
        gnorm = np.linalg.norm(ga, axis=1)

        step = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        new_x = xa.copy()
        for _ in range(60):
            todo = np.flatnonzero(~accepted)
            if todo.size == 0:
                break
            trial = xa[todo] + step[todo, None] * d[todo]
            tv, tg = _risk_newton_parts(trial, w[act[todo]], mu, hessian=False)
            armijo = tv <= va[todo] + 1e-4 * step[todo] * slope[todo]
            flat = np.abs(tv - va[todo]) <= 1e-14 * (1.0 + np.abs(va[todo]))
            ok = np.isfinite(tv) & (armijo | (flat & (np.linalg.norm(tg, axis=1) < gnorm[todo])))
            new_x[todo[ok]] = trial[ok]
            accepted[todo[ok]] = True
            step[todo[~ok]] *= 0.5
        stalled = ~accepted
        x[act] = new_x
        nv, ng, nH = _risk_newton_parts(x[act], w[act], mu)
        val[act], g_full[act], H[act] = nv, ng, nH
        conv = np.linalg.norm(ng, axis=1) < tol
        done[act[conv | stalled]] = True
    converged = np.linalg.norm(g_full, axis=1) < tol
    return x, val, g_full, converged, it


def _starts(K: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    starts = [np.zeros(K - 1)]
    for k in range(K):
        x = np.zeros(K - 1)
        if k < K - 1:
            x[k] = 4.0
        else:
            x[:] = -4.0
        starts.append(x)
    while len(starts) < count:
        starts.append(rng.normal(scale=2.0, size=K - 1))
    return starts


def minimize_weighted_comp_sum(
    weights, mu: float, starts: int = 5, tol: float = 1e-10, max_iter: int = 20000, seed: int = 0
) -> OracleResult:
    """Numerically minimize ``sum_y w[y] l_mu(s, y)`` for each row of ``weights``.

    The last logit is pinned to 0 and the remaining ones are optimized by a
    damped Newton method whose Hessian eigenvalues are replaced by their
    absolute values, which keeps every step a descent direction when the
    risk is not convex in the logits. Starts: the origin, one start pushed
    toward every category, and random starts to reach ``starts`` in total.
    The best start per row wins. ``residual`` is the L1 norm of the score
    gradient at the returned point.
    """
    mu = canonical_mu(mu)
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    B, K = w.shape
    rng = np.random.default_rng(seed)
    best_val = np.full(B, np.inf)
    best_x = np.zeros((B, K - 1))
    best_g = np.full((B, K), np.inf)
    best_conv = np.zeros(B, dtype=bool)
    iters = 0
    for x0 in _starts(K, starts, rng):
        x, val, g, conv, it = _newton(np.tile(x0, (B, 1)), w, mu, tol, max_iter)
        iters = max(iters, it)
        better = val < best_val
        best_val[better], best_x[better] = val[better], x[better]
        best_g[better], best_conv[better] = g[better], conv[better]
    s = np.concatenate([best_x, np.zeros((B, 1))], axis=1)
    q = np.exp(s - logsumexp(s, axis=1, keepdims=True))
    return OracleResult(best_val, q, s, np.abs(best_g).sum(axis=1), best_conv, iters)


def min_conditional_risk_surrogate(dist, mu: float, **kw):
    """Best surrogate conditional risk over all score vectors.

    Returns ``(value, softmax, result)`` where ``result`` is the full
    :class:`OracleResult` carrying the residual and the convergence flag.
    """
    p, c = _dist_parts(dist)
    res = minimize_weighted_comp_sum(augment(p, c), mu, **kw)
    return float(res.value[0]), res.softmax[0], res


# --------------------------------------------------------------------------
# Minimizability gaps
# --------------------------------------------------------------------------


def closed_form_V(mu: float, c: float) -> float:
    """Best surrogate conditional risk on a deterministic point.

    For ``mu < 2`` this is the interior optimum; for ``mu >= 2`` the risk
    is minimized at the vertex that puts all softmax mass on the true label,
    leaving only the rejection term ``(1 - c) / (mu - 1)``.
    """
    mu = canonical_mu(mu)
    c = check_cost(c)
    if mu == 1.0:
        return -math.log(1.0 / (2.0 - c)) - (1.0 - c) * math.log((1.0 - c) / (2.0 - c))
    if mu >= 2.0:
        return (1.0 - c) / (mu - 1.0)
    u = (1.0 - c) ** (1.0 / (2.0 - mu))
    return ((1.0 + u) ** (2.0 - mu) - (2.0 - c)) / (1.0 - mu)


def optimal_softmax_deterministic(mu: float, c: float) -> tuple[float, float]:
    """Softmax mass on the true label and on abstention at the optimum."""
    mu = canonical_mu(mu)
    c = check_cost(c)
    if mu >= 2.0:
        return 1.0, 0.0
    u = (1.0 - c) ** (1.0 / (2.0 - mu))
    return 1.0 / (1.0 + u), u / (1.0 + u)


@dataclass
class GapReport:
    mu: float
    c: float
    closed_form_V: float | None
    numeric_V: float
    gap_estimate: float
    optimal_softmax: tuple[float, float]
    best_in_class: float | None = None
    family: str = "complete"
    converged: bool = True
    residual: float = 0.0

    def __post_init__(self):
        self.optimal_softmax = tuple(float(v) for v in self.optimal_softmax)

    @property
    def V_error(self) -> float | None:
        if self.closed_form_V is None:
            return None
        return abs(self.closed_form_V - self.numeric_V)


def deterministic_gap_report(mu: float, c: float, n: int = 2, **kw) -> GapReport:
    """Closed-form and numeric ``V`` for a point whose label is certain."""
    mu = canonical_mu(mu)
    p = np.zeros(n)
    p[0] = 1.0
    value, q, res = min_conditional_risk_surrogate((p, c), mu, **kw)
    return GapReport(
        mu=mu,
        c=c,
        closed_form_V=closed_form_V(mu, c),
        numeric_V=value,
        gap_estimate=0.0,
        optimal_softmax=(float(q[0]), float(q[n])),
        converged=bool(res.converged[0]),
        residual=float(res.residual[0]),
    )


@dataclass(frozen=True)
class CompleteFamily:
    """All score functions: every decision is reachable at every input."""

    name: str = "complete"


@dataclass(frozen=True)
class FixedScores:
    """Singleton family assigning the given score rows to the atoms."""

    scores: Any
    name: str = "fixed"


def minimizability_gap(problem: DiscreteProblem, family, mu: float, **kw) -> GapReport:
    """``E*_L(family) - E_x[min_s C_L(s, x)]`` for the comp-sum surrogate.

    ``family`` is :class:`CompleteFamily`, :class:`FixedScores` or a
    :class:`~abstention.models.PopulationFamily`, whose best-in-class risk is
    found by training on the exact population.
    """
    mu = canonical_mu(mu)
    w_aug = problem.augmented
    res = minimize_weighted_comp_sum(w_aug, mu, **kw)
    pointwise = float(problem.weights @ res.value)
    residual = float(problem.weights @ res.residual)
    if isinstance(family, CompleteFamily):
        best = pointwise
    elif isinstance(family, FixedScores):
        s = np.broadcast_to(np.asarray(family.scores, dtype=np.float64), w_aug.shape)
        best = float(problem.weights @ weighted_comp_sum(s, w_aug, mu, grad=False))
    elif hasattr(family, "best_in_class"):
        best = float(family.best_in_class(problem, mu))
    else:
        raise TypeError(f"unsupported family {family!r}")
    V = closed_form_V(mu, problem.c) if problem.deterministic else None
    opt = np.sum(problem.weights[:, None] * res.softmax, axis=0)
    y_mass = float(problem.weights @ res.softmax[np.arange(problem.size), problem.probs.argmax(axis=1)])
    return GapReport(
        mu=mu,
        c=problem.c,
        closed_form_V=V,
        numeric_V=pointwise,
        gap_estimate=best - pointwise,
        optimal_softmax=(y_mass, float(opt[-1])),
        best_in_class=best,
        family=getattr(family, "name", type(family).__name__),
        converged=bool(np.all(res.converged)),
        residual=residual,
    )


# --------------------------------------------------------------------------
# Bound transforms
# --------------------------------------------------------------------------


def gamma_mu(t, mu: float, c: float, n: int):
    """Bound transform of the comp-sum abstention surrogates."""
    mu = canonical_mu(mu)
    c = check_cost(c)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("gamma_mu is defined for t >= 0")
    if mu < 1.0:
        out = np.sqrt((2.0 - c) * 2.0**mu * (2.0 - mu) * t)
    elif mu < 2.0:
        out = np.sqrt(2.0 * (2.0 - c) * (n + 1.0) ** (mu - 1.0) * t)
    else:
        out = (mu - 1.0) * (n + 1.0) ** (mu - 1.0) * t
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GammaTransform:
    """Concave non-decreasing transform ``t -> outer * base(inner * t)``.

    ``base`` is ``sqrt(k t)``, ``k t`` or a piecewise-linear envelope through
    ``knots`` (flat beyond the last knot).
    """

    kind: str
    k: float = 1.0
    knots: tuple = ()
    outer: float = 1.0
    inner: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sqrt", "linear", "envelope"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not (self.k > 0 and self.outer > 0 and self.inner > 0):
            raise ValueError("transform constants must be positive")
        if self.kind == "envelope":
            xs = np.array([x for x, _ in self.knots])
            ys = np.array([y for _, y in self.knots])
            if xs.size < 2 or xs[0] != 0.0 or ys[0] != 0.0 or np.any(np.diff(xs) <= 0):
                raise ValueError("envelope knots must start at (0, 0) with increasing abscissae")
        if self.kind == "linear" and (self.outer != 1.0 or self.inner != 1.0):
            object.__setattr__(self, "k", self.k * self.outer * self.inner)
            object.__setattr__(self, "outer", 1.0)
            object.__setattr__(self, "inner", 1.0)

    @classmethod
    def sqrt(cls, k: float = 1.0):
        return cls("sqrt", k=k)

    @classmethod
    def linear(cls, k: float = 1.0):
        return cls("linear", k=k)

    @classmethod
    def envelope(cls, xs, ys):
        return cls("envelope", knots=tuple(zip(map(float, xs), map(float, ys))))

    @classmethod
    def for_mu(cls, mu: float, c: float, n: int):
        """The transform :func:`gamma_mu` as a descriptor."""
        mu = canonical_mu(mu)
        c = check_cost(c)
        if mu < 1.0:
            return cls.sqrt((2.0 - c) * 2.0**mu * (2.0 - mu))
        if mu < 2.0:
            return cls.sqrt(2.0 * (2.0 - c) * (n + 1.0) ** (mu - 1.0))
        return cls.linear((mu - 1.0) * (n + 1.0) ** (mu - 1.0))

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def scaled(self, factor: float) -> "GammaTransform":
        """Multiply the output by ``factor`` (used for mutation controls)."""
        return replace(self, outer=self.outer * factor)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("transforms are defined for t >= 0")
        u = self.inner * t
        if self.kind == "sqrt":
            out = np.sqrt(self.k * u)
        elif self.kind == "linear":
            out = self.k * u
        else:
            xs = np.array([x for x, _ in self.knots])
            ys = np.array([y for _, y in self.knots])
            out = np.interp(u, xs, ys)
        out = self.outer * out
        return float(out) if out.ndim == 0 else out

    def check_invariants(self, upper: float = 10.0, points: int = 1000, tol: float = 1e-12) -> bool:
        """Zero at zero, non-decreasing and concave on a uniform grid."""
        grid = np.linspace(0.0, upper, points)
        v = self(grid)
        if abs(v[0]) > tol:
            return False
        if np.any(np.diff(v) < -tol):
            return False
        second = v[2:] - 2.0 * v[1:-1] + v[:-2]
        return bool(np.all(second <= tol * max(1.0, float(np.max(np.abs(v))))))


def transform_bound(gamma: GammaTransform, c: float) -> GammaTransform:
    """``t -> (2 - c) * gamma(t / (2 - c))``; linear transforms are fixed points."""
    c = check_cost(c)
    return replace(gamma, outer=gamma.outer * (2.0 - c), inner=gamma.inner / (2.0 - c))


# --------------------------------------------------------------------------
# Bound-check reports
# --------------------------------------------------------------------------


@dataclass
class BoundCheckReport:
    """Outcome of checking ``lhs <= rhs`` over many trials."""

    trials: int = 0
    violations: list = field(default_factory=list)
    violation_count: int = 0
    max_slack: float = -math.inf
    min_slack: float = math.inf
    unconverged: int = 0
    params: dict = field(default_factory=dict)
    passed: bool = True

    def record(self, lhs, rhs, tol, inputs=None, converged=None):
        lhs = np.atleast_1d(np.asarray(lhs, dtype=np.float64))
        rhs = np.atleast_1d(np.asarray(rhs, dtype=np.float64))
        slack = rhs - lhs
        self.trials += lhs.size
        if lhs.size:
            self.max_slack = max(self.max_slack, float(slack.max()))
            self.min_slack = min(self.min_slack, float(slack.min()))
        if converged is not None:
            self.unconverged += int(np.sum(~np.asarray(converged, dtype=bool)))
        bad = np.flatnonzero(slack < -np.asarray(tol))
        self.violation_count += bad.size
        for i in bad[: max(0, MAX_RECORDED_VIOLATIONS - len(self.violations))]:
            entry = {"lhs": float(lhs[i]), "rhs": float(rhs[i])}
            if inputs is not None:
                entry["inputs"] = _jsonable(inputs(i) if callable(inputs) else inputs[i])
            self.violations.append(entry)
        self.passed = self.violation_count == 0
        return self

    def merge(self, other: "BoundCheckReport") -> "BoundCheckReport":
        out = BoundCheckReport(
            trials=self.trials + other.trials,
            violations=(self.violations + other.violations)[:MAX_RECORDED_VIOLATIONS],
            violation_count=self.violation_count + other.violation_count,
            max_slack=max(self.max_slack, other.max_slack),
            min_slack=min(self.min_slack, other.min_slack),
            unconverged=self.unconverged + other.unconverged,
            params={**self.params, **other.params} if self.params != other.params else dict(self.params),
        )
        out.passed = out.violation_count == 0
        return out


def merge_reports(reports) -> BoundCheckReport:
    out = BoundCheckReport()
    for r in reports:
        out = out.merge(r)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


# --------------------------------------------------------------------------
# Single-stage bound
# --------------------------------------------------------------------------


def check_theorem_3_1(
    mu: float,
    c: float,
    n: int,
    trials: int = 10_000,
    atoms: int = 10,
    seed: int = 0,
    gamma: GammaTransform | None = None,
    gamma_scale: float = 1.0,
    score_range: float = 5.0,
    tol: float = VIOLATION_TOL,
) -> BoundCheckReport:
    """Check the comp-sum abstention bound pointwise and in expectation.

    Every trial draws ``p`` uniformly on the simplex and scores uniformly in
    ``[-score_range, score_range]``; the target gap is the abstention
    calibration gap and the surrogate gap is measured against the numeric
    oracle. Consecutive groups of ``atoms`` trials additionally form a
    weighted problem on which the expectation form is checked exactly.
    ``gamma_scale`` multiplies the transform (values below 1 are mutation
    controls that should produce violations).
    """
    mu = canonical_mu(mu)
    c = check_cost(c)
    if trials < 1:
        raise ValueError("trials must be positive")
    gamma = (gamma or GammaTransform.for_mu(mu, c, n)).scaled(gamma_scale)
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, trials, n)
    s = rng.uniform(-score_range, score_range, size=(trials, n + 1))
    w = augment(p, c)
    oracle = minimize_weighted_comp_sum(w, mu, seed=seed)
    risk = weighted_comp_sum(s, w, mu, grad=False)
    best = np.minimum(oracle.value, risk)
    d_sur = risk - best
    d_abs = abstention_calibration_gap(predict_label(s), (p, c))
    res = oracle.residual

    report = BoundCheckReport(params={"theorem": "3.1", "mu": mu, "c": c, "n": n, "gamma_scale": gamma_scale})
    report.record(
        d_abs,
        gamma(d_sur + res),
        tol,
        inputs=lambda i: {"form": "pointwise", "p": p[i], "scores": s[i]},
        converged=oracle.converged,
    )

    groups = trials // atoms
    if groups:
        idx = np.arange(groups * atoms).reshape(groups, atoms)
        aw = random_simplex(rng, groups, atoms)
        lhs = np.sum(aw * d_abs[idx], axis=1)
        rhs = gamma(np.sum(aw * (d_sur[idx] + res[idx]), axis=1))
        exp_report = BoundCheckReport()
        exp_report.record(lhs, rhs, tol, inputs=lambda g: {"form": "expectation", "atoms": idx[g], "weights": aw[g]})
        report.violations += exp_report.violations
        report.violations = report.violations[:MAX_RECORDED_VIOLATIONS]
        report.violation_count += exp_report.violation_count
        report.min_slack = min(report.min_slack, exp_report.min_slack)
        report.max_slack = max(report.max_slack, exp_report.max_slack)
        report.params["expectation_trials"] = groups
        report.passed = report.violation_count == 0
    return report


# --------------------------------------------------------------------------
# General transformation
# --------------------------------------------------------------------------


def _zero_one_gap(q_probs, scores):
    """Standard multi-class target gap ``max q - q[argmax s]`` (smallest index)."""
    h = np.argmax(scores, axis=-1)
    return q_probs.max(axis=-1) - np.take_along_axis(q_probs, h[..., None], axis=-1)[..., 0]


@dataclass
class TransformCheckReport:
    premise: BoundCheckReport
    conclusion: BoundCheckReport

    @property
    def passed(self) -> bool:
        return self.premise.passed and self.conclusion.passed


def check_theorem_3_3(
    base_mu: float,
    gamma: GammaTransform,
    c: float,
    n: int,
    problems: int = 1000,
    max_atoms: int = 5,
    seed: int = 0,
    tol: float = VIOLATION_TOL,
) -> TransformCheckReport:
    """Check that a base-loss bound carries over to its abstention surrogate.

    On each random problem the normalized augmented distribution
    ``p+ / (2 - c)`` is a distribution over ``n + 1`` categories. The premise
    (``gamma`` bounds the base loss ``l_mu`` against the multi-class zero-one
    loss) and the conclusion (``transform_bound(gamma, c)`` bounds the
    surrogate against the abstention loss) are both checked in expectation
    over the problem atoms. Scores mix uniform draws with perturbations of
    the optimum so that near-tight cases are represented.
    """
    c = check_cost(c)
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, max_atoms + 1, size=problems)
    total = int(counts.sum())
    owner = np.repeat(np.arange(problems), counts)
    aw = np.concatenate([random_simplex(rng, (), k) for k in counts])
    p = random_simplex(rng, total, n)
    w = augment(p, c)
    pbar = w / (2.0 - c)
    oracle_base = minimize_weighted_comp_sum(pbar, base_mu, seed=seed)
    noise = rng.uniform(0, 1, size=total)
    scores = np.where(
        (noise < 0.5)[:, None],
        rng.uniform(-5, 5, size=(total, n + 1)),
        oracle_base.scores + rng.normal(size=(total, n + 1)) * 10.0 ** rng.uniform(-4, 0, size=(total, 1)),
    )
    base_risk = weighted_comp_sum(scores, pbar, base_mu, grad=False)
    d_base = base_risk - np.minimum(oracle_base.value, base_risk) + oracle_base.residual
    d_01 = _zero_one_gap(pbar, scores)

    d_sur = (2.0 - c) * d_base
    d_abs = abstention_calibration_gap(predict_label(scores), (p, c))

    def per_problem(v):
        return np.bincount(owner, weights=aw * v, minlength=problems)

    premise = BoundCheckReport(params={"theorem": "3.3-premise", "base_mu": base_mu, "c": c, "n": n})
    premise.record(per_problem(d_01), gamma(per_problem(d_base)), tol, converged=oracle_base.converged)
    conclusion = BoundCheckReport(params={"theorem": "3.3", "base_mu": base_mu, "c": c, "n": n})
    conclusion.record(per_problem(d_abs), transform_bound(gamma, c)(per_problem(d_sur)), tol)
    return TransformCheckReport(premise, conclusion)


# --------------------------------------------------------------------------
# Calibration-function estimates
# --------------------------------------------------------------------------


def binary_margin_infimum(eta, phi: Margin):
    """``inf_t eta Phi(t) + (1 - eta) Phi(-t)`` for the two margin kinds.

    The same expression with unnormalized masses ``(e, c)`` gives the best
    second-stage conditional risk, so ``eta`` may be any non-negative array
    paired with ``other``.
    """
    return second_stage_infimum(eta, 1.0 - np.asarray(eta, dtype=np.float64), phi)


def second_stage_infimum(e, c, phi: Margin):
    """``inf_u e Phi(u) + c Phi(-u)`` for masses ``e, c >= 0``."""
    phi = margin(phi)
    e = np.asarray(e, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), e.shape)
    if phi.kind == "exponential":
        return 2.0 * np.sqrt(e * c)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(e > 0, e * np.log2(1.0 + c / np.where(e > 0, e, 1.0)), 0.0)
        b = np.where(c > 0, c * np.log2(1.0 + e / np.where(c > 0, c, 1.0)), 0.0)
    return a + b


def _second_stage_gap_ld(e, c, u, phi: Margin) -> np.ndarray:
    """``e Phi(u) + c Phi(-u) - inf`` evaluated in extended precision.

    Gaps near zero come from the difference of two O(1) numbers; in double
    precision that difference bottoms out around 1e-16, which corresponds to
    target gaps of order 1e-8 and would swamp a 1e-9 tolerance.
    """
    ld = np.longdouble
    e = np.asarray(e, dtype=ld)
    c = np.broadcast_to(np.asarray(c, dtype=ld), e.shape)
    u = np.broadcast_to(np.asarray(u, dtype=ld), e.shape)
    if phi.kind == "exponential":
        risk = e * np.exp(-u) + c * np.exp(u)
        inf = 2 * np.sqrt(e * c)
    else:
        l2 = np.log(ld(2))
        risk = (e * np.logaddexp(ld(0), -u) + c * np.logaddexp(ld(0), u)) / l2
        safe_e = np.where(e > 0, e, ld(1))
        safe_c = np.where(c > 0, c, ld(1))
        inf = (np.where(e > 0, e * np.log1p(c / safe_e), 0) + np.where(c > 0, c * np.log1p(e / safe_c), 0)) / l2
    return np.maximum(risk - inf, 0).astype(np.float64)


@dataclass(frozen=True)
class AbstentionPair:
    """Abstention loss against the comp-sum surrogate ``L_mu``."""

    mu: float
    c: float
    n: int

    def sample(self, rng, trials):
        p = random_simplex(rng, trials, self.n)
        s = rng.uniform(-5, 5, size=(trials, self.n + 1))
        w = augment(p, self.c)
        oracle = minimize_weighted_comp_sum(w, self.mu)
        risk = weighted_comp_sum(s, w, self.mu, grad=False)
        sur = risk - np.minimum(risk, oracle.value)
        target = abstention_calibration_gap(predict_label(s), (p, self.c))
        return sur, target


@dataclass(frozen=True)
class SelfPair:
    """The surrogate gap measured against itself (identity calibration)."""

    mu: float
    c: float
    n: int

    def sample(self, rng, trials):
        sur, _ = AbstentionPair(self.mu, self.c, self.n).sample(rng, trials)
        return sur, sur.copy()


@dataclass(frozen=True)
class BinaryMarginPair:
    """Binary margin loss ``Phi`` against the binary zero-one loss.

    At conditional probability ``eta`` of the positive class and score
    ``t``, the target gap is ``|2 eta - 1|`` when ``t`` has the wrong sign
    (``t = 0`` counts as wrong unless ``eta = 1/2``) and 0 otherwise.
    Half of the draws use ``t = 0``, the worst case for every ``eta``.
    """

    phi: Margin = EXPONENTIAL

    def sample(self, rng, trials):
        phi = margin(self.phi)
        half = trials // 2
        eta = np.concatenate(
            [
                0.5 + 0.5 * np.geomspace(1e-10, 1.0, half) * rng.choice([-1, 1], size=half),
                rng.uniform(0, 1, size=trials - half),
            ]
        )
        t = np.concatenate([np.zeros(half), rng.normal(scale=3.0, size=trials - half)])
        sur = _second_stage_gap_ld(eta, 1.0 - eta, t, phi)
        wrong = np.where(eta >= 0.5, t <= 0, t >= 0)
        target = np.where(wrong, np.abs(2.0 * eta - 1.0), 0.0)
        return sur, target


@dataclass
class CalibrationCurve:
    """Max observed target gap per bin of surrogate gap.

    ``edges`` has one more entry than ``max_target``; empty bins hold None.
    """

    edges: list
    max_target: list
    trials: int

    def points(self):
        return [
            (self.edges[i], self.edges[i + 1], m) for i, m in enumerate(self.max_target) if m is not None
        ]

    def dominated_by(self, gamma, tol: float = 1e-9) -> bool:
        """True if ``gamma`` at each bin's right edge covers the bin maximum."""
        return all(m <= gamma(hi) + tol for _, hi, m in self.points())

    def envelope(self) -> GammaTransform:
        """Concave non-decreasing transform covering every observed point.

        Bin maxima are accumulated from the left and attached to each bin's
        left edge, so any sample with surrogate gap ``<= t`` is covered at
        ``t``. The concave majorant of those knots through the origin is
        flat after the last knot. Samples in the first bin are attached to
        its right edge to keep the transform zero at zero.
        """
        xs, ys, run = [0.0], [0.0], 0.0
        for i, m in enumerate(self.max_target):
            if m is None:
                continue
            run = max(run, m)
            x = self.edges[i] if i > 0 else self.edges[1]
            if x > xs[-1]:
                xs.append(float(x))
                ys.append(run)
            else:
                ys[-1] = max(ys[-1], run)
        if len(xs) == 1:
            xs.append(1.0)
            ys.append(0.0)
        hx, hy = _concave_majorant(np.array(xs), np.array(ys))
        return GammaTransform.envelope(hx, hy)


def _concave_majorant(xs, ys):
    """Upper concave hull through the origin, made non-decreasing."""
    ys = np.maximum.accumulate(ys)
    hull = []
    for x, y in zip(xs, ys):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (y2 - y1) * (x - x1) <= (y - y1) * (x2 - x1):
                hull.pop()
            else:
                break
        hull.append((x, y))
    hx = [h[0] for h in hull]
    hy = [h[1] for h in hull]
    return hx, hy


def estimate_calibration_function(
    pair, trials: int = 20000, bins: int = 200, seed: int = 0, lo: float = 1e-20, hi: float | None = None
) -> CalibrationCurve:
    """Empirical calibration curve of ``pair`` from random draws.

    Bins are geometric from ``lo`` to the largest observed surrogate gap,
    preceded by a bin ``[0, lo)``.
    """
    if trials < 1:
        raise ValueError("estimate_calibration_function needs at least one trial")
    rng = np.random.default_rng(seed)
    sur, target = pair.sample(rng, trials)
    top = hi if hi is not None else max(float(sur.max()) * (1 + 1e-9), lo * 10)
    edges = np.concatenate([[0.0], np.geomspace(lo, top, bins)])
    which = np.clip(np.searchsorted(edges, sur, side="right") - 1, 0, bins - 1)
    maxima = np.full(bins, -np.inf)
    np.maximum.at(maxima, which, target)
    return CalibrationCurve(
        edges=edges.tolist(),
        max_target=[None if not np.isfinite(m) else float(m) for m in maxima],
        trials=trials,
    )


# --------------------------------------------------------------------------
# Two-stage bound
# --------------------------------------------------------------------------


def default_gamma2(phi, trials: int = 40000, seed: int = 0) -> GammaTransform:
    """Second-stage transform for ``phi``.

    The logistic margin uses ``sqrt(2 t)`` after confirming that the
    empirical curve stays under it; the exponential margin uses the
    empirical envelope itself.
    """
    phi = margin(phi)
    curve = estimate_calibration_function(BinaryMarginPair(phi), trials=trials, bins=400, seed=seed)
    if phi.kind == "logistic":
        gamma = GammaTransform.sqrt(2.0)
        if not curve.dominated_by(gamma):
            raise RuntimeError("sqrt(2t) does not dominate the logistic calibration curve")
        return gamma
    return curve.envelope()


def default_gamma1(n: int, trials: int = 20000, seed: int = 0) -> GammaTransform:
    """``sqrt(2 t)`` for the n-class logistic loss, cross-checked empirically."""
    gamma = GammaTransform.sqrt(2.0)
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, trials, n)
    s = rng.uniform(-5, 5, size=(trials, n))
    d01 = _zero_one_gap(p, s)
    kl = weighted_comp_sum(s, p, 1.0, grad=False) - analytic_weighted_minimum(p, 1.0)[0]
    if np.any(d01 > gamma(np.maximum(kl, 0.0)) + VIOLATION_TOL):
        raise RuntimeError("sqrt(2t) does not dominate the logistic zero-one curve")
    return gamma


def check_theorem_4_1(
    c: float,
    phi=EXPONENTIAL,
    n: int = 3,
    trials: int = 1000,
    atoms: int = 5,
    seed: int = 0,
    gamma1: GammaTransform | None = None,
    gamma2: GammaTransform | None = None,
    gamma2_scale: float = 1.0,
    problem: DiscreteProblem | None = None,
    tol: float = VIOLATION_TOL,
) -> BoundCheckReport:
    """Check the two-stage bound on random predictor/rejector assignments.

    Each trial draws a fresh ``atoms``-atom problem (unless ``problem`` is
    given) and assigns predictor scores and a rejector score to every atom.
    Assignments range from uniform noise to small perturbations of the
    stage-wise optima so that near-tight configurations are exercised.
    The right side is ``G1(D1) + (1 + c) G2(D2 / c)``, or ``G1(D1) + G2(D2)``
    when ``G2`` is linear, where ``D1``, ``D2`` are the stage-wise expected
    calibration gaps (equal to estimation error plus minimizability gap for
    complete families).
    """
    c = check_cost(c)
    phi = margin(phi)
    if problem is not None:
        n = problem.n
    gamma1 = gamma1 or default_gamma1(n)
    gamma2 = (gamma2 or default_gamma2(phi)).scaled(gamma2_scale)
    rng = np.random.default_rng(seed)

    if problem is None:
        W = random_simplex(rng, trials, atoms)
        P = random_simplex(rng, (trials, atoms), n)
    else:
        W = np.tile(problem.weights, (trials, 1))
        P = np.tile(problem.probs, (trials, 1, 1))
        atoms = problem.size
    flatP = P.reshape(-1, n)
    T = flatP.shape[0]

    oracle = minimize_weighted_comp_sum(flatP, 1.0, seed=seed)
    level = 10.0 ** rng.uniform(-6, 0.5, size=(T, 1))
    random_mix = rng.uniform(size=(T, 1)) < 0.3
    hY = np.where(
        random_mix,
        rng.uniform(-5, 5, size=(T, n)),
        oracle.scores + rng.normal(size=(T, n)) * level,
    )
    M = hY.max(axis=1)
    top = np.argmax(hY, axis=1)
    e = 1.0 - flatP[np.arange(T), top]
    with np.errstate(divide="ignore"):
        if phi.kind == "exponential":
            u_star = 0.5 * np.log(np.maximum(e, 1e-300) / c)
        else:
            u_star = np.log(np.maximum(e, 1e-300) / c)
    u_star = np.clip(u_star, -40.0, 40.0)
    r_level = 10.0 ** rng.uniform(-6, 0.5, size=T)
    regime = rng.uniform(size=T)
    r = np.select(
        [regime < 0.3, regime < 0.65],
        [M + rng.uniform(-5, 5, size=T), M + rng.normal(size=T) * r_level],
        M + u_star + rng.normal(size=T) * r_level,
    )

    risk1 = weighted_comp_sum(hY, flatP, 1.0, grad=False)
    d1 = risk1 - np.minimum(oracle.value, risk1) + oracle.residual
    d2 = _second_stage_gap_ld(e, c, r - M, phi)
    decision = predict_label(np.concatenate([hY, r[:, None]], axis=1))
    d_abs = abstention_calibration_gap(decision, (flatP, c))

    D1 = np.sum(W * d1.reshape(trials, atoms), axis=1)
    D2 = np.sum(W * d2.reshape(trials, atoms), axis=1)
    LHS = np.sum(W * d_abs.reshape(trials, atoms), axis=1)
    if gamma2.is_linear:
        RHS = gamma1(D1) + gamma2(D2)
    else:
        RHS = gamma1(D1) + (1.0 + c) * gamma2(D2 / c)

    report = BoundCheckReport(
        params={"theorem": "4.1", "c": c, "phi": phi.short, "n": n, "atoms": atoms, "gamma2_scale": gamma2_scale}
    )
    conv = oracle.converged.reshape(trials, atoms).all(axis=1)
    report.record(
        LHS,
        RHS,
        tol,
        inputs=lambda i: {"weights": W[i], "probs": P[i], "scores": hY.reshape(trials, atoms, n)[i], "rejector": r.reshape(trials, atoms)[i]},
        converged=conv,
    )
    return report


# --------------------------------------------------------------------------
# Approximation error versus minimizability gap
# --------------------------------------------------------------------------


@dataclass
class ApproxGapRecord:
    lam: float
    eta: float
    bounded_inf: float
    unbounded_inf: float
    difference: float


def approx_vs_gap_demo(lam: float, eta: float) -> ApproxGapRecord:
    """Binary exponential loss with scores bounded by ``lam``.

    Compares ``inf_{|h| <= lam} eta e^{-h} + (1 - eta) e^{h}`` with the
    unrestricted infimum ``2 sqrt(eta (1 - eta))``.
    """
    lam = float(lam)
    eta = float(eta)
    if not (lam >= 0 and math.isfinite(lam)):
        raise ValueError("lambda must be a finite non-negative number")
    if not (0.0 <= eta <= 1.0):
        raise ValueError("eta must lie in [0, 1]")
    hi, lo = max(eta, 1.0 - eta), min(eta, 1.0 - eta)
    unbounded = 2.0 * math.sqrt(eta * (1.0 - eta))
    threshold = math.inf if lo == 0.0 else 0.5 * abs(math.log(eta / (1.0 - eta)))
    if lam < threshold:
        bounded = hi * math.exp(-lam) + lo * math.exp(lam)
    else:
        bounded = unbounded
    return ApproxGapRecord(lam, eta, bounded, unbounded, bounded - unbounded)
