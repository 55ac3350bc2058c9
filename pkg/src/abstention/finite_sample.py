"""Finite-sample abstention guarantee from Rademacher complexity and gaps.

The assembled bound on the excess abstention loss of an empirical
surrogate minimizer is

    gamma_mu(4 R + 2 B sqrt(log(2 / delta) / (2 m)) + M_sur) - M_abs

with ``R`` the Rademacher complexity of the surrogate loss class, ``B`` an
upper bound on the surrogate, and ``M_sur``, ``M_abs`` the minimizability
gaps of the surrogate and abstention losses for the hypothesis family.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .consistency import DiscreteProblem, augment, gamma_mu
from .losses import canonical_mu, check_cost, weighted_comp_sum
from .models import (
    Model,
    Population,
    TrainConfig,
    TrainingError,
    _as_training_arrays,
    _output_loss,
    init_model,
    objective,
    population_metrics,
    train_single_stage,
)


@dataclass
class RademacherEstimate:
    """Monte-Carlo estimate of the empirical Rademacher complexity.

    For parametric families the per-draw suprema come from gradient ascent
    and are lower bounds; ``residuals`` record how much each ascent was
    still improving over its final tenth of steps.
    """

    value: float
    sigma_draws: int
    suprema: list
    residuals: list = field(default_factory=list)

    @property
    def stderr(self) -> float:
        if self.sigma_draws < 2:
            return math.inf
        return float(np.std(self.suprema, ddof=1) / math.sqrt(self.sigma_draws))

    @property
    def inflated(self) -> float:
        """Estimate plus the mean optimizer residual."""
        return self.value + (float(np.mean(self.residuals)) if self.residuals else 0.0)


# --------------------------------------------------------------------------
# Families
# --------------------------------------------------------------------------


@dataclass
class FiniteLossClass:
    """Finite class given directly by its loss values on the sample.

    ``losses[h, i]`` is the loss of hypothesis ``h`` on example ``i``; the
    supremum is exact.
    """

    losses: np.ndarray

    def sup(self, sigma, sample=None, seed=0):
        L = np.atleast_2d(np.asarray(self.losses, dtype=np.float64))
        return float(np.max(L @ sigma) / L.shape[1]), 0.0


@dataclass
class FixedModelClass:
    """Singleton family made of one trained model."""

    model: Model
    cfg: TrainConfig

    def sup(self, sigma, sample, seed=0):
        X, P, _, _ = _as_training_arrays(sample, self.model.out_dim - 1)
        val, _ = _output_loss(self.cfg, self.model.forward(X), P)
        return float(np.mean(sigma * val)), 0.0


@dataclass
class ModelClass:
    """All parameter settings of a clamped model family.

    The supremum is approximated by gradient ascent from ``restarts``
    random initializations of ``steps`` full-batch steps each.
    """

    cfg: TrainConfig
    restarts: int = 3
    steps: int = 2000
    lr: float = 0.05

    def __post_init__(self):
        if self.cfg.clamp is None:
            raise ValueError("the Rademacher supremum needs a clamped family (set clamp)")

    def sup(self, sigma, sample, seed=0):
        X, P, _, n = _as_training_arrays(sample)
        m = X.shape[0]
        best, best_res = -math.inf, 0.0
        for k in range(self.restarts):
            rng = np.random.default_rng([seed, k])
            model = init_model(self.cfg.kind, X.shape[1], n + 1, self.cfg.width, int(rng.integers(2**31)), self.cfg.clamp)
            for name, v in model.params.items():
                model.params[name] = v + rng.normal(scale=1.0, size=v.shape)
            trace = []
            for _ in range(self.steps):
                scores, cache = model.forward(X, _cache=True)
                val, g = _output_loss(self.cfg, scores, P)
                f = float(np.mean(sigma * val))
                trace.append(f)
                grads = model.backward(cache, g * (sigma / m)[:, None])
                for name in model.params:
                    model.params[name] = model.params[name] + self.lr * grads[name]
            scores = model.forward(X)
            f = float(np.mean(sigma * _output_loss(self.cfg, scores, P)[0]))
            trace.append(f)
            if f > best:
                tail = trace[-max(2, self.steps // 10) :]
                best, best_res = f, max(0.0, tail[-1] - tail[0])
        return best, best_res


def empirical_rademacher(sample, family, sigma_draws: int = 50, seed: int = 0, negate: bool = False) -> RademacherEstimate:
    """Average over Rademacher draws of the family's correlation supremum.

    ``negate`` flips every draw, which leaves the distribution of the
    estimate unchanged (used as a symmetry check).
    """
    if sigma_draws < 1:
        raise ValueError("sigma_draws must be at least 1")
    m = sample.labels.size if hasattr(sample, "labels") else np.asarray(family.losses).shape[-1]
    rng = np.random.default_rng(seed)
    sups, res = [], []
    for k in range(sigma_draws):
        sigma = rng.choice([-1.0, 1.0], size=m)
        if negate:
            sigma = -sigma
        s, r = family.sup(sigma, sample, seed=seed * 100_003 + k)
        sups.append(s)
        res.append(r)
    return RademacherEstimate(float(np.mean(sups)), sigma_draws, sups, res)


# --------------------------------------------------------------------------
# Bound assembly
# --------------------------------------------------------------------------


def loss_upper_bound(mu: float, c: float, n: int, lam: float) -> float:
    """Upper bound on ``L_mu`` when every score lies in ``[-lam, lam]``."""
    mu = canonical_mu(mu)
    c = check_cost(c)
    if not lam > 0:
        raise ValueError("the clamp must be positive")
    if mu < 1.0:
        b = (((n + 1.0) * math.exp(2.0 * lam)) ** (1.0 - mu) - 1.0) / (1.0 - mu)
    elif mu == 1.0:
        b = 2.0 * lam + math.log(n + 1.0)
    else:
        b = 1.0 / (mu - 1.0)
    return (2.0 - c) * b


@dataclass
class FiniteSampleInput:
    m: int
    delta: float
    B: float
    R: float
    mu: float
    cost: float
    n: int
    M_surrogate: float = 0.0
    M_abstention: float = 0.0

    def __post_init__(self):
        if isinstance(self.R, RademacherEstimate):
            self.R = self.R.inflated
        for name in ("delta", "B", "R", "cost", "M_surrogate", "M_abstention"):
            if not math.isfinite(float(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.B < 0 or self.R < 0 or self.M_surrogate < 0 or self.M_abstention < 0:
            raise ValueError("B, R and the minimizability gaps must be non-negative")


def assemble_bound(inp: FiniteSampleInput) -> float:
    arg = 4.0 * inp.R + 2.0 * inp.B * math.sqrt(math.log(2.0 / inp.delta) / (2.0 * inp.m)) + inp.M_surrogate
    return gamma_mu(arg, inp.mu, inp.cost, inp.n) - inp.M_abstention


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def clamped_pointwise_minimum(weights, mu: float, lam: float) -> np.ndarray:
    """Best weighted comp-sum risk per row over scores in ``[-lam, lam]``."""
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    K = W.shape[1]
    out = np.empty(W.shape[0])
    for i, w in enumerate(W):

        def f(s, w=w):
            v, g = weighted_comp_sum(s[None, :], w, mu)
            return float(v[0]), g[0]

        best = math.inf
        starts = [np.zeros(K)] + [np.where(np.arange(K) == k, lam, -lam) for k in range(K)]
        for x0 in starts:
            r = minimize(f, x0, jac=True, method="L-BFGS-B", bounds=[(-lam, lam)] * K, options={"ftol": 1e-15, "gtol": 1e-12})
            best = min(best, float(r.fun))
        out[i] = best
    return out


@dataclass
class CoverageRecord:
    """Outcome of repeated sampling, training and bound evaluation."""

    trials: int
    m: int
    delta: float
    bound: float
    excesses: list
    coverage: float
    required: float
    passed: bool
    E_star_abs: float
    E_star_surrogate: float
    bayes_abs: float
    R: float
    R_stderr: float
    B: float
    M_surrogate: float
    M_abstention: float
    reference_seeds: list
    failed_trials: int = 0
    params: dict = field(default_factory=dict)


def coverage_requirement(delta: float, trials: int) -> float:
    return 1.0 - delta - 2.0 * math.sqrt(math.log(1.0 / 0.05) / (2.0 * trials))


def _train_trial(args):
    sampler, cfg, m, t, problem = args
    sample = sampler.sample(m, stream=1000 + t)
    try:
        model = train_single_stage(sample, cfg, n=problem.n)
    except TrainingError:
        return None
    return population_metrics(model, problem)["abstention_loss"]


def _reference_run(args):
    problem, cfg, seed = args
    c = copy.copy(cfg)
    c.seed = seed
    c.batch_size = problem.size
    model = train_single_stage(Population.from_problem(problem), c)
    pop = Population.from_problem(problem)
    sur = objective(model, c, pop.features, pop.targets, pop.weights)
    return population_metrics(model, problem)["abstention_loss"], sur


def validate_bound(
    problem: DiscreteProblem,
    sampler,
    cfg: TrainConfig,
    m: int,
    trials: int = 40,
    delta: float = 0.05,
    sigma_draws: int = 50,
    reference_runs: int = 20,
    reference_cfg: TrainConfig | None = None,
    rademacher_steps: int = 2000,
    workers: int = 1,
    seed: int = 0,
) -> CoverageRecord:
    """Empirical coverage of the assembled bound.

    Each trial draws ``m`` examples, trains the surrogate ERM with ``cfg``
    and measures its exact excess abstention loss on ``problem``. The
    best-in-class references are the best of ``reference_runs`` full-batch
    population runs (the trial ERMs also count toward the abstention
    reference). ``R`` is estimated once, on the first trial's sample.
    """
    if trials < 20:
        raise ValueError("validate_bound needs at least 20 trials")
    if cfg.clamp is None:
        raise ValueError("validate_bound needs a clamped family (set clamp)")
    if cfg.loss != "comp_sum":
        raise ValueError("validate_bound trains the single-stage surrogate")
    if not (0 < delta < 1):
        raise ValueError("delta must lie in (0, 1)")
    cfg = copy.copy(cfg)
    cfg.cost = problem.c
    ref_cfg = copy.copy(reference_cfg or cfg)
    ref_cfg.cost, ref_cfg.mu, ref_cfg.clamp = problem.c, cfg.mu, cfg.clamp
    n, c, mu, lam = problem.n, problem.c, cfg.mu, cfg.clamp

    ref_seeds = [seed + 10_000 + k for k in range(reference_runs)]
    jobs = [(sampler, cfg, m, t, problem) for t in range(trials)]
    ref_jobs = [(problem, ref_cfg, s) for s in ref_seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            trial_loss = list(ex.map(_train_trial, jobs))
            refs = list(ex.map(_reference_run, ref_jobs))
    else:
        trial_loss = [_train_trial(j) for j in jobs]
        refs = [_reference_run(j) for j in ref_jobs]

    ok_losses = [v for v in trial_loss if v is not None]
    E_abs = min([r[0] for r in refs] + ok_losses)
    E_sur = min(r[1] for r in refs)
    bayes = float(problem.weights @ (1.0 - augment(problem.probs, c).max(axis=1)))
    pointwise_sur = float(problem.weights @ clamped_pointwise_minimum(problem.augmented, mu, lam))
    M_sur = max(E_sur - pointwise_sur, 0.0)
    M_abs = max(E_abs - bayes, 0.0)

    family = ModelClass(cfg, steps=rademacher_steps)
    R = empirical_rademacher(sampler.sample(m, stream=1000), family, sigma_draws, seed=seed)
    B = loss_upper_bound(mu, c, n, lam)
    bound = assemble_bound(FiniteSampleInput(m, delta, B, R, mu, c, n, M_sur, M_abs))

    excesses = [None if v is None else v - E_abs for v in trial_loss]
    covered = [e is not None and e <= bound for e in excesses]
    coverage = float(np.mean(covered))
    required = coverage_requirement(delta, trials)
    return CoverageRecord(
        trials=trials,
        m=m,
        delta=delta,
        bound=bound,
        excesses=excesses,
        coverage=coverage,
        required=required,
        passed=coverage >= required,
        E_star_abs=E_abs,
        E_star_surrogate=E_sur,
        bayes_abs=bayes,
        R=R.inflated,
        R_stderr=R.stderr,
        B=B,
        M_surrogate=M_sur,
        M_abstention=M_abs,
        reference_seeds=ref_seeds,
        failed_trials=sum(v is None for v in trial_loss),
        params={"mu": mu, "c": c, "n": n, "clamp": lam, "kind": cfg.kind, "sigma_draws": sigma_draws},
    )
