"""Linear and one-hidden-layer scorers with single- and two-stage trainers.

A single-stage model has ``n + 1`` outputs (labels then rejection). A
two-stage pair is a predictor with ``n`` outputs and a rejector with one
output; the composite rule abstains iff the rejector score is at least the
top predictor score.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import (
    canonical_mu,
    check_cost,
    margin,
    predict_label,
    weighted_comp_sum,
)

KINDS = ("linear", "mlp")
LOSSES = ("comp_sum", "ce", "two_stage")
SCHEDULES = ("constant", "cosine")


class TrainingError(RuntimeError):
    """Raised when a loss or gradient stops being finite during training."""


@dataclass
class Model:
    """Parametric scorer.

    ``params`` holds ``W`` of shape ``(out, d + 1)`` (last column is the
    bias) for the linear kind, and ``W1 (width, d)``, ``b1``, ``W2 (out,
    width)``, ``b2`` for the MLP. ``clamp``, when set, clips every output to
    ``[-clamp, clamp]``.
    """

    kind: str
    in_dim: int
    out_dim: int
    params: dict
    clamp: float | None = None
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp must be positive")
        for k, v in self.params.items():
            v = np.asarray(v, dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} has non-finite entries")
            self.params[k] = v

    @property
    def width(self) -> int | None:
        return self.params["W1"].shape[0] if self.kind == "mlp" else None

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.in_dim:
            raise ValueError(f"model expects {self.in_dim} features, got {X.shape[1]}")
        return X, single

    def forward(self, X, _cache: bool = False):
        X, single = self._check_input(X)
        if self.kind == "linear":
            W = self.params["W"]
            raw = X @ W[:, :-1].T + W[:, -1]
            cache = (X, None, raw)
        else:
            pre = X @ self.params["W1"].T + self.params["b1"]
            hidden = np.maximum(pre, 0.0)
            raw = hidden @ self.params["W2"].T + self.params["b2"]
            cache = (X, (pre, hidden), raw)
        out = raw if self.clamp is None else np.clip(raw, -self.clamp, self.clamp)
        if _cache:
            return out, cache
        return out[0] if single else out

    __call__ = forward

    def backward(self, cache, grad_out) -> dict:
        """Parameter gradients given the gradient of the loss w.r.t. the outputs."""
        X, hid, raw = cache
        if self.clamp is not None:
            grad_out = np.where(np.abs(raw) <= self.clamp, grad_out, 0.0)
        if self.kind == "linear":
            gW = np.empty_like(self.params["W"])
            gW[:, :-1] = grad_out.T @ X
            gW[:, -1] = grad_out.sum(axis=0)
            return {"W": gW}
        pre, hidden = hid
        g2 = grad_out.T @ hidden
        gb2 = grad_out.sum(axis=0)
        gh = (grad_out @ self.params["W2"]) * (pre > 0)
        return {"W1": gh.T @ X, "b1": gh.sum(axis=0), "W2": g2, "b2": gb2}

    def copy(self) -> "Model":
        return Model(
            self.kind,
            self.in_dim,
            self.out_dim,
            {k: v.copy() for k, v in self.params.items()},
            self.clamp,
            copy.deepcopy(self.meta),
        )

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def scaled(self, alpha: float) -> "Model":
        """Multiply every output by ``alpha > 0`` (exact for unclamped linear models)."""
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        m = self.copy()
        if self.kind == "linear":
            m.params["W"] *= alpha
        else:
            m.params["W2"] *= alpha
            m.params["b2"] *= alpha
        return m


def init_model(kind: str, in_dim: int, out_dim: int, width: int = 64, seed: int = 0, clamp=None) -> Model:
    """Zero linear weights; MLP layers uniform in ``±1/sqrt(fan_in)`` with zero biases."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError("dimensions must be positive")
    if kind == "linear":
        return Model(kind, in_dim, out_dim, {"W": np.zeros((out_dim, in_dim + 1))}, clamp)
    if kind != "mlp":
        raise ValueError(f"unknown model kind {kind!r}")
    if width < 1:
        raise ValueError("width must be positive")
    rng = np.random.default_rng(seed)
    a1, a2 = 1.0 / math.sqrt(in_dim), 1.0 / math.sqrt(width)
    params = {
        "W1": rng.uniform(-a1, a1, size=(width, in_dim)),
        "b1": np.zeros(width),
        "W2": rng.uniform(-a2, a2, size=(out_dim, width)),
        "b2": np.zeros(out_dim),
    }
    return Model(kind, in_dim, out_dim, params, clamp)


def forward(model: Model, X):
    return model.forward(X)


@dataclass
class TrainConfig:
    """Trainer settings.

    ``loss`` is ``comp_sum`` (the abstention surrogate over ``n + 1``
    outputs), ``ce`` (the comp-sum loss over ``n`` outputs, used for the
    first stage) or ``two_stage`` (the rejector loss with margin ``phi``).
    """

    loss: str = "comp_sum"
    mu: float = 1.0
    cost: float = 0.5
    phi: str = "exp"
    kind: str = "linear"
    width: int = 64
    lr: float = 0.1
    schedule: str = "constant"
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    l2: float = 0.0
    clamp: float | None = None
    momentum: float = 0.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError("epochs must be an integer >= 1")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch_size must be an integer >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError("learning rate must be positive")
        if self.l2 < 0:
            raise ValueError("l2 coefficient must be non-negative")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp must be positive")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must lie in [0, 1)")
        if self.width < 1:
            raise ValueError("width must be positive")
        self.mu = canonical_mu(self.mu)
        self.cost = check_cost(self.cost)
        margin(self.phi)
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Data adapters
# --------------------------------------------------------------------------


@dataclass
class Population:
    """Exact distribution on finitely many feature vectors.

    Training on a population minimizes the expected loss with soft targets,
    which is the population risk of the discrete problem.
    """

    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_problem(cls, problem):
        if problem.features is None:
            raise ValueError("the problem carries no feature vectors")
        return cls(problem.features, problem.probs, problem.weights)

    @property
    def n(self) -> int:
        return self.targets.shape[1]


def _as_training_arrays(data, n: int | None = None):
    """Return ``(X, P, w, n)`` from a labeled dataset or a population."""
    if isinstance(data, Population):
        X = np.asarray(data.features, dtype=np.float64)
        P = np.asarray(data.targets, dtype=np.float64)
        w = np.asarray(data.weights, dtype=np.float64)
        return X, P, w / w.sum(), P.shape[1]
    X = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    n = n or data.n
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if np.any(y < 0) or np.any(y >= n):
        raise ValueError("labels out of range")
    P = np.zeros((y.size, n))
    P[np.arange(y.size), y] = 1.0
    return X, P, np.full(y.size, 1.0 / y.size), n


# --------------------------------------------------------------------------
# Objectives
# --------------------------------------------------------------------------


def _output_loss(cfg: TrainConfig, scores, P, aux=None):
    """Per-example loss values and their gradients with respect to the outputs."""
    if cfg.loss == "comp_sum":
        W = np.concatenate([P, np.full((P.shape[0], 1), 1.0 - cfg.cost)], axis=1)
        return weighted_comp_sum(scores, W, cfg.mu)
    if cfg.loss == "ce":
        return weighted_comp_sum(scores, P, cfg.mu)
    phi = margin(cfg.phi)
    top, wrong = aux
    r = scores[:, 0]
    val = wrong * phi(r - top) + cfg.cost * phi(top - r)
    g = wrong * phi.derivative(r - top) - cfg.cost * phi.derivative(top - r)
    return val, g[:, None]


def objective(model: Model, cfg: TrainConfig, X, P, w, aux=None, grad: bool = False):
    """Weighted mean loss (plus the L2 penalty) and optionally its gradients."""
    scores, cache = model.forward(X, _cache=True)
    val, g = _output_loss(cfg, scores, P, aux)
    total = w.sum()
    loss = float(w @ val) / total
    if cfg.l2:
        loss += 0.5 * cfg.l2 * sum(float(np.sum(v * v)) for v in model.params.values())
    if not grad:
        return loss
    grads = model.backward(cache, g * (w / total)[:, None])
    if cfg.l2:
        for k in grads:
            grads[k] = grads[k] + cfg.l2 * model.params[k]
    return loss, grads


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def _fit(model: Model, cfg: TrainConfig, X, P, w, aux=None) -> Model:
    """Minibatch SGD with the halve-and-restore rule on epoch-loss regressions."""
    rng = np.random.default_rng(cfg.seed)
    m = X.shape[0]
    best = objective(model, cfg, X, P, w, aux)
    if not math.isfinite(best):
        raise TrainingError(f"initial loss is not finite ({best})")
    best_params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    scale = 1.0
    history = [best]
    bs = min(cfg.batch_size, m)
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch) * scale
        order = rng.permutation(m) if bs < m else np.arange(m)
        for start in range(0, m, bs):
            idx = order[start : start + bs]
            sub_aux = None if aux is None else tuple(a[idx] for a in aux)
            loss, grads = objective(model, cfg, X[idx], P[idx], w[idx], sub_aux, grad=True)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite loss or gradient at epoch {epoch + 1}, batch starting at {start} "
                    f"(loss={loss}, lr={lr:.3g})"
                )
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - lr * g
                model.params[k] = model.params[k] + velocity[k]
        current = objective(model, cfg, X, P, w, aux)
        if not math.isfinite(current):
            raise TrainingError(f"epoch {epoch + 1} produced a non-finite loss (lr={lr:.3g})")
        if current > best + 0.05 * abs(best):
            scale *= 0.5
            model.params = {k: v.copy() for k, v in best_params.items()}
            velocity = {k: np.zeros_like(v) for k, v in velocity.items()}
            current = best
        elif current < best:
            best = current
            best_params = {k: v.copy() for k, v in model.params.items()}
        history.append(current)
    model.params = best_params
    model.history = history
    return model


def _provenance(cfg: TrainConfig, n: int, stage: str) -> dict:
    meta = {"loss": cfg.loss, "cost": cfg.cost, "seed": cfg.seed, "n": n, "stage": stage, "epochs": cfg.epochs}
    if cfg.loss == "two_stage":
        meta["phi"] = margin(cfg.phi).short
    else:
        meta["mu"] = cfg.mu
    return meta


def train_single_stage(data, cfg: TrainConfig, n: int | None = None) -> Model:
    """Fit an ``n + 1``-output scorer to the abstention surrogate ``L_mu``."""
    if cfg.loss != "comp_sum":
        raise ValueError("single-stage training needs loss='comp_sum'")
    X, P, w, n = _as_training_arrays(data, n)
    model = init_model(cfg.kind, X.shape[1], n + 1, cfg.width, cfg.seed, cfg.clamp)
    model.meta = _provenance(cfg, n, "single")
    return _fit(model, cfg, X, P, w)


def stage_two_inputs(predictor: Model, X, P):
    """Top predictor score and probability mass of a wrong prediction per example."""
    hY = predictor.forward(np.atleast_2d(X))
    top = np.argmax(hY, axis=1)
    return hY.max(axis=1), 1.0 - P[np.arange(P.shape[0]), top]


def train_two_stage(data, cfg_stage1: TrainConfig, cfg_stage2: TrainConfig, n: int | None = None):
    """First fit an ``n``-output predictor, then a one-output rejector against it.

    The predictor is frozen while the rejector trains; its parameters are
    never touched by the second stage.
    """
    if cfg_stage1.loss != "ce":
        raise ValueError("the first stage needs loss='ce'")
    if cfg_stage2.loss != "two_stage":
        raise ValueError("the second stage needs loss='two_stage'")
    X, P, w, n = _as_training_arrays(data, n)
    predictor = init_model(cfg_stage1.kind, X.shape[1], n, cfg_stage1.width, cfg_stage1.seed, cfg_stage1.clamp)
    predictor.meta = _provenance(cfg_stage1, n, "predictor")
    predictor = _fit(predictor, cfg_stage1, X, P, w)
    frozen = predictor.param_hash()
    aux = stage_two_inputs(predictor, X, P)
    rejector = init_model(cfg_stage2.kind, X.shape[1], 1, cfg_stage2.width, cfg_stage2.seed, cfg_stage2.clamp)
    rejector.meta = _provenance(cfg_stage2, n, "rejector")
    rejector = _fit(rejector, cfg_stage2, X, P, w, aux)
    assert predictor.param_hash() == frozen
    return predictor, rejector


# --------------------------------------------------------------------------
# Decisions and metrics
# --------------------------------------------------------------------------


def composite_scores(models, X) -> np.ndarray:
    """Scores over ``n + 1`` categories for a model or a (predictor, rejector) pair."""
    if isinstance(models, Model):
        return np.atleast_2d(models.forward(X))
    predictor, rejector = models
    hY = np.atleast_2d(predictor.forward(X))
    r = np.atleast_2d(rejector.forward(X))
    return np.concatenate([hY, r[:, :1]], axis=1)


def decide(models, X) -> np.ndarray:
    """Decision per row: a label index, or ``n`` to abstain."""
    return np.atleast_1d(predict_label(composite_scores(models, X)))


@dataclass
class Metrics:
    abstention_loss: float
    rejection_rate: float
    accepted_accuracy: float | None
    surrogate_loss: float | None
    m: int
    cost: float


def evaluate(models, data, cost: float, mu: float | None = None, phi=None) -> Metrics:
    """Abstention loss, rejection rate, accepted accuracy and mean surrogate loss.

    The surrogate is ``L_mu`` for a single model (``mu`` defaults to the
    training value) and the second-stage loss for a pair (``phi`` defaults
    to the rejector's training margin). Accuracy on accepted points is None
    when everything is rejected.
    """
    cost = check_cost(cost)
    X = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    s = composite_scores(models, X)
    n = s.shape[1] - 1
    if np.any(y < 0) or np.any(y >= n):
        raise ValueError("labels out of range for the model")
    h = np.atleast_1d(predict_label(s))
    rejected = h == n
    losses = np.where(rejected, cost, np.where(h == y, 0.0, 1.0))
    acc = None if rejected.all() else float(np.mean(h[~rejected] == y[~rejected]))
    P = np.zeros((y.size, n))
    P[np.arange(y.size), y] = 1.0
    if isinstance(models, Model):
        mu = models.meta.get("mu", 1.0) if mu is None else mu
        cfg = TrainConfig(loss="comp_sum", mu=mu, cost=cost)
        sur = float(np.mean(_output_loss(cfg, s, P)[0]))
    else:
        phi = phi or models[1].meta.get("phi", "exp")
        cfg = TrainConfig(loss="two_stage", phi=phi, cost=cost)
        aux = stage_two_inputs(models[0], X, P)
        sur = float(np.mean(_output_loss(cfg, s[:, -1:], P, aux)[0]))
    return Metrics(
        abstention_loss=float(losses.mean()),
        rejection_rate=float(rejected.mean()),
        accepted_accuracy=acc,
        surrogate_loss=sur,
        m=int(y.size),
        cost=cost,
    )


def population_metrics(models, problem) -> dict:
    """Exact expected abstention loss and Chow agreement on a discrete problem."""
    from .consistency import abstention_calibration_gap, chow_decision, conditional_risk_abstention

    h = decide(models, problem.features)
    risk = conditional_risk_abstention(h, (problem.probs, problem.c))
    gap = abstention_calibration_gap(h, (problem.probs, problem.c))
    agree = h == chow_decision((problem.probs, problem.c))
    return {
        "abstention_loss": float(problem.weights @ risk),
        "excess": float(problem.weights @ gap),
        "chow_agreement_mass": float(problem.weights @ agree),
    }


@dataclass
class PopulationFamily:
    """Model family whose best-in-class surrogate risk is found by training.

    ``best_in_class`` trains ``runs`` models with distinct seeds on the exact
    population of a problem (full batch) and keeps the lowest risk.
    """

    cfg: TrainConfig
    runs: int = 5
    name: str = "model"
    seeds: list = field(default_factory=list)

    def train(self, problem, mu: float | None = None, seed: int = 0) -> Model:
        cfg = copy.copy(self.cfg)
        cfg.seed = seed
        cfg.cost = problem.c
        if mu is not None:
            cfg.mu = canonical_mu(mu)
        cfg.batch_size = problem.size
        return train_single_stage(Population.from_problem(problem), cfg)

    def best_in_class(self, problem, mu: float) -> float:
        cfg = copy.copy(self.cfg)
        cfg.cost, cfg.mu = problem.c, canonical_mu(mu)
        best = math.inf
        self.seeds = []
        for k in range(self.runs):
            seed = self.cfg.seed + k
            model = self.train(problem, mu, seed)
            pop = Population.from_problem(problem)
            val = objective(model, cfg, pop.features, pop.targets, pop.weights)
            self.seeds.append(seed)
            best = min(best, val)
        return best
