"""Score-based abstention losses and their surrogates.

Scores are arrays whose last axis holds ``n + 1`` entries: one per label
``0 .. n-1`` followed by the rejection score at index ``n``. Every function
accepts a single score vector or a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp, softmax as _softmax

MU_SNAP = 1e-12


def check_cost(c: float) -> float:
    """Validate an abstention cost, which must lie in the open interval (0, 1)."""
    c = float(c)
    if not (0.0 < c < 1.0):
        raise ValueError(f"abstention cost must be in (0, 1), got {c}")
    return c


def canonical_mu(mu: float) -> float:
    """Validate ``mu >= 0`` and snap values within 1e-12 of 1 or 2 onto them."""
    mu = float(mu)
    if not np.isfinite(mu) or mu < 0:
        raise ValueError(f"mu must be a finite non-negative real, got {mu}")
    for special in (1.0, 2.0):
        if abs(mu - special) <= MU_SNAP:
            return special
    return mu


def as_scores(scores, min_classes: int = 3) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] < min_classes:
        raise ValueError(
            f"score vectors need at least {min_classes} entries, got shape {s.shape}"
        )
    if not np.all(np.isfinite(s)):
        raise ValueError("score vectors must be finite")
    return s


def _labels(y, batch_shape, upper: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= upper):
        raise ValueError(f"label index out of range [0, {upper})")
    return np.broadcast_to(y, batch_shape)


@dataclass(frozen=True)
class Margin:
    """Decreasing margin function used by the second stage.

    ``exponential`` is exp(-t); ``logistic`` is log2(1 + exp(-t)). Both satisfy
    Phi(t) >= 1 for t <= 0 and vanish as t grows.
    """

    kind: str = "exponential"

    def __post_init__(self):
        if self.kind not in ("exponential", "logistic"):
            raise ValueError(f"unknown margin function {self.kind!r}")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "exponential":
            return np.exp(-t)
        return np.logaddexp(0.0, -t) / np.log(2.0)

    def derivative(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "exponential":
            return -np.exp(-t)
        return -expit(-t) / np.log(2.0)

    @property
    def short(self) -> str:
        return "exp" if self.kind == "exponential" else "logistic"


EXPONENTIAL = Margin("exponential")
LOGISTIC = Margin("logistic")


def margin(name: str | Margin) -> Margin:
    if isinstance(name, Margin):
        return name
    aliases = {"exp": EXPONENTIAL, "exponential": EXPONENTIAL, "logistic": LOGISTIC, "log": LOGISTIC}
    try:
        return aliases[name]
    except KeyError:
        raise ValueError(f"unknown margin function {name!r}") from None


def softmax(scores) -> np.ndarray:
    return _softmax(as_scores(scores, min_classes=1), axis=-1)


def predict_label(scores) -> np.ndarray | int:
    """Decision of the score-based rule.

    Returns ``n`` (abstain) when the rejection score is at least every label
    score, otherwise the smallest index attaining the top label score.
    """
    s = as_scores(scores)
    n = s.shape[-1] - 1
    top = np.argmax(s[..., :n], axis=-1)
    reject = s[..., n] >= np.max(s[..., :n], axis=-1)
    out = np.where(reject, n, top)
    return int(out) if out.ndim == 0 else out


def abstention_loss(scores, y, c: float):
    """Zero for a correct prediction, ``c`` for abstaining, one otherwise."""
    c = check_cost(c)
    s = as_scores(scores)
    n = s.shape[-1] - 1
    y = _labels(y, s.shape[:-1], n)
    h = predict_label(s)
    out = np.where(h == n, c, np.where(h == y, 0.0, 1.0))
    return float(out) if out.ndim == 0 else out


def _comp_sum_from_z(z, mu):
    if mu == 1.0:
        return z
    return np.expm1((1.0 - mu) * z) / (1.0 - mu)


def comp_sum_loss(scores, y, mu: float):
    """Cross-entropy family loss over all entries of the score vector.

    ``mu = 0`` is sum-exponential, ``mu = 1`` logistic, ``mu = 2`` mean
    absolute error. ``y`` may index any entry, including the last.
    """
    mu = canonical_mu(mu)
    s = as_scores(scores, min_classes=2)
    y = _labels(y, s.shape[:-1], s.shape[-1])
    sy = np.take_along_axis(s, y[..., None], axis=-1)[..., 0]
    z = np.maximum(logsumexp(s, axis=-1) - sy, 0.0)
    with np.errstate(over="ignore"):
        out = _comp_sum_from_z(z, mu)
    return float(out) if out.ndim == 0 else out


def comp_sum_grad(scores, y, mu: float) -> np.ndarray:
    """Gradient of :func:`comp_sum_loss` with respect to the scores.

    Equals ``softmax(s)[y] ** (mu - 1) * (softmax(s) - onehot(y))``.
    """
    mu = canonical_mu(mu)
    s = as_scores(scores, min_classes=2)
    y = _labels(y, s.shape[:-1], s.shape[-1])
    lse = logsumexp(s, axis=-1, keepdims=True)
    sig = np.exp(s - lse)
    z = np.maximum(lse[..., 0] - np.take_along_axis(s, y[..., None], axis=-1)[..., 0], 0.0)
    with np.errstate(over="ignore"):
        scale = np.exp((1.0 - mu) * z)
    g = sig.copy()
    np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
    return scale[..., None] * g


def surrogate_loss(scores, y, c: float, mu: float):
    """``l_mu(s, y) + (1 - c) * l_mu(s, n)`` for a true label ``y < n``."""
    c = check_cost(c)
    s = as_scores(scores)
    n = s.shape[-1] - 1
    y = _labels(y, s.shape[:-1], n)
    return comp_sum_loss(s, y, mu) + (1.0 - c) * comp_sum_loss(s, np.full_like(y, n), mu)


def surrogate_grad(scores, y, c: float, mu: float) -> np.ndarray:
    c = check_cost(c)
    s = as_scores(scores)
    n = s.shape[-1] - 1
    y = _labels(y, s.shape[:-1], n)
    return comp_sum_grad(s, y, mu) + (1.0 - c) * comp_sum_grad(s, np.full_like(y, n), mu)


def generic_surrogate(base: Callable, scores, y, c: float):
    """Abstention surrogate built from any multi-class loss over ``n + 1`` categories."""
    c = check_cost(c)
    s = as_scores(scores)
    n = s.shape[-1] - 1
    y = _labels(y, s.shape[:-1], n)
    return base(s, y) + (1.0 - c) * base(s, np.full_like(y, n))


def weighted_comp_sum(scores, weights, mu: float, grad: bool = True):
    """Row-wise ``sum_y w[y] * l_mu(s, y)`` and its score gradient.

    With ``weights = (p_1, .., p_n, 1 - c)`` this is the conditional risk of
    the abstention surrogate. Zero-weight entries contribute nothing even
    when their loss overflows.
    """
    mu = canonical_mu(mu)
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), s.shape)
    lse = logsumexp(s, axis=-1, keepdims=True)
    pos = w > 0
    z = np.where(pos, np.maximum(lse - s, 0.0), 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        value = np.sum(np.where(pos, w * _comp_sum_from_z(z, mu), 0.0), axis=-1)
        if not grad:
            return value
        wa = np.where(pos, w * np.exp((1.0 - mu) * z), 0.0)
    sig = np.exp(s - lse)
    g = wa.sum(axis=-1, keepdims=True) * sig - wa
    return value, g


def _split_two_stage(predictor_scores, rejector_score, y):
    p = as_scores(predictor_scores, min_classes=2)
    n = p.shape[-1]
    r = np.asarray(rejector_score, dtype=np.float64)
    if r.shape != p.shape[:-1]:
        raise ValueError(f"rejector shape {r.shape} does not match predictor batch {p.shape[:-1]}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rejector scores must be finite")
    y = _labels(y, p.shape[:-1], n)
    top = np.max(p, axis=-1)
    wrong = (np.argmax(p, axis=-1) != y).astype(np.float64)
    return top, r, wrong


def two_stage_loss(predictor_scores, rejector_score, y, c: float, phi: Margin = EXPONENTIAL):
    """Second-stage loss for a rejector on top of a frozen predictor.

    ``wrong * Phi(r - M) + c * Phi(M - r)`` where ``M`` is the top predictor
    score and ``wrong`` flags a misclassified ``y``.
    """
    c = check_cost(c)
    phi = margin(phi)
    top, r, wrong = _split_two_stage(predictor_scores, rejector_score, y)
    out = wrong * phi(r - top) + c * phi(top - r)
    return float(out) if np.ndim(out) == 0 else out


def two_stage_grad(predictor_scores, rejector_score, y, c: float, phi: Margin = EXPONENTIAL):
    """Derivative of :func:`two_stage_loss` with respect to the rejector score."""
    c = check_cost(c)
    phi = margin(phi)
    top, r, wrong = _split_two_stage(predictor_scores, rejector_score, y)
    out = wrong * phi.derivative(r - top) - c * phi.derivative(top - r)
    return float(out) if np.ndim(out) == 0 else out
