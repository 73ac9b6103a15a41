"""One-parameter logistic (Rasch) fitting and per-subgroup confidence weights.

Abilities and difficulties maximize the L2-penalized Bernoulli log-likelihood
by alternating damped Newton updates; the penalized objective is monotone
non-decreasing by construction (each one-dimensional step backtracks until it
improves). Difficulties are anchored to mean zero after fitting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .splits import SubgroupKey

PRIOR_WEIGHT = 0.01  # quadratic penalty (PRIOR_WEIGHT/2) * sum of squares


class ResponseMatrixError(ValueError):
    """Raised when a response table cannot support a fit."""


@dataclass
class ResponseMatrix:
    """Students-by-items table of binary first-attempt scores with missing entries."""

    student_ids: list[str]
    item_ids: list[int]
    responses: np.ndarray   # (n_students, n_items) of {0.0, 1.0, nan}

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.float64)
        if self.responses.shape != (len(self.student_ids), len(self.item_ids)):
            raise ResponseMatrixError("response table shape does not match id lists")

    def observed(self) -> np.ndarray:
        return ~np.isnan(self.responses)

    def validate(self) -> None:
        obs = self.observed()
        if self.responses.size == 0:
            raise ResponseMatrixError("response table is empty")
        empty_students = [self.student_ids[i] for i in np.where(~obs.any(axis=1))[0]]
        if empty_students:
            raise ResponseMatrixError(f"students with no observed responses: {empty_students[:5]}")
        empty_items = [self.item_ids[j] for j in np.where(~obs.any(axis=0))[0]]
        if empty_items:
            raise ResponseMatrixError(f"items with no observed responses: {empty_items[:5]}")


def build_response_matrix(records, quiz_videos=None) -> ResponseMatrix:
    """Assemble a response table from student quiz maps, dropping empty rows/columns."""
    kept = [r for r in records if r.quiz_responses]
    if not kept:
        raise ResponseMatrixError("no student has any quiz responses")
    if quiz_videos is None:
        items = sorted({v for r in kept for v in r.quiz_responses})
    else:
        items = sorted(quiz_videos)
    answered = {v for r in kept for v in r.quiz_responses}
    items = [v for v in items if v in answered]
    if not items:
        raise ResponseMatrixError("no quiz item has any responses")
    col = {v: j for j, v in enumerate(items)}
    table = np.full((len(kept), len(items)), np.nan)
    for i, record in enumerate(kept):
        for video, score in record.quiz_responses.items():
            if video in col:
                table[i, col[video]] = float(score)
    return ResponseMatrix(
        student_ids=[r.student_id for r in kept],
        item_ids=items,
        responses=table,
    )


@dataclass
class RaschFit:
    abilities: dict[str, float]
    difficulties: dict[int, float]
    mean_log_likelihood: float
    converged: bool
    objective_history: list[float] = field(default_factory=list)

    def predict(self, student_id: str, item_id: int) -> float:
        x = self.abilities[student_id] - self.difficulties[item_id]
        return float(1.0 / (1.0 + np.exp(-x)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def _penalized_ll(theta, b, responses, obs) -> float:
    p = _sigmoid(theta[:, None] - b[None, :])
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    ll = np.where(obs, responses * np.log(p) + (1.0 - responses) * np.log(1.0 - p), 0.0).sum()
    return float(ll - 0.5 * PRIOR_WEIGHT * (theta @ theta + b @ b))


def _newton_block(values, grad_fn, objective_fn):
    """Damped Newton step on each coordinate of one parameter block.

    grad_fn(values) must return (gradient, curvature) of the penalized
    log-likelihood; the block step is halved until the objective does not
    decrease, preserving monotone ascent.
    """
    grad, curv = grad_fn(values)
    step = grad / curv
    before = objective_fn(values)
    scale = 1.0
    for _ in range(30):
        candidate = values + scale * step
        if objective_fn(candidate) >= before:
            return candidate
        scale *= 0.5
    return values


def fit_rasch(matrix: ResponseMatrix, max_iters: int = 100, tol: float = 1e-6) -> RaschFit:
    """Alternating penalized-likelihood fit with mean-zero difficulty anchoring."""
    matrix.validate()
    responses = matrix.responses
    obs = matrix.observed()
    filled = np.where(obs, responses, 0.0)
    n_students, n_items = responses.shape
    theta = np.zeros(n_students)
    b = np.zeros(n_items)
    history = [_penalized_ll(theta, b, filled, obs)]
    converged = False

    for _ in range(max_iters):
        theta_old = theta.copy()
        b_old = b.copy()

        def theta_grad(values):
            p = _sigmoid(values[:, None] - b[None, :])
            grad = np.where(obs, filled - p, 0.0).sum(axis=1) - PRIOR_WEIGHT * values
            curv = np.where(obs, p * (1.0 - p), 0.0).sum(axis=1) + PRIOR_WEIGHT
            return grad, curv

        theta = _newton_block(theta, theta_grad, lambda v: _penalized_ll(v, b, filled, obs))

        def b_grad(values):
            p = _sigmoid(theta[:, None] - values[None, :])
            grad = np.where(obs, p - filled, 0.0).sum(axis=0) - PRIOR_WEIGHT * values
            curv = np.where(obs, p * (1.0 - p), 0.0).sum(axis=0) + PRIOR_WEIGHT
            return grad, curv

        b = _newton_block(b, b_grad, lambda v: _penalized_ll(theta, v, filled, obs))

        history.append(_penalized_ll(theta, b, filled, obs))
        change = max(np.abs(theta - theta_old).max(), np.abs(b - b_old).max())
        if change < tol:
            converged = True
            break

    shift = b.mean()
    b = b - shift
    theta = theta - shift
    p = np.clip(_sigmoid(theta[:, None] - b[None, :]), 1e-12, 1.0 - 1e-12)
    raw_ll = np.where(obs, filled * np.log(p) + (1.0 - filled) * np.log(1.0 - p), 0.0).sum()
    return RaschFit(
        abilities={sid: float(t) for sid, t in zip(matrix.student_ids, theta)},
        difficulties={item: float(d) for item, d in zip(matrix.item_ids, b)},
        mean_log_likelihood=float(raw_ll / obs.sum()),
        converged=converged,
        objective_history=history,
    )


def irt_confidence(fits: dict[SubgroupKey, RaschFit]) -> dict[SubgroupKey, float]:
    """Normalized geometric-mean likelihoods: weights over subgroups summing to 1."""
    if not fits:
        raise ValueError("at least one subgroup fit is required")
    keys = sorted(fits)
    raw = np.array([np.exp(fits[k].mean_log_likelihood) for k in keys])
    weights = raw / raw.sum()
    return {k: float(w) for k, w in zip(keys, weights)}


def export_fit_csv(fit: RaschFit, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entity", "kind", "value"])
        for sid in sorted(fit.abilities):
            writer.writerow([sid, "ability", repr(fit.abilities[sid])])
        for item in sorted(fit.difficulties):
            writer.writerow([item, "difficulty", repr(fit.difficulties[item])])
