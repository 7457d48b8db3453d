"""Teacher-driven sample selection with a two-component 1-D Gaussian mixture.

Each generated batch gets its own fit: per-sample confidence losses are
clustered into a low-loss component and a high-loss component, and a
sample is kept when its posterior for the low-loss component is strictly
greater than ``tau``. Nothing here is differentiable; masks are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, DegenerateFit

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmConfig:
    max_iterations: int = 100
    tolerance: float = 1e-6
    variance_floor: float = 1e-9
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class GmmFit:
    means: tuple
    variances: tuple
    weights: tuple
    log_likelihood: float
    iterations: int
    degenerate: bool
    history: list = field(default_factory=list)


@dataclass
class SelectionMask:
    selected: np.ndarray
    posterior: np.ndarray
    degenerate: bool = False

    @property
    def selection_rate(self) -> float:
        return float(self.selected.mean()) if self.selected.size else 0.0

    @property
    def count(self) -> int:
        return int(self.selected.sum())

    @classmethod
    def all_selected(cls, batch: int, degenerate: bool = False) -> "SelectionMask":
        return cls(np.ones(batch, dtype=bool), np.ones(batch), degenerate)


def per_sample_confidence(teacher_logits) -> np.ndarray:
    """Cross-entropy of the teacher softmax against its own argmax label.

    Equals ``-log(max softmax prob) = logsumexp(row) - max(row)``.
    """
    logits = np.asarray(getattr(teacher_logits, "data", teacher_logits), dtype=np.float64)
    top = logits.max(axis=1)
    return np.log(np.exp(logits - top[:, None]).sum(axis=1))


def _log_normal(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _weighted_log_densities(x, means, variances, weights) -> np.ndarray:
    """(n, 2) array of log(w_k * N(x; m_k, v_k))."""
    return np.stack([np.log(w) + _log_normal(x, m, v) for m, v, w in zip(means, variances, weights)], axis=1)


def responsibilities(x, means, variances, weights) -> tuple[np.ndarray, float]:
    """E-step: posterior component memberships and the data log-likelihood."""
    x = np.asarray(x, dtype=np.float64)
    logp = _weighted_log_densities(x, means, variances, weights)
    top = logp.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return np.exp(logp - lse[:, None]), float(lse.sum())


def fit_gmm_1d(losses, config: GmmConfig = GmmConfig()) -> GmmFit:
    """Fit a two-component mixture by EM, initialised at (min, max)."""
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise BatchTooSmall("need at least two losses to fit a mixture")
    floor = config.variance_floor
    sample_var = float(x.var())
    if sample_var < floor:
        m = float(x.mean())
        return GmmFit((m, m), (floor, floor), (0.5, 0.5), float("nan"), 0, True)

    means = np.array([x.min(), x.max()])
    variances = np.array([sample_var, sample_var])
    weights = np.array([0.5, 0.5])
    history = []
    prev = -np.inf
    it = 0
    for it in range(1, config.max_iterations + 1):
        resp, ll = responsibilities(x, means, variances, weights)
        history.append(ll)
        if it > 1 and abs(ll - prev) < config.tolerance:
            break
        prev = ll
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            break
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
        weights = nk / x.size
        weights = weights / weights.sum()

    _, ll = responsibilities(x, means, variances, weights)
    order = np.argsort(means, kind="stable")
    means, variances, weights = means[order], variances[order], weights[order]
    degenerate = bool(abs(means[1] - means[0]) < 1e-9 or np.any(weights <= 0))
    return GmmFit(
        tuple(float(v) for v in means),
        tuple(float(v) for v in variances),
        tuple(float(v) for v in weights),
        ll,
        it,
        degenerate,
        history,
    )


def posterior_small(fit: GmmFit, loss_value) -> np.ndarray:
    """Posterior of the low-mean component at ``loss_value`` (scalar or array)."""
    if fit.degenerate:
        raise DegenerateFit("posterior is undefined for a degenerate fit")
    x = np.asarray(loss_value, dtype=np.float64)
    logp = _weighted_log_densities(x.reshape(-1), fit.means, fit.variances, fit.weights)
    # w1 N1 / (w1 N1 + w2 N2) = 1 / (1 + exp(log w2 N2 - log w1 N1))
    diff = logp[:, 1] - logp[:, 0]
    with np.errstate(over="ignore"):
        post = 1.0 / (1.0 + np.exp(diff))
    return post.reshape(x.shape) if x.ndim else float(post[0])


def select(losses, config: GmmConfig = GmmConfig()) -> SelectionMask:
    """Keep samples whose low-loss posterior strictly exceeds ``config.tau``.

    Batches smaller than two or with a degenerate fit keep every sample.
    """
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    if x.size < 2:
        return SelectionMask.all_selected(x.size, degenerate=True)
    fit = fit_gmm_1d(x, config)
    if fit.degenerate:
        return SelectionMask.all_selected(x.size, degenerate=True)
    post = posterior_small(fit, x)
    return SelectionMask(post > config.tau, post)
