"""Generator and distillation losses.

All functions take and return :class:`~tadfkd.autodiff.Tensor` objects so the
result can be backpropagated. Logs are natural logs with the EPS clamp from
the autodiff core.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySelection, GridMismatch, LayerCountMismatch, ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0  # class-prior
    beta: float = 1.0  # adversarial
    gamma: float = 10.0  # representation
    lam: float = 0.5  # total variation vs. L2 inside the representation loss

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


def argmax_lowest(values: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index (numpy's behaviour)."""
    return np.argmax(values, axis=1)


def onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Per-sample ``-sum(target * log(probs))``."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs target {target.shape}")
    return ad.neg(ad.sum(ad.mul(ad.log(probs), target), 1))


def class_prior_loss(teacher_logits: Tensor) -> Tensor:
    """Mean cross-entropy of the teacher's softmax against its own argmax label."""
    labels = argmax_lowest(teacher_logits.data)
    probs = ad.softmax(teacher_logits)
    return ad.mean(cross_entropy(probs, onehot(labels, teacher_logits.shape[1])))


def jsd(p: Tensor, q: Tensor) -> Tensor:
    """Per-sample Jensen-Shannon divergence between probability rows (nats)."""
    if p.shape != q.shape:
        raise ShapeMismatch(f"jsd inputs differ: {p.shape} vs {q.shape}")
    m = ad.scale(ad.add(p, q), 0.5)
    log_m = ad.log(m)
    kl_p = ad.sum(ad.mul(p, ad.sub(ad.log(p), log_m)), 1)
    kl_q = ad.sum(ad.mul(q, ad.sub(ad.log(q), log_m)), 1)
    return ad.scale(ad.add(kl_p, kl_q), 0.5)


def _selected_index(mask, batch: int) -> np.ndarray:
    if mask is None:
        return np.arange(batch)
    selected = np.asarray(getattr(mask, "selected", mask), dtype=bool)
    if selected.shape != (batch,):
        raise ShapeMismatch(f"mask length {selected.shape} does not match batch {batch}")
    idx = np.flatnonzero(selected)
    if idx.size == 0:
        raise EmptySelection("selection mask keeps no samples")
    return idx


def adversarial_loss(teacher_logits: Tensor, student_logits: Tensor, mask=None) -> Tensor:
    """Mean of ``1 - JSD(softmax(t), softmax(s))`` over the selected rows."""
    idx = _selected_index(mask, teacher_logits.shape[0])
    t = ad.take_rows(teacher_logits, idx)
    s = ad.take_rows(student_logits, idx)
    return ad.mean(ad.sub(1.0, jsd(ad.softmax(t), ad.softmax(s))))


def kd_loss_l1(teacher_logits: Tensor, student_logits: Tensor, mask=None) -> Tensor:
    """Mean per-sample L1 distance between logits over the selected rows."""
    if teacher_logits.shape != student_logits.shape:
        raise ShapeMismatch(f"{teacher_logits.shape} vs {student_logits.shape}")
    idx = _selected_index(mask, teacher_logits.shape[0])
    diff = ad.sub(ad.take_rows(teacher_logits, idx), ad.take_rows(student_logits, idx))
    return ad.mean(ad.sum(ad.abs(diff), 1))


def _l2norm(v: Tensor) -> Tensor:
    return ad.sqrt(ad.sum(ad.square(v)))


def bns_loss(obs, teacher) -> Tensor:
    """Sum over BN layers of ||batch mean - running mean|| + ||batch var - running var||."""
    layers = teacher.bn_layers
    if len(obs.means) != len(layers):
        raise LayerCountMismatch(f"{len(obs.means)} observations for {len(layers)} BN layers")
    total = None
    for mu, var, layer in zip(obs.means, obs.variances, layers):
        term = ad.add(_l2norm(ad.sub(mu, layer.running_mean)), _l2norm(ad.sub(var, layer.running_var)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise LayerCountMismatch("teacher has no BN layers")
    return total


@lru_cache(maxsize=32)
def _difference_matrices(h: int, w: int):
    d = h * w
    horiz = np.zeros((d, h * (w - 1)))
    vert = np.zeros((d, (h - 1) * w))
    col = 0
    for r in range(h):
        for c in range(w - 1):
            horiz[r * w + c + 1, col] = 1.0
            horiz[r * w + c, col] = -1.0
            col += 1
    col = 0
    for r in range(h - 1):
        for c in range(w):
            vert[(r + 1) * w + c, col] = 1.0
            vert[r * w + c, col] = -1.0
            col += 1
    return horiz, vert


def total_variation(samples: Tensor, grid: Optional[tuple] = None) -> Tensor:
    """Squared-difference total variation per sample on an H x W grid, / pixel count.

    Without a grid every sample is treated as a single row ``(1, d)``.
    """
    d = samples.shape[1]
    h, w = grid if grid is not None else (1, d)
    if h * w != d:
        raise GridMismatch(f"grid {h}x{w} does not cover width {d}")
    horiz, vert = _difference_matrices(h, w)
    total = None
    for mat in (horiz, vert):
        if mat.shape[1] == 0:
            continue
        term = ad.sum(ad.square(ad.matmul(samples, mat)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.scale(ad.sum(samples), 0.0)
    return ad.scale(total, 1.0 / (samples.shape[0] * d))


def l2_reg(samples: Tensor) -> Tensor:
    """Mean Euclidean norm of the samples."""
    return ad.mean(ad.sqrt(ad.sum(ad.square(samples), 1)))


def representation_loss(obs, teacher, samples: Tensor, grid=None, lam: float = 0.5) -> Tensor:
    out = bns_loss(obs, teacher)
    out = ad.add(out, ad.scale(total_variation(samples, grid), lam))
    return ad.add(out, ad.scale(l2_reg(samples), 1.0 - lam))


def generator_loss(weights: LossWeights, cls=None, adv=None, rep=None) -> Tensor:
    """Weighted sum ``alpha*cls + beta*adv + gamma*rep``.

    Components whose weight is zero are skipped entirely and may be passed as
    ``None``; they may also be zero-argument callables, evaluated only when
    needed.
    """
    total = None
    for w, term in ((weights.alpha, cls), (weights.beta, adv), (weights.gamma, rep)):
        if w == 0:
            continue
        if callable(term):
            term = term()
        if term is None:
            raise ValueError("a component with nonzero weight was not provided")
        scaled = ad.scale(term, w)
        total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        raise ValueError("all generator loss weights are zero")
    return total
