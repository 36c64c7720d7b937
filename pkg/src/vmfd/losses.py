"""Contrastive and vMF objectives with analytic gradients.

Every loss returns a :class:`LossOutput` holding the value and the gradient
with respect to the rows of the 3D embedding matrix (before the
normalization Jacobian is applied).  The gradient with respect to the 2D
embeddings is also returned so callers can train the 2D heads if they wish.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .utils.validation import check_labels, check_positive, check_same_shape, check_unit_rows
from .vmf import VmfParams, log_norm_const

__all__ = [
    "CombinedLoss",
    "LossOutput",
    "combined_loss",
    "kl_vmf_loss",
    "ppnce_loss",
    "supervised_nce_loss",
]


@dataclass
class LossOutput:
    value: float
    grad_3d: np.ndarray
    grad_2d: np.ndarray | None = None
    # d value / d <f3d_i, f2d_j>; only the contrastive losses fill it
    grad_similarity: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad_3d)):
            raise FloatingPointError("non-finite gradient")


def _prepare(f3d, f2d, tau, check_input):
    if check_input:
        f3d = check_unit_rows(f3d, "f3d")
        f2d = check_unit_rows(f2d, "f2d")
    else:
        f3d = np.asarray(f3d, dtype=np.float64)
        f2d = np.asarray(f2d, dtype=np.float64)
    check_same_shape(f3d, f2d, ("f3d", "f2d"))
    tau = check_positive(tau, "tau")
    return f3d, f2d, tau


def _finish(value, grad_logits, f3d, f2d, tau) -> LossOutput:
    return LossOutput(
        value=float(value),
        grad_3d=grad_logits @ f2d / tau,
        grad_2d=grad_logits.T @ f3d / tau,
        grad_similarity=grad_logits / tau,
    )


def ppnce_loss(f3d, f2d, tau: float = 0.07, check_input: bool = True) -> LossOutput:
    """Point-pixel InfoNCE: each point's positive is its own pixel, every other pixel is a negative."""
    f3d, f2d, tau = _prepare(f3d, f2d, tau, check_input)
    m = f3d.shape[0]
    logits = f3d @ f2d.T / tau
    lse = logsumexp(logits, axis=1)
    value = np.mean(lse - np.diag(logits))
    prob = np.exp(logits - lse[:, None])
    grad_logits = (prob - np.eye(m)) / m
    return _finish(value, grad_logits, f3d, f2d, tau)


def supervised_nce_loss(g3d, g2d, labels, tau: float = 0.07,
                        check_input: bool = True) -> LossOutput:
    """Weakly-supervised InfoNCE whose positives are all pixels sharing the anchor's label."""
    g3d, g2d, tau = _prepare(g3d, g2d, tau, check_input)
    m = g3d.shape[0]
    labels = check_labels(labels, m)
    logits = g3d @ g2d.T / tau
    lse = logsumexp(logits, axis=1)
    same = labels[:, None] == labels[None, :]
    pos_logits = np.where(same, logits, -np.inf)
    lse_pos = logsumexp(pos_logits, axis=1)
    n_pos = same.sum(axis=1)
    value = np.mean(lse - lse_pos + np.log(n_pos))
    prob = np.exp(logits - lse[:, None])
    pos_prob = np.exp(pos_logits - lse_pos[:, None])
    grad_logits = (prob - pos_prob) / m
    return _finish(value, grad_logits, g3d, g2d, tau)


def kl_vmf_loss(g3d, labels, class_params: list[VmfParams], initialized,
                check_input: bool = True) -> LossOutput:
    """Negative vMF log-likelihood of each embedding under its class distribution.

    Points of uninitialized classes contribute nothing; the average runs over
    the remaining points.  ``class_params`` are constants.

    ``check_input=False`` skips the unit-norm check, which finite-difference
    probes off the sphere need.
    """
    g3d = check_unit_rows(g3d, "g3d") if check_input else np.asarray(g3d, dtype=np.float64)
    m, C = g3d.shape
    labels = check_labels(labels, m)
    initialized = np.asarray(initialized, dtype=bool)
    if len(class_params) != initialized.shape[0]:
        raise ValueError("class_params and initialized must have the same length")
    if labels.size and labels.max() >= initialized.shape[0]:
        raise ValueError("label outside the range of class_params")
    active = initialized[labels]
    grad = np.zeros_like(g3d)
    m_active = int(active.sum())
    if m_active == 0:
        return LossOutput(0.0, grad)
    mus = np.stack([p.mu for p in class_params])
    if mus.shape[1] != C:
        raise ValueError(f"class mean directions have dimension {mus.shape[1]}; embeddings have {C}")
    kappas = np.array([p.kappa for p in class_params])
    log_c = np.array([log_norm_const(C, p.kappa) if ok else 0.0
                      for p, ok in zip(class_params, initialized)])
    idx = np.flatnonzero(active)
    k = labels[idx]
    cos = np.einsum("ij,ij->i", g3d[idx], mus[k])
    value = np.sum(-log_c[k] - kappas[k] * cos) / m_active
    grad[idx] = -(kappas[k][:, None] * mus[k]) / m_active
    return LossOutput(float(value), grad)


@dataclass
class CombinedLoss:
    value: float
    grad_pp: np.ndarray
    grad_sem: np.ndarray
    components: dict[str, float]


def combined_loss(l_ppnce: LossOutput, l_sup: LossOutput, l_kl: LossOutput,
                  lambda1: float = 1.0, lambda2: float = 1.0, lambda3: float = 1.0) -> CombinedLoss:
    """Weighted sum of the three objectives, gradients kept per projection head."""
    for name, lam in (("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)):
        if lam < 0:
            raise ValueError(f"{name} must be >= 0; got {lam}")
    value = lambda1 * l_ppnce.value + lambda2 * l_sup.value + lambda3 * l_kl.value
    return CombinedLoss(
        value=value,
        grad_pp=lambda1 * l_ppnce.grad_3d,
        grad_sem=lambda2 * l_sup.grad_3d + lambda3 * l_kl.grad_3d,
        components={"ppnce": l_ppnce.value, "sup": l_sup.value, "kl": l_kl.value},
    )
