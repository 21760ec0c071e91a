"""Surrogate loss for implicit Gaussian feature augmentation.

Instead of drawing augmented features h~ ~ N(h + delta, alpha * Sigma_y)
and averaging CE over draws, the expected loss is upper-bounded in closed
form: each logit j gains a quadratic term alpha * rho_j, where
rho_j = 0.5 (w_j - w_y) Sigma_y (w_j - w_y)^T, and the final loss adds a
prior-based logit adjustment beta * log pi_j in place of 1/pi weighting.

Stop-gradient placement: delta and the Sigma matrices enter as whatever
tensors the caller provides (constants for classifier updates, leaves for
the covariance meta-update); the head weights inside the quadratic terms
are differentiated by default, with a detach toggle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossConfig:
    alpha: float = 0.5  # covariance-term scale
    beta: float = 1.0  # logit-adjustment scale

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


@dataclass
class PerturbationStrategy:
    """Per-sample scalar eps and the feature-space step eps * sign(g)."""

    eps: object  # (n,) array or (n, 1) Tensor
    delta: object  # (n, H) array or Tensor


@dataclass
class RegularizerReport:
    """First-order decomposition diagnostics of the surrogate loss."""

    generalization: float  # sum_i sum_{j != y} q_ij rho_ij
    robustness: float  # sum_i sum_{j != y} q_ij (w_j - w_y) . delta_i
    fairness: float  # sum_i sum_{j != y} q_ij log(pi_j / pi_y)
    per_sample: np.ndarray  # n x 3 breakdown in the same order


def compute_delta(grad_h: np.ndarray, eps) -> PerturbationStrategy:
    """delta_i = eps_i * sign(g_i), with the sign factor always constant.

    eps > 0 points along the CE ascent direction (adversarial), eps < 0
    against it. A Tensor eps keeps the dependence of delta on the
    perturbation network alive for the meta-composition.
    """
    grad_h = np.asarray(grad_h, dtype=np.float64)
    n, width = grad_h.shape
    sgn = np.sign(grad_h)
    if isinstance(eps, Tensor):
        if eps.shape not in [(n,), (n, 1)]:
            raise ad.ShapeError(f"eps shape {eps.shape} for {n} samples")
        if np.max(np.abs(eps.value)) >= 1.0:
            raise ValueError("|eps| must be < 1")
        col = eps if eps.shape == (n, 1) else ad.reshape(eps, (n, 1))
        delta = ad.mul(ad.broadcast_to(col, (n, width)), Tensor(sgn))
        return PerturbationStrategy(col, delta)
    eps = np.asarray(eps, dtype=np.float64).reshape(n)
    if np.max(np.abs(eps), initial=0.0) >= 1.0:
        raise ValueError("|eps| must be < 1")
    return PerturbationStrategy(eps, eps[:, None] * sgn)


def quadratic_row(w, sigma, c: int) -> Tensor:
    """rho_j = 0.5 (w_j - w_c) Sigma (w_j - w_c)^T for every class j."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    diff = ad.sub(w, ad.gather_rows(w, np.array([c])))
    quad = ad.tsum(ad.mul(ad.matmul(diff, sigma), diff), axis=1)
    return ad.mul(Tensor(0.5), quad)


def quadratic_terms(w, sigmas, labels: np.ndarray,
                    detach_w: bool = False) -> Tensor:
    """n x C matrix of rho values, sigma chosen per sample label.

    Rows sharing a label reuse one per-class computation; the label mask
    assembles the batch matrix. rho[i, labels[i]] is exactly zero.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n = labels.size
    num_classes = w.shape[0]
    w_eff = Tensor(w.value.copy()) if (detach_w and isinstance(w, Tensor)) else w
    total = None
    for c in np.unique(labels):
        row = quadratic_row(w_eff, sigmas[c], int(c))
        mask = np.zeros((n, 1))
        mask[labels == c] = 1.0
        spread = ad.broadcast_to(ad.reshape(row, (1, num_classes)),
                                 (n, num_classes))
        term = ad.mul(Tensor(mask), spread)
        total = term if total is None else ad.add(total, term)
    return total


def base_logits(w, b, h, delta) -> Tensor:
    """z = (h + delta) W^T + b."""
    shifted = h if delta is None else ad.add(h, delta)
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return ad.add(ad.matmul(shifted, ad.transpose(w)), b)


def adjusted_logits(w, b, h, delta, rho, priors: np.ndarray,
                    config: LossConfig) -> Tensor:
    """Z~ = (h+delta) W^T + b + alpha*rho + beta*log(pi), rows n x C."""
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(priors <= 0):
        raise ValueError("priors must be strictly positive")
    z = base_logits(w, b, h, delta)
    if rho is not None:
        z = ad.add(z, ad.mul(Tensor(config.alpha), rho))
    return ad.add(z, Tensor(config.beta * np.log(priors)))


def augmented_ce_loss(z_tilde: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(Z~)[y], via log-sum-exp."""
    return ad.mean(ad.softmax_cross_entropy(z_tilde, labels))


def surrogate_per_sample(w, b, h, delta, rho, labels: np.ndarray,
                         alpha: float) -> Tensor:
    """Per-sample closed-form bound log sum_j exp(Z_j - Z_y), no prior term."""
    z = base_logits(w, b, h, delta)
    if rho is not None:
        z = ad.add(z, ad.mul(Tensor(alpha), rho))
    return ad.softmax_cross_entropy(z, labels)


def weighted_surrogate_bound(w, b, h, delta, rho, labels: np.ndarray,
                             priors: np.ndarray, alpha: float) -> Tensor:
    """Pre-adjustment variant: sum_i (1/pi_{y_i}) * bound_i."""
    priors = np.asarray(priors, dtype=np.float64)
    terms = surrogate_per_sample(w, b, h, delta, rho, labels, alpha)
    weights = 1.0 / priors[np.asarray(labels, dtype=np.intp)]
    return ad.tsum(ad.mul(terms, Tensor(weights)))


def regularizer_terms(q: np.ndarray, rho: np.ndarray, w: np.ndarray,
                      delta: np.ndarray, priors: np.ndarray,
                      labels: np.ndarray) -> RegularizerReport:
    """Diagnostic split of the surrogate into its three wrong-class sums."""
    q = np.asarray(q, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, num_classes = q.shape
    off = np.ones_like(q)
    off[np.arange(n), labels] = 0.0
    qo = q * off
    gen = np.sum(qo * rho, axis=1)
    diff = w[None, :, :] - w[labels][:, None, :]  # n x C x H: w_j - w_y
    rob = np.sum(qo * np.einsum("ijh,ih->ij", diff, delta), axis=1)
    log_ratio = np.log(priors)[None, :] - np.log(priors[labels])[:, None]
    fair = np.sum(qo * log_ratio, axis=1)
    per_sample = np.stack([gen, rob, fair], axis=1)
    return RegularizerReport(float(gen.sum()), float(rob.sum()),
                             float(fair.sum()), per_sample)
