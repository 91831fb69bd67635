"""Training objectives for both stages.

All losses are plain functions of torch tensors and are differentiable in
every floating-point input. The two EMA states (cluster-balance history and
confidence statistics) are small dataclasses updated out of place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from .errors import DegenerateColumnError, NonFiniteLossError

LOG_EPS = 1e-8


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class BalanceState:
    h: torch.Tensor
    m: float = 0.9
    h_floor: float = 1e-4

    @classmethod
    def uniform(cls, K, m=0.9, h_floor=1e-4):
        return cls(torch.full((K,), 1.0 / K, dtype=torch.float64), m, h_floor)


@dataclass
class ConfidenceState:
    mu_t: float
    sigma2_t: float = 1.0
    momentum: float = 0.999
    sigma2_floor: float = 1e-4

    @classmethod
    def initial(cls, K, momentum=0.999, sigma2_floor=1e-4):
        return cls(1.0 / K, 1.0, momentum, sigma2_floor)


def _symmetric_contrastive(a, b, temperature):
    """Mean of the two directional InfoNCE terms for row-aligned ``a``, ``b``."""
    logits = a @ b.T / temperature
    target = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def instance_loss(Vt, Tt, tau):
    """Bidirectional InfoNCE between projected image and text features."""
    return _symmetric_contrastive(Vt, Tt, tau)


def assignment_loss(Pv, Pt, tau_hat=1.0):
    """Contrastive loss between the K columns of two B x K assignment matrices.

    Columns are unit-normalized first so the temperature does not depend on
    the batch size.
    """
    cv, ct = Pv.T, Pt.T
    for name, c in (("image", cv), ("text", ct)):
        if torch.any(c.norm(dim=1) == 0):
            raise DegenerateColumnError(f"{name} assignment matrix has an all-zero column")
    return _symmetric_contrastive(F.normalize(cv, dim=1), F.normalize(ct, dim=1), tau_hat)


def cluster_centers(P, Xt, strategy="weighted"):
    """Per-cluster centers from hard assignments.

    ``weighted``: members weighted by their probability for the cluster,
    renormalized over the members. ``mean``: plain member mean. Both are
    unit-normalized afterwards. Returns ``(centers, populated_mask)``; empty
    clusters get a zero row.
    """
    K = P.shape[1]
    labels = P.argmax(dim=1)
    onehot = F.one_hot(labels, K).to(P.dtype)
    if strategy == "weighted":
        w = onehot * P
    elif strategy == "mean":
        w = onehot
    else:
        raise ValueError(f"unknown center strategy {strategy!r}")
    mass = w.sum(0)
    mask = onehot.sum(0) > 0
    w = w / torch.where(mask, mass, torch.ones_like(mass))
    raw = w.T @ Xt
    norms = raw.norm(dim=1, keepdim=True)
    centers = torch.where(mask[:, None], raw / torch.where(norms > 0, norms, torch.ones_like(norms)), torch.zeros_like(raw))
    return centers, mask


def center_loss(Mv, Mt, mask, tau_hat=1.0):
    """Cross-modal contrastive loss over the populated cluster centers.

    Returns 0 when fewer than two clusters are populated.
    """
    idx = torch.nonzero(mask).squeeze(1)
    if idx.numel() < 2:
        return (Mv.sum() + Mt.sum()) * 0.0
    return _symmetric_contrastive(Mv[idx], Mt[idx], tau_hat)


def _neg_entropy_terms(P):
    b = P.mean(0)
    return b * torch.log(b.clamp_min(LOG_EPS))


def balance_loss(Pv, Pt, state: BalanceState):
    """Entropy-style balance term scaled per cluster by the inverse history ``h``."""
    h = state.h.to(Pv.dtype)
    return ((_neg_entropy_terms(Pv) + _neg_entropy_terms(Pt)) / h).sum()


def entropy_balance_loss(Pv, Pt):
    """Static variant: the same terms without history weighting."""
    return (_neg_entropy_terms(Pv) + _neg_entropy_terms(Pt)).sum()


def label_histogram(labels, K):
    counts = torch.bincount(torch.as_tensor(labels).reshape(-1), minlength=K).to(torch.float64)
    return counts / counts.sum()


def update_balance_state(state: BalanceState, Pv) -> BalanceState:
    if Pv.shape[0] == 0:
        raise ValueError("empty batch")
    hist = label_histogram(Pv.detach().argmax(dim=1), Pv.shape[1])
    h = state.m * state.h + (1 - state.m) * hist
    h = h.clamp_min(state.h_floor)
    return replace(state, h=h / h.sum())


def align_loss(parts: dict, weights: LossWeights):
    """Weighted sum of the four alignment parts.

    ``parts`` maps ``ins``, ``ass``, ``ctr``, ``bal`` to scalars. Returns
    ``(total, parts)``.
    """
    for name in ("ins", "ass", "ctr", "bal"):
        v = parts[name]
        fv = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteLossError(name, fv)
    total = (
        weights.alpha * parts["ins"]
        + weights.beta * parts["ass"]
        + weights.gamma * parts["ctr"]
        + weights.delta * parts["bal"]
    )
    return total, parts


def confidence_weights(Pv, state: ConfidenceState):
    """Truncated-Gaussian weights: 1 at or above the running mean confidence."""
    conf = Pv.detach().max(dim=1).values
    sigma2 = max(state.sigma2_t, state.sigma2_floor)
    w = torch.exp(-((conf - state.mu_t) ** 2) / (2 * sigma2))
    return torch.where(conf < state.mu_t, w, torch.ones_like(w))


def update_confidence_state(state: ConfidenceState, Pv) -> ConfidenceState:
    conf = Pv.detach().max(dim=1).values.to(torch.float64)
    mean = float(conf.mean())
    var = float(conf.var(unbiased=False)) if conf.numel() > 1 else 0.0
    m = state.momentum
    mu = m * state.mu_t + (1 - m) * mean
    sigma2 = max(m * state.sigma2_t + (1 - m) * var, state.sigma2_floor)
    return replace(state, mu_t=mu, sigma2_t=sigma2)


FIXMATCH_THRESHOLD = 0.95


def self_weights(Pv, state: ConfidenceState, mode="softmatch", threshold=FIXMATCH_THRESHOLD):
    if mode == "softmatch":
        return confidence_weights(Pv, state)
    if mode == "fixmatch":
        return (Pv.detach().max(dim=1).values >= threshold).to(Pv.dtype)
    raise ValueError(f"unknown self-training mode {mode!r}")


def self_loss(Q, pseudo_labels, w):
    """Mean weighted cross-entropy of augmented-view predictions ``Q``.

    ``pseudo_labels`` and ``w`` are treated as constants.
    """
    pseudo_labels = torch.as_tensor(pseudo_labels).detach().long()
    w = torch.as_tensor(w).detach().to(Q.dtype)
    picked = Q.gather(1, pseudo_labels[:, None]).squeeze(1)
    return (w * -torch.log(picked.clamp_min(LOG_EPS))).mean()


