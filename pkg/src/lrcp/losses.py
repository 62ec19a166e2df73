"""Training objectives with hand-derived gradients.

Every function takes latents that are already L2-normalized and returns the
loss value together with dL/dZ. Chaining into projector parameters happens in
the runner via :func:`lrcp.numeric.normalize_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clustering import minibatch_kmeans
from .errors import ConfigError, DegenerateInputError

CI_SUPERVISED = "ci_supervised"
CI_UNSUPERVISED = "ci_unsupervised"
DI_SUPERVISED = "di_supervised"
MODES = (CI_SUPERVISED, CI_UNSUPERVISED, DI_SUPERVISED)


@dataclass
class LossOutput:
    value: float
    grad_z: np.ndarray
    labels: Optional[np.ndarray] = None  # pseudo-labels, when the loss made some


@dataclass
class PrototypeStats:
    """Frozen per-cluster statistics seen by the replay-aware losses."""

    mu: np.ndarray  # (C, L) unit vectors
    sigma: np.ndarray  # (C,)
    first_task_class: Optional[np.ndarray] = None
    sigma_floor: float = 0.1

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu))
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.mu.shape[0] != self.sigma.shape[0]:
            raise ConfigError("mu and sigma disagree on the number of prototypes")
        if np.any(self.sigma < 0):
            raise ConfigError("sigma must be nonnegative")

    def __len__(self):
        return self.mu.shape[0] if self.mu.size else 0

    def push_scale(self) -> np.ndarray:
        return np.maximum(1.0 - self.sigma, self.sigma_floor)


def supcon_loss(z, labels, tau=0.07) -> LossOutput:
    """Supervised contrastive loss over one batch.

    Anchors without any same-label partner contribute zero but still count in
    the 1/N normalization.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    z = np.asarray(z)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise DegenerateInputError("contrastive losses need at least two samples")
    if labels.shape[0] != n:
        raise ConfigError("labels must be row-aligned with the batch")

    logits = (z @ z.T) / tau
    off_diag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = pos.sum(axis=1)
    has_pos = n_pos > 0

    masked = np.where(off_diag, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.where(off_diag, np.exp(masked - row_max), 0.0)
    denom = expd.sum(axis=1, keepdims=True)
    log_denom = np.log(denom) + row_max
    softmax = expd / denom

    safe_pos = np.maximum(n_pos, 1)
    mean_pos_logit = np.where(pos, logits, 0.0).sum(axis=1) / safe_pos
    per_anchor = np.where(has_pos, log_denom[:, 0] - mean_pos_logit, 0.0)
    value = per_anchor.sum() / n

    # dL/dlogits for anchor rows that have positives
    g = (softmax - pos / safe_pos[:, None]) * has_pos[:, None] / n
    grad = (g + g.T) @ z / tau
    return LossOutput(float(value), grad)


def median_bandwidth(z_old, z_new, floor=1e-6) -> float:
    both = np.concatenate([np.asarray(z_old, np.float64), np.asarray(z_new, np.float64)])
    i, j = np.triu_indices(both.shape[0], k=1)
    if len(i) == 0:
        return floor
    dists = np.linalg.norm(both[i] - both[j], axis=1)
    return max(float(np.median(dists)), floor)


def _rbf(a, b, gamma):
    diff = a[:, None, :] - b[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return np.exp(-d2 / (2.0 * gamma * gamma)), diff


def preserve_loss(z_old, z_new, bandwidth=None, floor=1e-6) -> LossOutput:
    """Biased (V-statistic) squared MMD under an RBF kernel; gradient w.r.t. ``z_new`` only.

    ``bandwidth`` defaults to the median pairwise distance of the pooled
    sample and is held constant for differentiation.
    """
    z_old = np.asarray(z_old)
    z_new = np.asarray(z_new)
    if z_old.ndim != 2 or z_new.ndim != 2 or z_old.shape[0] == 0 or z_new.shape[0] == 0:
        raise DegenerateInputError("preserve_loss needs two non-empty matrices")
    if z_old.shape[1] != z_new.shape[1]:
        raise DegenerateInputError("z_old and z_new must share latent_dim")
    gamma = median_bandwidth(z_old, z_new, floor) if bandwidth is None else max(bandwidth, floor)
    m, n = z_old.shape[0], z_new.shape[0]

    k_oo, _ = _rbf(z_old, z_old, gamma)
    k_nn, diff_nn = _rbf(z_new, z_new, gamma)
    k_no, diff_no = _rbf(z_new, z_old, gamma)
    value = k_oo.mean() + k_nn.mean() - 2.0 * k_no.mean()

    # d k(a, b) / d a = -k(a, b) (a - b) / gamma^2
    g_nn = -np.einsum("ij,ijk->ik", k_nn, diff_nn) * (2.0 / (n * n * gamma * gamma))
    g_no = np.einsum("ij,ijk->ik", k_no, diff_no) * (2.0 / (m * n * gamma * gamma))
    return LossOutput(max(float(value), 0.0), g_nn + g_no)


def push_loss(z, protos: Optional[PrototypeStats], tau_push=7.0) -> LossOutput:
    """Mean scaled similarity between batch latents and earlier prototypes.

    With no stored prototypes (first task) the loss is identically zero.
    """
    if tau_push <= 0:
        raise ConfigError(f"tau_push must be positive, got {tau_push}")
    z = np.asarray(z)
    n = z.shape[0]
    if protos is None or len(protos) == 0:
        return LossOutput(0.0, np.zeros_like(z))
    direction = (protos.mu / (protos.push_scale()[:, None] * tau_push)).sum(axis=0)
    value = float((z @ direction).sum() / n)
    grad = np.broadcast_to(direction / n, z.shape).astype(z.dtype, copy=True)
    return LossOutput(value, grad)


def pull_loss(z, labels, protos: Optional[PrototypeStats]) -> LossOutput:
    """Mean cosine distance from each latent to the first-task prototypes of its class."""
    z = np.asarray(z)
    n = z.shape[0]
    if protos is None or len(protos) == 0:
        return LossOutput(0.0, np.zeros_like(z))
    if protos.first_task_class is None:
        raise ConfigError("pull_loss needs first_task_class on every prototype")
    if labels is None:
        raise ConfigError("pull_loss needs batch labels")
    match = (np.asarray(labels)[:, None] == np.asarray(protos.first_task_class)[None, :])
    cos = z @ protos.mu.T
    value = float(np.where(match, 1.0 - cos, 0.0).sum() / n)
    grad = -(match.astype(z.dtype) @ protos.mu) / n
    return LossOutput(value, grad.astype(z.dtype, copy=False))


def pseudo_contrastive_loss(z, k_pseudo, tau=0.07, seed=0, iters=10) -> LossOutput:
    """Contrastive loss on minibatch K-means pseudo-labels (assignment held constant)."""
    z = np.asarray(z)
    if k_pseudo < 2 or k_pseudo > z.shape[0]:
        raise DegenerateInputError(
            f"need 2 <= k_pseudo <= batch size, got k={k_pseudo}, N={z.shape[0]}"
        )
    pseudo = minibatch_kmeans(z, k_pseudo, seed=seed, iters=iters)
    out = supcon_loss(z, pseudo, tau)
    out.labels = pseudo
    return out


@dataclass
class LossWeights:
    push: float = 0.0
    pull: float = 0.0
    preserve: float = 0.0

    def __post_init__(self):
        if min(self.push, self.pull, self.preserve) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class CombinedOutput:
    value: float
    grad_z: np.ndarray  # w.r.t. the batch latents
    grad_z_new: Optional[np.ndarray]  # w.r.t. the re-projected buffer latents
    terms: dict = field(default_factory=dict)


def combined_loss(
    mode,
    z,
    weights: LossWeights,
    *,
    labels=None,
    protos: Optional[PrototypeStats] = None,
    z_old=None,
    z_new=None,
    tau=0.07,
    tau_push=7.0,
    k_pseudo=None,
    seed=0,
    pseudo_iters=10,
    bandwidth=None,
) -> CombinedOutput:
    """Scenario objective: base contrastive term plus weighted replay terms.

    ci_supervised:   supcon + push + preserve
    ci_unsupervised: pseudo-contrastive + push + preserve
    di_supervised:   supcon + pull + preserve

    Replay terms with zero weight or an empty buffer are skipped and
    contribute exactly zero.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode != DI_SUPERVISED and weights.pull:
        raise ConfigError("pull weight is only valid in domain-incremental mode")
    if mode == DI_SUPERVISED and weights.push:
        raise ConfigError("push weight is not used in domain-incremental mode")
    if mode in (CI_SUPERVISED, DI_SUPERVISED) and labels is None:
        raise ConfigError(f"{mode} needs labels")

    terms = {}
    if mode == CI_UNSUPERVISED:
        if k_pseudo is None:
            raise ConfigError("ci_unsupervised needs k_pseudo")
        base = pseudo_contrastive_loss(z, k_pseudo, tau, seed, pseudo_iters)
        terms["pc"] = base.value
    else:
        base = supcon_loss(z, labels, tau)
        terms["sc"] = base.value
    value = base.value
    grad_z = base.grad_z.copy()

    have_protos = protos is not None and len(protos) > 0
    if mode == DI_SUPERVISED:
        if weights.pull and have_protos:
            if protos.first_task_class is None:
                raise ConfigError("domain-incremental pull needs first-task prototype classes")
            out = pull_loss(z, labels, protos)
            terms["pull"] = out.value
            value += weights.pull * out.value
            grad_z += weights.pull * out.grad_z
    elif weights.push and have_protos:
        out = push_loss(z, protos, tau_push)
        terms["push"] = out.value
        value += weights.push * out.value
        grad_z += weights.push * out.grad_z

    grad_z_new = None
    if weights.preserve and z_new is not None and len(z_new):
        out = preserve_loss(z_old, z_new, bandwidth)
        terms["preserve"] = out.value
        value += weights.preserve * out.value
        grad_z_new = weights.preserve * out.grad_z
    return CombinedOutput(float(value), grad_z, grad_z_new, terms)
