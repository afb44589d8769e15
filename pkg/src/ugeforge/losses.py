"""Differentiable objectives for generator training: gradient matching,
feature distance (push-away + triplet), knowledge-distillation divergence,
the undistill term, their weighted total, and the multi-network aggregate.

Every loss here is pure given frozen networks: no call mutates parameters,
and gradients flow only into the protected images.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .embedspace import EmbeddingSpace, image_embed, least_similar_rows
from .nets import ParameterView, flat_param_gradient

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights; defaults are the CIFAR-10 preset values."""

    lambda_fd: float = 1.0
    lambda_ud: float = 0.1
    alpha: float = 0.1
    omega: float = 0.1
    kd_temperature: float = 4.0
    lambda_gm: float = 1.0  # 1.0 recovers the plain three-term total

    def __post_init__(self):
        if min(self.lambda_fd, self.lambda_ud, self.alpha, self.omega, self.lambda_gm) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be > 0")


def _group_cosine_distance(g1: torch.Tensor, g2: torch.Tensor) -> torch.Tensor:
    # Half squared distance of eps-normalized vectors: equals 1 - cos up to
    # O(eps), is exactly 0 for identical gradients, and a group whose
    # gradients vanish contributes exactly 0 instead of 0/0.
    n1 = g1 / (g1.norm() + COSINE_EPS)
    n2 = g2 / (g2.norm() + COSINE_EPS)
    return 0.5 * (n1 - n2).pow(2).sum()


def gradient_matching_loss(
    net: nn.Module,
    theta_t: ParameterView,
    x: torch.Tensor,
    x_u: torch.Tensor,
    y: torch.Tensor,
    mode: str = "per-group",
) -> torch.Tensor:
    """Cosine distance between the parameter gradients induced by the clean
    and the protected batch at checkpoint ``theta_t``, averaged per parameter
    group (or computed on the flat concatenation with mode="flat").

    The protected-side gradient keeps its graph, so the result is
    differentiable in ``x_u`` through the second-order path.
    """
    if mode not in ("per-group", "flat"):
        raise ValueError(f"unknown gradient-matching mode {mode!r}")
    g_clean = flat_param_gradient(net, theta_t, x.detach(), y, create_graph=False)
    g_prot = flat_param_gradient(net, theta_t, x_u, y, create_graph=x_u.requires_grad or x_u.grad_fn is not None)
    for vec in g_clean.vectors + [v.detach() for v in g_prot.vectors]:
        if not torch.isfinite(vec).all():
            raise ValueError("non-finite gradients in gradient-matching loss")
    clean_vecs = [v.detach() for v in g_clean.vectors]
    if mode == "flat":
        return _group_cosine_distance(torch.cat(clean_vecs), torch.cat(g_prot.vectors))
    dists = [
        _group_cosine_distance(c, p) for c, p in zip(clean_vecs, g_prot.vectors)
    ]
    return torch.stack(dists).mean()


def feature_push_loss(f_i: torch.Tensor, f_i_u: torch.Tensor) -> torch.Tensor:
    """Negative mean squared distance between clean and protected embeddings;
    in [-4, 0] for unit vectors (minimizing it pushes them apart)."""
    sq = (f_i - f_i_u).pow(2).sum(dim=-1)
    return -(sq.mean() if sq.ndim else sq)


def triplet_feature_loss(
    f_i_u: torch.Tensor,
    f_t: torch.Tensor,
    f_t_neg: torch.Tensor,
    alpha: float,
) -> torch.Tensor:
    """Pull the protected embedding toward the least-similar class embedding
    and push it at least ``alpha`` (squared distance) from its own class."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    pull = (f_i_u - f_t_neg).pow(2).sum(dim=-1)
    hinge = F.relu(alpha - (f_i_u - f_t).pow(2).sum(dim=-1))
    val = pull + hinge
    return val.mean() if val.ndim else val


def feature_distance_loss(
    space: EmbeddingSpace,
    x: torch.Tensor,
    x_u: torch.Tensor,
    y: torch.Tensor,
    alpha: float,
) -> torch.Tensor:
    """Mean of push-away + triplet over the batch. Clean-side embeddings and
    class rows are constants; only the protected embeddings carry gradient."""
    with torch.no_grad():
        f_clean = image_embed(space, x)
        neg_labels = least_similar_rows(space, f_clean, y)
    f_prot = image_embed(space, x_u)
    mat = space.class_matrix.to(f_prot.dtype)
    f_t = mat[y]
    f_t_neg = mat[neg_labels]
    push = feature_push_loss(f_clean.to(f_prot.dtype), f_prot)
    tri = triplet_feature_loss(f_prot, f_t, f_t_neg, alpha)
    return push + tri


def kd_divergence(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Temperature-scaled distillation divergence:
    T^2 * mean_batch KL(softmax(teacher/T) || softmax(student/T))."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not (torch.isfinite(teacher_logits).all() and torch.isfinite(student_logits).all()):
        raise ValueError("non-finite logits in kd_divergence")
    log_pt = F.log_softmax(teacher_logits / temperature, dim=1)
    log_ps = F.log_softmax(student_logits / temperature, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1).mean()
    return (temperature**2) * kl


def undistill_loss(
    authorized: nn.Module,
    hacker: nn.Module,
    x_u: torch.Tensor,
    y: torch.Tensor,
    omega: float,
    temperature: float,
) -> torch.Tensor:
    """Classification loss of the authorized network on the protected batch
    minus omega times the distillation divergence toward the hacker network.
    Both networks stay fixed; gradients reach only ``x_u``."""
    logits_auth = authorized(x_u)
    logits_hack = hacker(x_u)
    ce = F.cross_entropy(logits_auth, y)
    return ce - omega * kd_divergence(logits_auth, logits_hack, temperature)


def total_loss(components: dict, w: LossWeights):
    """Weighted sum  gm + lambda_fd*fd + lambda_ud*ud  (gm itself optionally
    weighted, which the ablation variants use to switch terms off)."""
    for key in ("gm", "fd", "ud"):
        value = components[key]
        finite = torch.isfinite(value).all() if isinstance(value, torch.Tensor) else (
            value == value and abs(value) != float("inf")
        )
        if not finite:
            raise ValueError(f"non-finite loss component {key}={value}")
    return (
        w.lambda_gm * components["gm"]
        + w.lambda_fd * components["fd"]
        + w.lambda_ud * components["ud"]
    )


def multi_authorized_aggregate(loss_fn, authorized_set, *args, **kwargs):
    """Arithmetic mean of ``loss_fn(member, *args, **kwargs)`` over the
    authorized set; a singleton set reduces to the plain loss exactly."""
    members = list(authorized_set)
    if not members:
        raise ValueError("authorized set must be nonempty")
    values = [loss_fn(member, *args, **kwargs) for member in members]
    if len(values) == 1:
        return values[0]
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total / len(values)
