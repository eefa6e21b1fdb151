"""Training losses: stripe/channel alignment, batch-hard triplet, softmax
classification, and their weighted sum.

All functions are pure tensor ops, differentiable w.r.t. their float inputs,
and work in float32 or float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights

# Squared distances below this are clamped before sqrt so identical vectors
# do not produce NaN gradients; forward error is at most 1e-6.
_SQ_DIST_FLOOR = 1e-12


def _as_parts(parts, name: str) -> torch.Tensor:
    """Normalise a (B, R, C)/(R, C) tensor or a length-R sequence of part
    vectors into a single stacked tensor."""
    if isinstance(parts, torch.Tensor):
        t = parts
    else:
        seq = [torch.as_tensor(p) for p in parts]
        dims = [tuple(p.shape) for p in seq]
        for r, shape in enumerate(dims):
            if shape != dims[0]:
                raise ValueError(
                    f"{name}: part {r} has shape {shape}, expected {dims[0]} like part 0"
                )
        t = torch.stack(seq, dim=-2)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3:
        raise ValueError(f"{name}: expected (B, R, C) or (R, C) parts, got shape {tuple(t.shape)}")
    return t


def scp_loss(local_parts, global_parts, reduction: str = "mean", stop_gradient_local: bool = False) -> torch.Tensor:
    """Sum over parts of the squared L2 distance between each stripe-pooled
    local feature and the matching channel block of the global feature.

    Per image the value is sum_r ||local_r - global_r||^2; across a batch the
    per-image values are averaged (reduction="mean") or summed.  Gradients
    flow through both branches unless stop_gradient_local detaches the local
    side for the one-way variant.
    """
    ls = _as_parts(local_parts, "local_parts")
    gs = _as_parts(global_parts, "global_parts")
    if ls.shape[0] != gs.shape[0]:
        raise ValueError(f"batch mismatch: {ls.shape[0]} local vs {gs.shape[0]} global")
    if ls.shape[1] != gs.shape[1]:
        raise ValueError(f"part-count mismatch: {ls.shape[1]} local vs {gs.shape[1]} global parts")
    for r in range(ls.shape[1]):
        if ls.shape[2] != gs.shape[2]:
            raise ValueError(
                f"part {r}: local dim {ls.shape[2]} != global dim {gs.shape[2]}"
            )
    if stop_gradient_local:
        ls = ls.detach()
    per_image = ((ls - gs) ** 2).sum(dim=(1, 2))
    if reduction == "mean":
        return per_image.mean()
    if reduction == "sum":
        return per_image.sum()
    raise ValueError(f"reduction={reduction!r} not in (mean, sum)")


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    """All-pairs Euclidean distances, (B, D) -> (B, B).

    Computed via the ||a||^2 - 2<a,b> + ||b||^2 expansion with the squared
    distance clamped to a tiny floor, so the sqrt has a finite gradient even
    on the diagonal.
    """
    sq_norm = (embeddings**2).sum(dim=1)
    sq = sq_norm.unsqueeze(1) - 2.0 * embeddings @ embeddings.T + sq_norm.unsqueeze(0)
    return torch.sqrt(sq.clamp(min=_SQ_DIST_FLOOR))


def trihard_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    margin: float = 0.3,
    soft_margin: bool = False,
) -> torch.Tensor:
    """Batch-hard triplet loss over Euclidean distances.

    Every sample is an anchor.  Its hardest positive is the most distant
    same-identity sample in the batch (the anchor itself counts, so an
    identity with a single sample contributes a zero positive distance) and
    its hardest negative is the closest different-identity sample.  Mining is
    exhaustive within the batch.  The hinge is max(0, margin + dp - dn) or
    ln(1 + exp(dp - dn)) when soft_margin is set; the result is the mean over
    anchors.
    """
    if embeddings.dim() != 2:
        raise ValueError(f"expected (B, D) embeddings, got shape {tuple(embeddings.shape)}")
    labels = torch.as_tensor(labels)
    if labels.shape[0] != embeddings.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {embeddings.shape[0]} embeddings")
    if torch.unique(labels).numel() < 2:
        raise ValueError("batch contains a single identity; no negatives exist")
    dist = pairwise_distances(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    big = dist.max().detach() + 1.0
    d_pos = torch.where(same, dist, -torch.ones_like(dist)).max(dim=1).values
    d_neg = torch.where(same, dist + big, dist).min(dim=1).values
    if soft_margin:
        per_anchor = F.softplus(d_pos - d_neg)
    else:
        per_anchor = F.relu(margin + d_pos - d_neg)
    return per_anchor.mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over the batch."""
    if logits.dim() != 2:
        raise ValueError(f"expected (B, num_classes) logits, got shape {tuple(logits.shape)}")
    labels = torch.as_tensor(labels).long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        bad = labels[(labels < 0) | (labels >= logits.shape[1])]
        raise ValueError(
            f"labels {sorted(set(bad.tolist()))} out of range for {logits.shape[1]} classes"
        )
    return F.cross_entropy(logits, labels)


@dataclass
class LossBreakdown:
    l_class: torch.Tensor
    l_metric: torch.Tensor
    l_scp: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {
            "l_class": float(self.l_class.detach()),
            "l_metric": float(self.l_metric.detach()),
            "l_scp": float(self.l_scp.detach()),
            "total": float(self.total.detach()),
        }


def combine_losses(l_class, l_metric, l_scp, weights: LossWeights) -> LossBreakdown:
    """total = l_class + l_metric + lambda_scp * l_scp."""
    l_class = torch.as_tensor(l_class)
    l_metric = torch.as_tensor(l_metric)
    l_scp = torch.as_tensor(l_scp)
    total = l_class + l_metric + weights.lambda_scp * l_scp
    return LossBreakdown(l_class, l_metric, l_scp, total)
