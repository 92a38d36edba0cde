"""Loss functions: stop-gradient similarity, the two NCE objectives,
auxiliary cross-entropies and their weighted combination.

Both NCE losses share one structure: codes come in positive pairs (two codes
per group), every code serves as an anchor once, the positive is its partner,
and every other group contributes one effective negative term. The similarity
always detaches its second argument, so gradients flow only through anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_TEMPERATURE = 0.1


def _safe_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1)
    if not torch.all(norms > 0):
        raise ValueError("degenerate code")
    return x / norms.unsqueeze(-1)


def similarity(x: torch.Tensor, y: torch.Tensor, lam: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """exp(cos(x, stopgrad(y)) / lam); gradients flow only through x."""
    if lam <= 0:
        raise ValueError("temperature must be positive")
    xn = _safe_normalize(x)
    yn = _safe_normalize(y.detach())
    return torch.exp((xn * yn).sum(dim=-1) / lam)


def _paired_nce(codes: torch.Tensor, group_ids, lam: float) -> torch.Tensor:
    """NCE over paired codes grouped by group_ids (each id exactly twice).

    For each anchor, the positive is the other code of its group; every other
    group contributes the mean similarity of its two codes as one negative
    term. This keeps exactly one negative per group (uniform case gives
    ln(n_groups)) while staying invariant to batch permutation.
    """
    n = codes.shape[0]
    if len(group_ids) != n:
        raise ValueError("group_ids length must match codes")
    ids = list(group_ids)
    uniq = list(dict.fromkeys(ids))
    members = {g: [i for i, gi in enumerate(ids) if gi == g] for g in uniq}
    if any(len(m) != 2 for m in members.values()):
        raise ValueError("malformed batch plan: every group id must appear exactly twice")
    if len(uniq) < 2:
        raise ValueError("malformed batch plan: need at least 2 groups")
    if lam <= 0:
        raise ValueError("temperature must be positive")

    anchors = _safe_normalize(codes)
    targets = _safe_normalize(codes.detach())
    d = torch.exp(anchors @ targets.T / lam)  # d[a, b], stopgrad on b

    # group-mean similarity matrix: (n, n_groups)
    group_index = torch.tensor([uniq.index(g) for g in ids])
    onehot = F.one_hot(group_index, num_classes=len(uniq)).to(d.dtype)
    d_group = (d @ onehot) / 2.0

    partner = torch.empty(n, dtype=torch.long)
    for g, (a, b) in members.items():
        partner[a], partner[b] = b, a
    pos = d[torch.arange(n), partner]
    neg_sum = d_group.sum(dim=1) - d_group[torch.arange(n), group_index]
    return -(torch.log(pos / (pos + neg_sum))).mean()


def equivariance_loss(codes: torch.Tensor, group_ids, lam: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Contrastive loss over relative-transform codes grouped by shared transform."""
    return _paired_nce(codes, group_ids, lam)


def instance_loss(codes: torch.Tensor, instance_ids, lam: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Instance discrimination loss over the two augmentations of each video."""
    return _paired_nce(codes, instance_ids, lam)


def aux_losses(
    speed_logits: torch.Tensor | None,
    speed_labels: torch.Tensor | None,
    direction_logits: torch.Tensor | None,
    direction_labels: torch.Tensor | None,
    overlap_logits: torch.Tensor | None,
    overlap_labels: torch.Tensor | None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean cross-entropy per enabled head; disabled heads (None) contribute 0."""

    def one(logits, labels):
        if logits is None or labels is None:
            return torch.tensor(0.0)
        if labels.min() < 0 or labels.max() >= logits.shape[-1]:
            raise ValueError("label out of range")
        return F.cross_entropy(logits, labels)

    return (
        one(speed_logits, speed_labels),
        one(direction_logits, direction_labels),
        one(overlap_logits, overlap_labels),
    )


@dataclass(frozen=True)
class LossWeights:
    equi: float = 1.0
    inst: float = 1.0
    aux_speed: float = 1.0
    aux_direction: float = 1.0
    aux_overlap: float = 1.0

    def as_tuple(self):
        return (self.equi, self.inst, self.aux_speed, self.aux_direction, self.aux_overlap)


@dataclass
class LossBreakdown:
    equi: torch.Tensor
    inst: torch.Tensor
    aux_speed: torch.Tensor
    aux_direction: torch.Tensor
    aux_overlap: torch.Tensor
    total: torch.Tensor

    def components(self):
        return (self.equi, self.inst, self.aux_speed, self.aux_direction, self.aux_overlap)

    def to_floats(self) -> dict:
        return {
            "equi": float(self.equi.detach()),
            "inst": float(self.inst.detach()),
            "aux_speed": float(self.aux_speed.detach()),
            "aux_direction": float(self.aux_direction.detach()),
            "aux_overlap": float(self.aux_overlap.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    weights: LossWeights,
    equi: torch.Tensor,
    inst: torch.Tensor,
    aux_speed: torch.Tensor,
    aux_direction: torch.Tensor,
    aux_overlap: torch.Tensor,
) -> LossBreakdown:
    """Weighted combination; a zero weight drops the term (and its gradient)."""
    parts = (equi, inst, aux_speed, aux_direction, aux_overlap)
    total = None
    for w, part in zip(weights.as_tuple(), parts):
        if w == 0.0:
            continue
        term = w * part
        total = term if total is None else total + term
    if total is None:
        total = torch.tensor(0.0)
    return LossBreakdown(equi, inst, aux_speed, aux_direction, aux_overlap, total)
