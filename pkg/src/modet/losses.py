"""Training objective: soft-token prediction, contrastive alignment in
both directions, box regression, and the weighted total.

All loss functions take and return autograd Tensors so one tape covers a
whole training step.  Targets, assignment structure, and alignment index
sets are plain data; only predictions carry gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .matching import Assignment, GroundTruthObject, uniform_span_rows

__all__ = [
    "LossConfig",
    "PositiveAlignment",
    "GroundTruthObject",
    "AlignmentLoss",
    "soft_token_loss",
    "contrastive_alignment_loss",
    "alignment_from_assignment",
    "box_losses",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters: token budget, temperature, term weights."""

    max_tokens: int = 256
    temperature: float = 0.07
    lambda_tok: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_align: float = 1.0
    no_object_weight: float = 1.0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.no_object_weight <= 1.0:
            raise ValueError(
                f"no_object_weight must be in [0, 1], got {self.no_object_weight}"
            )
        for name in ("lambda_tok", "lambda_l1", "lambda_giou", "lambda_align"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


@dataclass(frozen=True)
class PositiveAlignment:
    """Which tokens each object aligns to, and the transposed view."""

    object_tokens: tuple[tuple[int, ...], ...]
    token_objects: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        pairs_a = {(i, j) for i, toks in enumerate(self.object_tokens) for j in toks}
        pairs_b = {(i, j) for j, objs in enumerate(self.token_objects) for i in objs}
        if pairs_a != pairs_b:
            raise ValueError("object_tokens and token_objects are not transposes")

    @classmethod
    def from_object_tokens(
        cls, object_tokens: Sequence[Sequence[int]], n_tokens: int
    ) -> "PositiveAlignment":
        by_token: list[list[int]] = [[] for _ in range(n_tokens)]
        for i, toks in enumerate(object_tokens):
            for j in toks:
                if not 0 <= j < n_tokens:
                    raise ValueError(f"token position {j} outside 0..{n_tokens - 1}")
                by_token[j].append(i)
        return cls(
            object_tokens=tuple(tuple(t) for t in object_tokens),
            token_objects=tuple(tuple(o) for o in by_token),
        )


def alignment_from_assignment(
    assignment: Assignment, targets: Sequence[GroundTruthObject], n_tokens: int
) -> PositiveAlignment:
    """Alignment sets for the matched objects, in pair order."""
    object_tokens = [targets[t].positive_positions for _, t in assignment.pairs]
    return PositiveAlignment.from_object_tokens(object_tokens, n_tokens)


def soft_token_loss(
    pred_token_dists: Tensor,
    assignment: Assignment,
    targets: Sequence[GroundTruthObject],
    no_object_weight: float = 1.0,
) -> Tensor:
    """Soft cross entropy against per-query span targets, averaged over
    all queries.

    Matched queries get a uniform target over their object's positive
    positions; unmatched queries get a one-hot on the last (no-object)
    column, scaled by `no_object_weight`.  Weights below 1 rebalance the
    gradient toward the few matched rows when most queries are unmatched.
    """
    if not 0.0 <= no_object_weight <= 1.0:
        raise ValueError(f"no_object_weight must be in [0, 1], got {no_object_weight}")
    n, n_cols = pred_token_dists.shape
    row_sums = pred_token_dists.data.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("prediction rows must sum to 1 within 1e-6")
    assignment.validate(n, len(targets))

    targ = np.zeros((n, n_cols), dtype=np.float64)
    span_rows = uniform_span_rows(targets, n_cols)
    for q, t in assignment.pairs:
        targ[q] = span_rows[t]
    for q in assignment.unmatched_queries:
        targ[q, -1] = no_object_weight

    # +1 where the target is zero keeps log defined there; those entries
    # are multiplied away by the zero target weight
    safe = ag.add(pred_token_dists, Tensor(targ == 0.0))
    per_entry = ag.mul(Tensor(targ), ag.log(safe))
    return ag.scale(per_entry.sum(), -1.0 / n)


class AlignmentLoss(NamedTuple):
    loss: Tensor
    degenerate: bool


def contrastive_alignment_loss(
    obj_embs: Tensor,
    tok_embs: Tensor,
    pos: PositiveAlignment,
    temperature: float,
) -> AlignmentLoss:
    """Two-direction InfoNCE between matched-object and token embeddings.

    The object direction averages, per object, the cross entropy of its
    positive tokens against a softmax over all tokens; the token
    direction is symmetric over objects.  Each direction is a mean over
    its participants (objects, and tokens with any positive object), and
    the result is the average of the two.  With no matched objects the
    loss is zero and flagged degenerate.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    n_obj = obj_embs.shape[0]
    n_tok = tok_embs.shape[0]
    if len(pos.object_tokens) != n_obj or len(pos.token_objects) != n_tok:
        raise ValueError("alignment sets do not match embedding counts")
    if n_obj == 0:
        return AlignmentLoss(loss=Tensor(0.0), degenerate=True)
    if any(len(t) == 0 for t in pos.object_tokens):
        raise ValueError("matched object with empty positive token set")

    w_obj = np.zeros((n_obj, n_tok), dtype=np.float64)
    for i, toks in enumerate(pos.object_tokens):
        w_obj[i, list(toks)] = 1.0 / (len(toks) * n_obj)
    active = [j for j, objs in enumerate(pos.token_objects) if objs]
    w_tok = np.zeros((n_tok, n_obj), dtype=np.float64)
    for j in active:
        objs = pos.token_objects[j]
        w_tok[j, list(objs)] = 1.0 / (len(objs) * len(active))

    sims = ag.scale(ag.matmul(obj_embs, ag.transpose(tok_embs)), 1.0 / temperature)
    obj_dir = ag.mul(Tensor(w_obj), ag.log(ag.softmax_rows(sims)))
    tok_dir = ag.mul(Tensor(w_tok), ag.log(ag.softmax_rows(ag.transpose(sims))))
    loss = ag.scale(ag.add(obj_dir.sum(), tok_dir.sum()), -0.5)
    return AlignmentLoss(loss=loss, degenerate=False)


def _columns(boxes: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return tuple(ag.slice_axis(boxes, 1, k, k + 1) for k in range(4))


def _pairwise_min(a: Tensor, b: Tensor) -> Tensor:
    return ag.sub(b, ag.relu(ag.sub(b, a)))


def _pairwise_max(a: Tensor, b: Tensor) -> Tensor:
    return ag.add(a, ag.relu(ag.sub(b, a)))


def box_losses(
    pred_boxes: Tensor,
    assignment: Assignment,
    targets: Sequence[GroundTruthObject],
) -> tuple[Tensor, Tensor]:
    """(L1, 1 - giou) over matched pairs, each summed then divided by the
    target count.  Unmatched queries contribute nothing."""
    m = len(targets)
    if m == 0:
        raise ValueError("no targets")
    assignment.validate(pred_boxes.shape[0], m)

    matched = ag.gather_rows(pred_boxes, [q for q, _ in assignment.pairs])
    tgt = np.stack([targets[t].box.as_array() for _, t in assignment.pairs])

    diff = ag.sub(matched, Tensor(tgt))
    l1 = ag.scale(ag.add(ag.relu(diff), ag.relu(ag.scale(diff, -1.0))).sum(), 1.0 / m)

    pcx, pcy, pw, ph = _columns(matched)
    px0 = ag.sub(pcx, ag.scale(pw, 0.5))
    px1 = ag.add(pcx, ag.scale(pw, 0.5))
    py0 = ag.sub(pcy, ag.scale(ph, 0.5))
    py1 = ag.add(pcy, ag.scale(ph, 0.5))
    thalf = tgt[:, 2:] / 2
    tx0, ty0 = Tensor(tgt[:, :1] - thalf[:, :1]), Tensor(tgt[:, 1:2] - thalf[:, 1:2])
    tx1, ty1 = Tensor(tgt[:, :1] + thalf[:, :1]), Tensor(tgt[:, 1:2] + thalf[:, 1:2])

    iw = ag.relu(ag.sub(_pairwise_min(px1, tx1), _pairwise_max(px0, tx0)))
    ih = ag.relu(ag.sub(_pairwise_min(py1, ty1), _pairwise_max(py0, ty0)))
    inter = ag.mul(iw, ih)
    pred_area = ag.mul(pw, ph)
    tgt_area = Tensor((tgt[:, 2] * tgt[:, 3])[:, None])
    union = ag.sub(ag.add(pred_area, tgt_area), inter)

    hw = ag.sub(_pairwise_max(px1, tx1), _pairwise_min(px0, tx0))
    hh = ag.sub(_pairwise_max(py1, ty1), _pairwise_min(py0, ty0))
    hull = ag.mul(hw, hh)

    giou = ag.sub(ag.div(inter, union), ag.div(ag.sub(hull, union), hull))
    giou_loss = ag.scale(ag.sub(Tensor(np.ones_like(tgt[:, :1])), giou).sum(), 1.0 / m)
    return l1, giou_loss


def total_loss(
    tok: Tensor, l1: Tensor, giou_loss: Tensor, align: Tensor, cfg: LossConfig
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the four terms plus a per-term breakdown."""
    total = ag.add(
        ag.add(
            ag.add(ag.scale(tok, cfg.lambda_tok), ag.scale(l1, cfg.lambda_l1)),
            ag.scale(giou_loss, cfg.lambda_giou),
        ),
        ag.scale(align, cfg.lambda_align),
    )
    breakdown = {
        "tok": float(tok.data),
        "l1": float(l1.data),
        "giou": float(giou_loss.data),
        "align": float(align.data),
        "total": float(total.data),
    }
    return total, breakdown
