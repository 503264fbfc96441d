"""Ranking rules and evaluation protocols.

Queries are ranked per example three ways: by objectness (one minus the
no-object mass), by the probability mass a query assigns to a phrase's
token span, and by the referred-object head.  On top of those rankings
sit the phrase recall@k protocols (any-box and merged-boxes), pooled
class-agnostic average precision, referring-expression accuracy, and
question-answering accuracy with type dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, enclosing_box, iou
from .model import ModelConfig, ParamStore, Prediction, forward
from .synthdata import ANSWER_VOCABS, GroundedExample, tokens_to_ids

PROTOCOLS = ("ANY", "MERGED")


@dataclass(frozen=True)
class RankedBoxes:
    """Boxes with descending finite scores; ties sit in query order."""

    entries: tuple[tuple[Box, float], ...]

    def __post_init__(self):
        scores = [s for _, s in self.entries]
        if not np.all(np.isfinite(scores)):
            raise ValueError("non-finite ranking score")
        for a, b in zip(scores, scores[1:]):
            if b > a:
                raise ValueError("scores not descending")

    def top(self, k: int) -> list[Box]:
        return [box for box, _ in self.entries[:k]]


def _ranked(boxes: np.ndarray, scores: np.ndarray) -> RankedBoxes:
    order = np.argsort(-scores, kind="stable")
    return RankedBoxes(
        entries=tuple((Box(*boxes[i]), float(scores[i])) for i in order)
    )


def rank_by_objectness(pred: Prediction) -> RankedBoxes:
    """Descending 1 - P(no-object); the no-object column is last."""
    scores = 1.0 - pred.token_dists.data[:, -1]
    return _ranked(pred.boxes.data, scores)


def rank_by_span_mass(pred: Prediction, span: tuple[int, int]) -> RankedBoxes:
    """Descending probability mass each query puts on the span."""
    s, e = span
    n_positions = pred.token_dists.data.shape[1] - 1
    if not 0 <= s < e <= n_positions:
        raise ValueError(f"empty or out-of-range span [{s}, {e})")
    scores = pred.token_dists.data[:, s:e].sum(axis=1)
    return _ranked(pred.boxes.data, scores)


def rank_by_referred(pred: Prediction) -> RankedBoxes:
    logits = pred.referred_logits.data[:, 0]
    scores = 1.0 / (1.0 + np.exp(-logits))
    return _ranked(pred.boxes.data, scores)


def recall_at_k(
    ranked: RankedBoxes,
    gt_boxes: Sequence[Box],
    k: int,
    protocol: str = "ANY",
    iou_thresh: float = 0.5,
    require_all: bool = False,
) -> bool:
    """Phrase-level hit test over the top-k ranked boxes.

    ANY: a hit needs one top-k box above the IoU threshold with one
    ground-truth box.  MERGED: the ground-truth boxes are first replaced
    by their smallest enclosing box.  `require_all` (not part of the
    reference protocol) instead demands every ground-truth box be
    covered by some top-k box."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not gt_boxes:
        raise ValueError("recall needs at least one ground-truth box")
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    targets = [enclosing_box(list(gt_boxes))] if protocol == "MERGED" else list(gt_boxes)
    top = ranked.top(k)
    if require_all:
        return all(any(iou(p, t) > iou_thresh for p in top) for t in targets)
    return any(iou(p, t) > iou_thresh for p in top for t in targets)


def class_agnostic_ap(
    ranked_lists: Sequence[RankedBoxes],
    gt_lists: Sequence[Sequence[Box]],
    iou_thresh: float = 0.5,
) -> float:
    """Pooled average precision, ignoring classes.

    Predictions from every example are pooled by descending score (ties
    keep example order, then rank order), each greedily matched to the
    highest-IoU unused ground-truth box of its own example above the
    threshold.  The result is the exact area under the precision
    envelope of the resulting curve."""
    if len(ranked_lists) != len(gt_lists):
        raise ValueError("ranked and ground-truth lists differ in length")
    n_gt = sum(len(g) for g in gt_lists)
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground-truth box")

    pooled = []
    for ei, ranked in enumerate(ranked_lists):
        for ri, (box, score) in enumerate(ranked.entries):
            pooled.append((-score, ei, ri, box))
    pooled.sort(key=lambda t: (t[0], t[1], t[2]))

    used = [np.zeros(len(g), dtype=bool) for g in gt_lists]
    tp = np.zeros(len(pooled))
    for i, (_, ei, _, box) in enumerate(pooled):
        best_iou, best_j = iou_thresh, -1
        for j, gt in enumerate(gt_lists[ei]):
            if used[ei][j]:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            used[ei][best_j] = True
            tp[i] = 1.0
    if not pooled:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(pooled) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[tp == 1].sum() / n_gt)


def predict_all(
    store: ParamStore, cfg: ModelConfig, examples: Sequence[GroundedExample]
) -> list[Prediction]:
    return [
        forward(store, cfg, ex.scene, tokens_to_ids(ex.tokens, cfg.vocab))
        for ex in examples
    ]


def _referred_target(ex: GroundedExample) -> Box:
    targets = [a for a in ex.annotations if a.referred]
    if len(targets) != 1 or len(targets[0].boxes) != 1:
        raise ValueError(
            f"example {ex.example_id!r} does not have exactly one target box"
        )
    return targets[0].boxes[0]


def refexp_accuracy(
    examples: Sequence[GroundedExample],
    predictions: Sequence[Prediction],
    protocol: str = "objectness",
) -> float:
    """Top-1 accuracy at IoU >= 0.5 against the single referred box."""
    if not examples:
        raise ValueError("empty dataset")
    if protocol not in ("objectness", "referred"):
        raise ValueError(f"unknown ranking protocol {protocol!r}")
    rank = rank_by_objectness if protocol == "objectness" else rank_by_referred
    hits = 0
    for ex, pred in zip(examples, predictions):
        target = _referred_target(ex)
        top = rank(pred).top(1)[0]
        hits += iou(top, target) >= 0.5
    return hits / len(examples)


def predicted_answer(pred: Prediction, cfg: ModelConfig) -> tuple[str, str]:
    """(predicted type, predicted answer) for one prediction.

    With per-type heads the type classifier picks which head answers;
    with the single-head variant the argmax over the joined answer list
    determines both."""
    if cfg.single_qa_head:
        single_answers = [
            (name, a) for name, _ in cfg.qa_types for a in ANSWER_VOCABS[name]
        ]
        idx = int(np.argmax(pred.qa_logits["single"].data[0]))
        return single_answers[idx]
    type_names = [name for name, _ in cfg.qa_types]
    ptype = type_names[int(np.argmax(pred.qa_logits["type"].data[0]))]
    idx = int(np.argmax(pred.qa_logits[ptype].data[0]))
    return ptype, ANSWER_VOCABS[ptype][idx]


def qa_accuracy(
    examples: Sequence[GroundedExample],
    predictions: Sequence[Prediction],
    cfg: ModelConfig,
) -> dict[str, float]:
    """Exact-match accuracy, overall and per question type.

    A wrong predicted type counts as wrong even when the answer string
    matches (the single-head variant has no separate type prediction,
    so only the answer is compared there)."""
    if not examples:
        raise ValueError("empty dataset")
    type_names = [name for name, _ in cfg.qa_types]

    correct: dict[str, list[bool]] = {}
    for ex, pred in zip(examples, predictions):
        if ex.qa is None:
            raise ValueError(f"example {ex.example_id!r} has no question")
        ptype, answer = predicted_answer(pred, cfg)
        ok = answer == ex.qa.answer
        if not cfg.single_qa_head:
            ok = ok and ptype == ex.qa.qa_type
        correct.setdefault(ex.qa.qa_type, []).append(ok)

    out = {"overall": float(np.mean([v for vs in correct.values() for v in vs]))}
    for name in type_names:
        if name in correct:
            out[name] = float(np.mean(correct[name]))
    return out


def detection_report(
    store: ParamStore,
    cfg: ModelConfig,
    examples: Sequence[GroundedExample],
    protocol: str = "ANY",
    ks: tuple[int, ...] = (1, 5, 10),
) -> dict:
    """JSON-ready summary over a mixed caption/question dataset."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    captions = [ex for ex in examples if ex.qa is None]
    questions = [ex for ex in examples if ex.qa is not None]

    report: dict = {"protocol": protocol, "num_examples": len(examples)}
    if captions:
        preds = predict_all(store, cfg, captions)
        hits: dict[int, list[bool]] = {k: [] for k in ks}
        for ex, pred in zip(captions, preds):
            for ann in ex.annotations:
                if not ann.boxes:
                    continue
                ranked = rank_by_span_mass(pred, ann.span)
                for k in ks:
                    hits[k].append(
                        recall_at_k(ranked, ann.boxes, k, protocol=protocol)
                    )
        for k in ks:
            report[f"recall@{k}"] = float(np.mean(hits[k])) if hits[k] else None
        gt_lists = [[b for a in ex.annotations for b in a.boxes] for ex in captions]
        report["ap"] = class_agnostic_ap([rank_by_objectness(p) for p in preds], gt_lists)
        single_target = [
            (ex, pred)
            for ex, pred in zip(captions, preds)
            if sum(a.referred for a in ex.annotations) == 1
            and all(len(a.boxes) == 1 for a in ex.annotations if a.referred)
        ]
        if single_target:
            report["refexp_acc"] = refexp_accuracy(
                [e for e, _ in single_target], [p for _, p in single_target]
            )
        else:
            report["refexp_acc"] = None
    else:
        for k in ks:
            report[f"recall@{k}"] = None
        report["ap"] = None
        report["refexp_acc"] = None

    if questions and cfg.qa_types:
        report["qa"] = qa_accuracy(questions, predict_all(store, cfg, questions), cfg)
    else:
        report["qa"] = None
    return report
