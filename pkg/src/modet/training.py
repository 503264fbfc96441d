"""Optimization: AdamW, EMA shadow weights, schedules, and the two-stage
training loop.

Stage one trains detection losses on the single-reference caption
subset; stage two continues on the full caption set plus questions,
adding the answer cross-entropy.  Two learning-rate groups exist: the
text embedding tables follow a warmup-then-linear-decay schedule, and
everything else holds a constant rate with one optional step drop.
Evaluation snapshots always use the EMA weights.  Runs are bitwise
deterministic in (seed, config, data).
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .evaluation import class_agnostic_ap, predict_all, qa_accuracy, rank_by_objectness
from .losses import (
    LossConfig,
    alignment_from_assignment,
    box_losses,
    contrastive_alignment_loss,
    soft_token_loss,
    total_loss,
)
from .matching import CostWeights, GroundTruthObject, build_cost_matrix, hungarian
from .model import (
    ModelConfig,
    ParamStore,
    config_to_json,
    forward,
    init_params,
    save_checkpoint,
)
from .synthdata import ANSWER_VOCABS, GroundedExample, tokens_to_ids

TEXT_GROUP = ("token_embed", "pos_text")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    qa_epochs: int | None = None  # stage-2 epochs; None mirrors `epochs`
    batch_size: int = 8
    base_lr: float = 1e-4
    lr_drop_epoch: int | None = None
    lr_drop_factor: float = 0.1
    text_peak_lr: float = 5e-5
    warmup_frac: float = 0.01
    weight_decay: float = 1e-4
    ema_decay: float = 0.9998
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    cost: CostWeights = field(default_factory=CostWeights)
    qa_loss_weight: float = 2.0
    no_contrastive: bool = False
    binary_token_head: bool = False
    no_curriculum: bool = False
    single_qa_head: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        for name, value in (("base_lr", self.base_lr), ("text_peak_lr", self.text_peak_lr)):
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.qa_loss_weight < 0:
            raise ValueError("qa_loss_weight must be >= 0")

    @property
    def stage2_epochs(self) -> int:
        return self.epochs if self.qa_epochs is None else self.qa_epochs


# --- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: Mapping[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float | Mapping[str, float],
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update.

    Decoupled weight decay shrinks the parameter before the
    bias-corrected Adam delta is applied.  `lr` is a single rate or a
    per-tensor mapping."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name!r}")
        rate = lr[name] if isinstance(lr, Mapping) else lr
        if weight_decay:
            p.data *= 1.0 - rate * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= rate * m_hat / (np.sqrt(v_hat) + eps)


def ema_update(
    shadow: dict[str, np.ndarray], params: Mapping[str, Tensor], decay: float
) -> dict[str, np.ndarray]:
    """shadow <- decay * shadow + (1 - decay) * params, tensor by tensor."""
    if set(shadow) != set(params):
        raise ValueError("EMA shadow and parameter names do not match")
    for name, p in params.items():
        shadow[name] *= decay
        shadow[name] += (1 - decay) * p.data
    return shadow


def lr_at(
    step: int,
    group: str,
    cfg: TrainConfig,
    total_steps: int,
    steps_per_epoch: int,
) -> float:
    """Learning rate for a group at a global step.

    main: constant base rate, dropped once by lr_drop_factor at
    lr_drop_epoch.  text: linear warmup to the peak over the first 1%
    of steps, then linear decay reaching 0 at total_steps."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if group == "main":
        epoch = step // steps_per_epoch
        if cfg.lr_drop_epoch is not None and epoch >= cfg.lr_drop_epoch:
            return cfg.base_lr * cfg.lr_drop_factor
        return cfg.base_lr
    if group == "text":
        warmup = max(1, round(cfg.warmup_frac * total_steps))
        if step <= warmup:
            return cfg.text_peak_lr * step / warmup
        return cfg.text_peak_lr * (total_steps - step) / (total_steps - warmup)
    raise ValueError(f"unknown lr group {group!r}")


# --- per-example loss ------------------------------------------------------------


def example_targets(
    ex: GroundedExample, model_cfg: ModelConfig
) -> list[GroundTruthObject]:
    """One target per annotated box, with its span's token positions.
    Positions beyond the token budget are dropped (truncation parity
    with the encoder); a target whose whole span is cut is skipped."""
    limit = min(len(ex.tokens), model_cfg.max_tokens)
    targets = []
    for ann in ex.annotations:
        positions = tuple(p for p in range(ann.span[0], ann.span[1]) if p < limit)
        if not positions:
            continue
        for box in ann.boxes:
            targets.append(GroundTruthObject(box=box, positive_positions=positions))
    return targets


def _binary_targets(targets: Sequence[GroundTruthObject]) -> list[GroundTruthObject]:
    # the 2-column head has one "object" column at position 0
    return [replace(t, positive_positions=(0,)) for t in targets]


def _ce_row(logits: Tensor, index: int) -> Tensor:
    probs = ag.softmax_rows(logits)
    picked = ag.slice_axis(probs, 1, index, index + 1)
    return ag.scale(ag.tensor_sum(ag.log(ag.add(picked, Tensor(1e-300)))), -1.0)


def qa_answer_index(ex: GroundedExample, model_cfg: ModelConfig) -> tuple[int, int]:
    """(type index, answer index within the dispatched head)."""
    type_names = [n for n, _ in model_cfg.qa_types]
    t_idx = type_names.index(ex.qa.qa_type)
    a_idx = ANSWER_VOCABS[ex.qa.qa_type].index(ex.qa.answer)
    return t_idx, a_idx


def qa_loss(pred, ex: GroundedExample, model_cfg: ModelConfig) -> Tensor:
    t_idx, a_idx = qa_answer_index(ex, model_cfg)
    if model_cfg.single_qa_head:
        offset = sum(n for _, n in model_cfg.qa_types[:t_idx])
        return _ce_row(pred.qa_logits["single"], offset + a_idx)
    type_ce = _ce_row(pred.qa_logits["type"], t_idx)
    answer_ce = _ce_row(pred.qa_logits[ex.qa.qa_type], a_idx)
    return ag.add(type_ce, answer_ce)


def example_loss(
    store: ParamStore,
    model_cfg: ModelConfig,
    ex: GroundedExample,
    cfg: TrainConfig,
    use_qa: bool,
) -> tuple[Tensor, dict[str, float]]:
    """Total loss for one example under the active tape, plus a float
    breakdown for logging."""
    pred = forward(store, model_cfg, ex.scene, tokens_to_ids(ex.tokens, model_cfg.vocab))
    text_targets = example_targets(ex, model_cfg)
    breakdown: dict[str, float] = {}
    parts: list[Tensor] = []

    if text_targets:
        match_targets = (
            _binary_targets(text_targets) if model_cfg.binary_token_head else text_targets
        )
        cost = build_cost_matrix(
            pred.boxes.data, pred.token_dists.data, match_targets, cfg.cost
        )
        assignment = hungarian(cost)
        tok = soft_token_loss(
            pred.token_dists, assignment, match_targets, cfg.loss.no_object_weight
        )
        l1, gl = box_losses(pred.boxes, assignment, text_targets)
        if cfg.no_contrastive or pred.n_tokens == 0:
            align = Tensor(0.0)
        else:
            matched = np.array([q for q, _ in assignment.pairs], dtype=int)
            obj = ag.gather_rows(pred.obj_embs, matched)
            toks = ag.slice_axis(pred.tok_embs, 0, 0, pred.n_tokens)
            pos = alignment_from_assignment(assignment, text_targets, pred.n_tokens)
            align = contrastive_alignment_loss(obj, toks, pos, cfg.loss.temperature).loss
        detection, det_breakdown = total_loss(tok, l1, gl, align, cfg.loss)
        parts.append(detection)
        breakdown.update(det_breakdown)

    if use_qa and ex.qa is not None and model_cfg.qa_types:
        qa = ag.scale(qa_loss(pred, ex, model_cfg), cfg.qa_loss_weight)
        parts.append(qa)
        breakdown["qa"] = qa.item()

    if not parts:
        raise ValueError(f"example {ex.example_id!r} produced no supervision")
    total = parts[0]
    for part in parts[1:]:
        total = ag.add(total, part)
    breakdown["total"] = total.item()
    return total, breakdown


# --- training loop ----------------------------------------------------------------


def single_reference_subset(examples: Sequence[GroundedExample]) -> list[GroundedExample]:
    """Captions that bind exactly one box through exactly one phrase."""
    return [
        ex
        for ex in examples
        if ex.qa is None
        and len(ex.annotations) == 1
        and len(ex.annotations[0].boxes) == 1
    ]


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stage, epoch)))


def _evaluate(store: ParamStore, model_cfg: ModelConfig, eval_captions, eval_questions):
    ema = store.ema_store()
    ap = None
    if eval_captions:
        preds = predict_all(ema, model_cfg, eval_captions)
        gt_lists = [
            [b for a in ex.annotations for b in a.boxes] for ex in eval_captions
        ]
        ap = class_agnostic_ap([rank_by_objectness(p) for p in preds], gt_lists)
    qa_acc = None
    if eval_questions and model_cfg.qa_types:
        preds = predict_all(ema, model_cfg, eval_questions)
        qa_acc = qa_accuracy(eval_questions, preds, model_cfg)["overall"]
    return ap, qa_acc


def train(
    model_cfg: ModelConfig,
    data: Mapping[str, Sequence[GroundedExample]],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    eval_data: Mapping[str, Sequence[GroundedExample]] | None = None,
    eval_every: int = 1,
    checkpoint_every: int = 0,
) -> tuple[ParamStore, list[dict]]:
    """Run the curriculum and return (trained store, per-epoch metrics).

    `data` holds "detect_full" captions plus optional "detect_simple"
    and "qa" lists; the single-reference subset is derived when absent.
    `eval_data` ("captions"/"questions") feeds the per-epoch AP and QA
    metrics; without it a small slice of the training data is used."""
    model_cfg = replace(
        model_cfg,
        binary_token_head=cfg.binary_token_head,
        single_qa_head=cfg.single_qa_head,
    )
    detect_full = list(data.get("detect_full", ()))
    qa_data = list(data.get("qa", ()))
    if not detect_full and not qa_data:
        raise ValueError("training needs a nonempty dataset")
    detect_simple = list(data.get("detect_simple", ())) or single_reference_subset(
        detect_full
    ) or detect_full

    stage2_pool = detect_full + qa_data
    if cfg.no_curriculum:
        stages = [(2, stage2_pool, cfg.epochs + cfg.stage2_epochs, bool(qa_data))]
    elif qa_data:
        stages = [
            (1, detect_simple, cfg.epochs, False),
            (2, stage2_pool, cfg.stage2_epochs, True),
        ]
    else:
        stages = [
            (1, detect_simple, cfg.epochs, False),
            (2, stage2_pool, cfg.stage2_epochs, False),
        ]

    if eval_data is not None:
        eval_captions = list(eval_data.get("captions", ()))
        eval_questions = list(eval_data.get("questions", ()))
    else:
        eval_captions = detect_full[:50]
        eval_questions = qa_data[:50]

    steps_per_epoch = [
        max(1, -(-len(ds) // cfg.batch_size)) for _, ds, _, _ in stages
    ]
    total_steps = sum(
        spe * n_epochs for spe, (_, _, n_epochs, _) in zip(steps_per_epoch, stages)
    )

    store = init_params(model_cfg, cfg.seed)
    state = init_adam_state(store.params)
    zero_grads = {k: np.zeros_like(t.data) for k, t in store.params.items()}
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.json").write_text(config_to_json(model_cfg))

    metrics: list[dict] = []
    global_step = 0
    global_epoch = 0
    best_ap = -np.inf

    for stage, dataset, n_epochs, use_qa in stages:
        for epoch in range(n_epochs):
            order = _epoch_rng(cfg.seed, stage, epoch).permutation(len(dataset))
            sums: dict[str, float] = defaultdict(float)
            counts: dict[str, int] = defaultdict(int)
            for start in range(0, len(dataset), cfg.batch_size):
                batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
                with Tape() as tape:
                    totals = []
                    for ex in batch:
                        value, breakdown = example_loss(store, model_cfg, ex, cfg, use_qa)
                        totals.append(value)
                        for key, val in breakdown.items():
                            sums[key] += val
                            counts[key] += 1
                    batch_total = totals[0]
                    for value in totals[1:]:
                        batch_total = ag.add(batch_total, value)
                    batch_total = ag.scale(batch_total, 1.0 / len(totals))
                    tape.backward(batch_total)
                grads = {
                    name: (t.grad if t.grad is not None else zero_grads[name])
                    for name, t in store.params.items()
                }
                # main group: constant with one drop, resolved on the true
                # global epoch since stages have different epoch lengths
                lr_main = cfg.base_lr
                if cfg.lr_drop_epoch is not None and global_epoch >= cfg.lr_drop_epoch:
                    lr_main *= cfg.lr_drop_factor
                lr_text = lr_at(global_step, "text", cfg, total_steps, 1)
                lrs = {
                    name: lr_text if name in TEXT_GROUP else lr_main
                    for name in store.params
                }
                adamw_step(store.params, grads, state, lrs, cfg.weight_decay)
                store.zero_grads()
                ema_update(store.ema, store.params, cfg.ema_decay)
                global_step += 1

            record: dict = {
                "epoch": global_epoch,
                "stage": stage,
                "loss": {k: sums[k] / counts[k] for k in sorted(sums)},
            }
            if eval_every > 0 and (
                (global_epoch + 1) % eval_every == 0
                or epoch == n_epochs - 1
            ):
                ap, qa_acc = _evaluate(store, model_cfg, eval_captions, eval_questions)
                record["ap"] = ap
                record["qa_acc"] = qa_acc
                if out_path is not None and ap is not None and ap > best_ap:
                    best_ap = ap
                    save_checkpoint(store, out_path / "best.ckpt")
            else:
                record["ap"] = None
                record["qa_acc"] = None
            metrics.append(record)
            if (
                out_path is not None
                and checkpoint_every > 0
                and (global_epoch + 1) % checkpoint_every == 0
            ):
                save_checkpoint(store, out_path / f"epoch{global_epoch:03d}.ckpt")
            global_epoch += 1

    if out_path is not None:
        save_checkpoint(store, out_path / "last.ckpt")
        with open(out_path / "metrics.jsonl", "w", newline="\n") as fh:
            for record in metrics:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return store, metrics
