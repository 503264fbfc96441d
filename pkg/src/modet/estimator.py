"""Scikit-learn style facade over dataset-in, detector-out training.

`ModulatedDetector` wraps config assembly, the two-stage curriculum,
and ranked-box inference behind fit/predict/transform/score with the
usual get_params/set_params parameter protocol.  It holds flat scalar
hyperparameters only; the underlying dataclass configs are built at
fit time.
"""

from __future__ import annotations

import inspect
from typing import Sequence

import numpy as np

from .evaluation import (
    RankedBoxes,
    class_agnostic_ap,
    predicted_answer,
    qa_accuracy,
    rank_by_objectness,
)
from .model import ModelConfig, ParamStore, forward
from .synthdata import GroundedExample, tokens_to_ids
from .training import TrainConfig, train


class NotFittedError(ValueError):
    """Raised when predict/transform/score run before fit."""


def check_is_fitted(estimator, attribute: str = "store_") -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )


def validate_examples(X, allow_empty: bool = False) -> list[GroundedExample]:
    """Materialize X and check every element is a grounded example."""
    if isinstance(X, GroundedExample):
        raise TypeError("X must be a sequence of examples, not a single example")
    examples = list(X)
    if not examples and not allow_empty:
        raise ValueError("X is empty")
    for i, ex in enumerate(examples):
        if not isinstance(ex, GroundedExample):
            raise TypeError(
                f"X[{i}] is {type(ex).__name__}, expected GroundedExample"
            )
    return examples


class ModulatedDetector:
    """Text-conditioned detector with an estimator interface.

    fit() consumes a mixed sequence of caption and question examples
    (split on `qa is None`), runs the curriculum, and stores the
    trained parameters on `store_`.  predict() returns per-example
    boxes ranked by objectness; transform() exposes the same as a
    dense (n, queries, 5) array of box coordinates plus score;
    score() is class-agnostic AP against the annotated boxes."""

    def __init__(
        self,
        num_queries: int = 25,
        max_tokens: int = 32,
        grid_size: int = 8,
        d_model: int = 64,
        encoder_layers: int = 2,
        decoder_layers: int = 2,
        n_heads: int = 4,
        contrastive_dim: int = 32,
        epochs: int = 10,
        qa_epochs: int | None = None,
        batch_size: int = 8,
        base_lr: float = 1e-4,
        lr_drop_epoch: int | None = None,
        lr_drop_factor: float = 0.1,
        text_peak_lr: float = 5e-5,
        warmup_frac: float = 0.01,
        weight_decay: float = 1e-4,
        ema_decay: float = 0.9998,
        qa_loss_weight: float = 2.0,
        no_contrastive: bool = False,
        binary_token_head: bool = False,
        no_curriculum: bool = False,
        single_qa_head: bool = False,
        eval_with_ema: bool = True,
        seed: int = 0,
    ):
        self.num_queries = num_queries
        self.max_tokens = max_tokens
        self.grid_size = grid_size
        self.d_model = d_model
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.n_heads = n_heads
        self.contrastive_dim = contrastive_dim
        self.epochs = epochs
        self.qa_epochs = qa_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_drop_epoch = lr_drop_epoch
        self.lr_drop_factor = lr_drop_factor
        self.text_peak_lr = text_peak_lr
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.qa_loss_weight = qa_loss_weight
        self.no_contrastive = no_contrastive
        self.binary_token_head = binary_token_head
        self.no_curriculum = no_curriculum
        self.single_qa_head = single_qa_head
        self.eval_with_ema = eval_with_ema
        self.seed = seed

    # --- parameter protocol ---------------------------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "ModulatedDetector":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        defaults = {
            name: p.default
            for name, p in inspect.signature(type(self).__init__).parameters.items()
            if name != "self"
        }
        shown = ", ".join(
            f"{k}={v!r}"
            for k, v in self.get_params().items()
            if v != defaults[k]
        )
        return f"{type(self).__name__}({shown})"

    # --- config assembly --------------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            num_queries=self.num_queries,
            max_tokens=self.max_tokens,
            grid_size=self.grid_size,
            d_model=self.d_model,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            n_heads=self.n_heads,
            contrastive_dim=self.contrastive_dim,
            binary_token_head=self.binary_token_head,
            single_qa_head=self.single_qa_head,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            qa_epochs=self.qa_epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            lr_drop_epoch=self.lr_drop_epoch,
            lr_drop_factor=self.lr_drop_factor,
            text_peak_lr=self.text_peak_lr,
            warmup_frac=self.warmup_frac,
            weight_decay=self.weight_decay,
            ema_decay=self.ema_decay,
            seed=self.seed,
            qa_loss_weight=self.qa_loss_weight,
            no_contrastive=self.no_contrastive,
            binary_token_head=self.binary_token_head,
            no_curriculum=self.no_curriculum,
            single_qa_head=self.single_qa_head,
        )

    # --- estimator API -----------------------------------------------------------

    def fit(self, X, y=None) -> "ModulatedDetector":
        """Train on a mixed caption/question sequence; y is unused."""
        examples = validate_examples(X)
        captions = [ex for ex in examples if ex.qa is None]
        questions = [ex for ex in examples if ex.qa is not None]
        data = {"detect_full": captions, "qa": questions}
        store, metrics = train(
            self._model_config(), data, self._train_config(), eval_every=0
        )
        self.model_config_ = self._model_config()
        self.store_ = store
        self.train_metrics_ = metrics
        return self

    def _inference_store(self) -> ParamStore:
        return self.store_.ema_store() if self.eval_with_ema else self.store_

    def _predict_one(self, store: ParamStore, ex: GroundedExample):
        ids = tokens_to_ids(ex.tokens, self.model_config_.vocab)
        return forward(store, self.model_config_, ex.scene, ids)

    def predict(self, X) -> list[RankedBoxes]:
        """Objectness-ranked boxes for each example."""
        check_is_fitted(self)
        store = self._inference_store()
        return [
            rank_by_objectness(self._predict_one(store, ex))
            for ex in validate_examples(X)
        ]

    def transform(self, X) -> np.ndarray:
        """(n_examples, num_queries, 5) array: cx, cy, w, h, objectness."""
        check_is_fitted(self)
        examples = validate_examples(X)
        store = self._inference_store()
        out = np.zeros((len(examples), self.num_queries, 5))
        for i, ex in enumerate(examples):
            ranked = rank_by_objectness(self._predict_one(store, ex))
            for j, (box, score) in enumerate(ranked.entries):
                out[i, j] = (box.cx, box.cy, box.w, box.h, score)
        return out

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform(X)

    def predict_answers(self, X) -> list[str]:
        """Predicted answer string for each question example."""
        check_is_fitted(self)
        store = self._inference_store()
        answers = []
        for ex in validate_examples(X):
            if ex.qa is None:
                raise ValueError(f"example {ex.example_id!r} has no question")
            _, answer = predicted_answer(
                self._predict_one(store, ex), self.model_config_
            )
            answers.append(answer)
        return answers

    def score(self, X, y=None) -> float:
        """Class-agnostic AP over the annotated boxes of X."""
        check_is_fitted(self)
        examples = [ex for ex in validate_examples(X) if ex.qa is None]
        if not examples:
            raise ValueError("score needs at least one caption example")
        store = self._inference_store()
        ranked = [rank_by_objectness(self._predict_one(store, ex)) for ex in examples]
        gt = [[b for a in ex.annotations for b in a.boxes] for ex in examples]
        return class_agnostic_ap(ranked, gt)

    def score_qa(self, X) -> dict[str, float]:
        """Exact-match answer accuracy, overall and per type."""
        check_is_fitted(self)
        examples = validate_examples(X)
        store = self._inference_store()
        preds = [self._predict_one(store, ex) for ex in examples]
        return qa_accuracy(examples, preds, self.model_config_)
