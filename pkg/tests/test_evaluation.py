"""Ranking, recall protocols, average precision, refexp and QA accuracy."""

import json

import numpy as np
import pytest

from modet.autograd import Tensor
from modet.evaluation import (
    RankedBoxes,
    class_agnostic_ap,
    detection_report,
    predict_all,
    qa_accuracy,
    rank_by_objectness,
    rank_by_referred,
    rank_by_span_mass,
    recall_at_k,
    refexp_accuracy,
)
from modet.geometry import Box, from_xyxy, iou
from modet.model import ModelConfig, Prediction, init_params
from modet.synthdata import (
    ANSWER_VOCABS,
    Annotation,
    GroundedExample,
    QA,
    Scene,
    SceneObject,
    generate_dataset,
    tokenize,
)


def fake_pred(boxes, token_dists, referred=None, qa_logits=None):
    boxes = np.asarray(boxes, dtype=float)
    dists = np.asarray(token_dists, dtype=float)
    n = len(boxes)
    if referred is None:
        referred = np.zeros((n, 1))
    return Prediction(
        boxes=Tensor(boxes),
        token_dists=Tensor(dists),
        obj_embs=Tensor(np.zeros((n, 2))),
        tok_embs=Tensor(np.zeros((4, 2))),
        referred_logits=Tensor(np.asarray(referred, dtype=float).reshape(n, 1)),
        qa_logits=qa_logits or {},
        token_mask=np.ones(4, dtype=bool),
        n_tokens=4,
    )


def simplex_rows(rng, n, cols):
    raw = rng.uniform(0.1, 1.0, size=(n, cols))
    return raw / raw.sum(axis=1, keepdims=True)


BOX_A = [0.2, 0.2, 0.1, 0.1]
BOX_B = [0.7, 0.7, 0.1, 0.1]


class TestRanking:
    def test_objectness_scores(self):
        dists = [[0.0, 0.0, 0.0, 1.0], [0.5, 0.5, 0.0, 0.0], [0.2, 0.2, 0.2, 0.4]]
        pred = fake_pred([BOX_A, BOX_B, BOX_A], dists)
        ranked = rank_by_objectness(pred)
        scores = [s for _, s in ranked.entries]
        assert scores == pytest.approx([1.0, 0.6, 0.0])
        # all-no-object query lands last
        assert ranked.entries[-1][1] == 0.0

    def test_objectness_tie_break_by_index(self):
        dists = [[0.5, 0.0, 0.0, 0.5], [0.0, 0.5, 0.0, 0.5]]
        pred = fake_pred([BOX_A, BOX_B], dists)
        ranked = rank_by_objectness(pred)
        assert ranked.entries[0][0] == Box(*BOX_A)
        assert ranked.entries[1][0] == Box(*BOX_B)

    def test_span_mass_scores(self):
        dists = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.3, 0.3, 0.4]]
        pred = fake_pred([BOX_A, BOX_B], dists)
        ranked = rank_by_span_mass(pred, (0, 1))
        assert ranked.entries[0] == (Box(*BOX_A), 1.0)
        assert ranked.entries[1][1] == 0.0

    def test_span_mass_uniform_rows_keep_index_order(self):
        dists = np.full((3, 4), 0.25)
        pred = fake_pred([BOX_A, BOX_B, BOX_A], dists)
        ranked = rank_by_span_mass(pred, (1, 3))
        assert [b for b, _ in ranked.entries] == [Box(*BOX_A), Box(*BOX_B), Box(*BOX_A)]

    def test_disjoint_spans_partition_objectness(self):
        rng = np.random.default_rng(0)
        dists = simplex_rows(rng, 6, 9)  # 8 positions + no-object
        pred = fake_pred([BOX_A] * 6, dists)
        spans = ((0, 3), (3, 5), (5, 8))
        # every query keeps the same rank-position score mass in total:
        # summing its three span scores must recover 1 - P(no-object)
        per_query = np.zeros(6)
        for span in spans:
            scores = sorted(
                (s for _, s in rank_by_span_mass(pred, span).entries), reverse=True
            )
            assert scores == sorted(
                dists[:, span[0]:span[1]].sum(axis=1).tolist(), reverse=True
            )
            per_query += dists[:, span[0]:span[1]].sum(axis=1)
        np.testing.assert_allclose(per_query, 1.0 - dists[:, -1], atol=1e-12)

    def test_span_validation(self):
        pred = fake_pred([BOX_A], [[0.5, 0.3, 0.1, 0.1]])
        with pytest.raises(ValueError, match="span"):
            rank_by_span_mass(pred, (2, 2))
        with pytest.raises(ValueError, match="span"):
            rank_by_span_mass(pred, (0, 4))  # would include the no-object column

    def test_referred_ranking_monotone_in_logits(self):
        pred = fake_pred(
            [BOX_A, BOX_B, BOX_A], [[0.5, 0.5]] * 3, referred=[[-2.0], [3.0], [0.5]]
        )
        ranked = rank_by_referred(pred)
        assert [b for b, _ in ranked.entries] == [Box(*BOX_B), Box(*BOX_A), Box(*BOX_A)]
        scores = [s for _, s in ranked.entries]
        assert scores[0] == pytest.approx(1 / (1 + np.exp(-3.0)))

    def test_ranked_boxes_validation(self):
        with pytest.raises(ValueError, match="descending"):
            RankedBoxes(entries=((Box(*BOX_A), 0.1), (Box(*BOX_B), 0.9)))
        with pytest.raises(ValueError, match="finite"):
            RankedBoxes(entries=((Box(*BOX_A), float("nan")),))


def ranked_of(boxes, scores):
    order = np.argsort(-np.asarray(scores), kind="stable")
    return RankedBoxes(
        entries=tuple((boxes[i], float(scores[i])) for i in order)
    )


class TestRecall:
    def test_exact_match_hits_both_protocols(self):
        gt = [Box(*BOX_A)]
        ranked = ranked_of([Box(*BOX_A)], [1.0])
        assert recall_at_k(ranked, gt, 1, "ANY")
        assert recall_at_k(ranked, gt, 1, "MERGED")

    def test_far_apart_boxes_split_protocols(self):
        # prediction equals one gt corner box; the enclosing box covers
        # the whole canvas and overlaps it at IoU 0.04
        gt = [from_xyxy(0, 0, 0.2, 0.2), from_xyxy(0.8, 0.8, 1, 1)]
        ranked = ranked_of([from_xyxy(0, 0, 0.2, 0.2)], [1.0])
        assert recall_at_k(ranked, gt, 1, "ANY")
        assert not recall_at_k(ranked, gt, 1, "MERGED")

    def test_threshold_is_strict(self):
        gt = [Box(0.125, 0.125, 0.25, 0.25)]
        pred = Box(0.125, 0.0625, 0.25, 0.125)  # IoU exactly 0.5
        assert iou(pred, gt[0]) == 0.5
        assert not recall_at_k(ranked_of([pred], [1.0]), gt, 1, "ANY")

    def test_k_beyond_length_uses_full_list(self):
        gt = [Box(*BOX_B)]
        ranked = ranked_of([Box(*BOX_A), Box(*BOX_B)], [0.9, 0.1])
        assert not recall_at_k(ranked, gt, 1)
        assert recall_at_k(ranked, gt, 50)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            boxes = [
                Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2)
                for _ in range(6)
            ]
            gt = [Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2)]
            ranked = ranked_of(boxes, rng.uniform(0, 1, size=6))
            hits = [recall_at_k(ranked, gt, k) for k in range(1, 7)]
            assert all(a <= b for a, b in zip(hits, hits[1:]))

    def test_singleton_gt_protocols_agree(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            boxes = [
                Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.3, 0.3)
                for _ in range(4)
            ]
            gt = [Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.3, 0.3)]
            ranked = ranked_of(boxes, rng.uniform(0, 1, size=4))
            for k in (1, 2, 4):
                assert recall_at_k(ranked, gt, k, "ANY") == recall_at_k(
                    ranked, gt, k, "MERGED"
                )

    def test_require_all_variant(self):
        gt = [Box(*BOX_A), Box(*BOX_B)]
        ranked = ranked_of([Box(*BOX_A), Box(*BOX_B)], [0.9, 0.8])
        assert recall_at_k(ranked, gt, 1, "ANY")
        assert not recall_at_k(ranked, gt, 1, "ANY", require_all=True)
        assert recall_at_k(ranked, gt, 2, "ANY", require_all=True)

    def test_validation(self):
        ranked = ranked_of([Box(*BOX_A)], [1.0])
        with pytest.raises(ValueError, match="ground-truth"):
            recall_at_k(ranked, [], 1)
        with pytest.raises(ValueError, match="k must be"):
            recall_at_k(ranked, [Box(*BOX_A)], 0)
        with pytest.raises(ValueError, match="protocol"):
            recall_at_k(ranked, [Box(*BOX_A)], 1, "SOME")


def oracle_ap(ranked_lists, gt_lists, thresh=0.5):
    """All-point interpolated AP computed from the explicit PR point set."""
    pooled = []
    for ei, ranked in enumerate(ranked_lists):
        for ri, (box, score) in enumerate(ranked.entries):
            pooled.append((score, ei, ri, box))
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    n_gt = sum(len(g) for g in gt_lists)
    used = {(ei, j): False for ei, g in enumerate(gt_lists) for j in range(len(g))}
    points = []
    tp = 0
    for rank, (_, ei, _, box) in enumerate(pooled, start=1):
        cands = [
            (iou(box, g), j)
            for j, g in enumerate(gt_lists[ei])
            if not used[(ei, j)] and iou(box, g) > thresh
        ]
        if cands:
            best = max(cands, key=lambda t: (t[0], -t[1]))
            used[(ei, best[1])] = True
            tp += 1
        points.append((tp / n_gt, tp / rank))
    area = 0.0
    prev_r = 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev_r:
            continue
        p_env = max(p for r2, p in points if r2 >= r)
        area += (r - prev_r) * p_env
        prev_r = r
    return area


class TestAveragePrecision:
    def test_single_exact_prediction(self):
        ranked = [ranked_of([Box(*BOX_A)], [0.9])]
        assert class_agnostic_ap(ranked, [[Box(*BOX_A)]]) == 1.0

    def test_distractor_first_lowers_ap(self):
        good = ranked_of([Box(*BOX_A), Box(*BOX_B)], [0.9, 0.5])
        assert class_agnostic_ap([good], [[Box(*BOX_A)]]) == 1.0
        flipped = ranked_of([Box(*BOX_A), Box(*BOX_B)], [0.5, 0.9])
        assert class_agnostic_ap([flipped], [[Box(*BOX_A)]]) == 0.5

    def test_duplicate_detection_is_false_positive(self):
        ranked = ranked_of([Box(*BOX_A), Box(*BOX_A)], [0.9, 0.8])
        # second prediction has no unused gt left; precision at rank 2 drops
        assert class_agnostic_ap([ranked], [[Box(*BOX_A)]]) == 1.0
        ranked_low = ranked_of([Box(*BOX_A), Box(*BOX_A), Box(*BOX_B)], [0.9, 0.8, 0.7])
        gt = [[Box(*BOX_A), Box(*BOX_B)]]
        # hits at ranks 1 and 3 -> AP = (1 + 2/3) / 2
        assert class_agnostic_ap([ranked_low], gt) == pytest.approx((1 + 2 / 3) / 2)

    def test_score_transform_invariance(self):
        rng = np.random.default_rng(3)
        boxes = [Box(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), 0.2, 0.2) for _ in range(5)]
        gt = [[boxes[1], boxes[3]]]
        scores = rng.uniform(0.1, 0.9, size=5)
        base = class_agnostic_ap([ranked_of(boxes, scores)], gt)
        for transform in (lambda s: 2 * s + 1, np.tanh, lambda s: s**3):
            assert class_agnostic_ap([ranked_of(boxes, transform(scores))], gt) == base

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            n_ex = int(rng.integers(1, 4))
            ranked_lists, gt_lists = [], []
            for _ in range(n_ex):
                n_pred = int(rng.integers(1, 6))
                boxes = [
                    Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.25, 0.25)
                    for _ in range(n_pred)
                ]
                ranked_lists.append(ranked_of(boxes, rng.uniform(0, 1, size=n_pred)))
                n_gt = int(rng.integers(0, 3))
                gt_lists.append(
                    [
                        Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.25, 0.25)
                        for _ in range(n_gt)
                    ]
                )
            if sum(len(g) for g in gt_lists) == 0:
                continue
            got = class_agnostic_ap(ranked_lists, gt_lists)
            want = oracle_ap(ranked_lists, gt_lists)
            assert got == pytest.approx(want, abs=1e-12)

    def test_validation(self):
        ranked = [ranked_of([Box(*BOX_A)], [1.0])]
        with pytest.raises(ValueError, match="ground-truth"):
            class_agnostic_ap(ranked, [[]])
        with pytest.raises(ValueError, match="length"):
            class_agnostic_ap(ranked, [[Box(*BOX_A)], [Box(*BOX_B)]])


def scene_fixture():
    return Scene(
        objects=(
            SceneObject("circle", "red", "small", Box(*BOX_A)),
            SceneObject("square", "blue", "small", Box(*BOX_B)),
        )
    )


def caption_example(example_id="e0", referred_box=Box(*BOX_A)):
    text = "the red circle"
    return GroundedExample(
        example_id,
        scene_fixture(),
        text,
        tokenize(text),
        (Annotation(span=(1, 3), boxes=(referred_box,)),),
    )


class TestRefexp:
    def test_perfect_prediction(self):
        ex = caption_example()
        pred = fake_pred([BOX_A, BOX_B], [[0.9, 0.0, 0.0, 0.1], [0.0, 0.0, 0.0, 1.0]])
        assert refexp_accuracy([ex], [pred]) == 1.0

    def test_iou_exactly_half_counts(self):
        target = Box(0.125, 0.125, 0.25, 0.25)
        ex = caption_example(referred_box=target)
        half = [0.125, 0.0625, 0.25, 0.125]
        pred = fake_pred([half], [[1.0, 0.0, 0.0, 0.0]])
        assert iou(Box(*half), target) == 0.5
        assert refexp_accuracy([ex], [pred]) == 1.0

    def test_referred_protocol_uses_referred_head(self):
        ex = caption_example()
        # objectness prefers the wrong box, referred logits the right one
        pred = fake_pred(
            [BOX_B, BOX_A],
            [[0.9, 0.0, 0.0, 0.1], [0.0, 0.0, 0.0, 1.0]],
            referred=[[-4.0], [4.0]],
        )
        assert refexp_accuracy([ex], [pred], protocol="objectness") == 0.0
        assert refexp_accuracy([ex], [pred], protocol="referred") == 1.0

    def test_degenerate_fixed_box_model(self):
        rng = np.random.default_rng(5)
        fixed = Box(0.5, 0.5, 0.3, 0.3)
        examples, preds = [], []
        for i in range(40):
            target = Box(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), 0.3, 0.3)
            examples.append(caption_example(f"e{i}", referred_box=target))
            preds.append(fake_pred([fixed.as_array()], [[1.0, 0.0, 0.0, 0.0]]))
        expected = np.mean([iou(fixed, ex.annotations[0].boxes[0]) >= 0.5 for ex in examples])
        assert refexp_accuracy(examples, preds) == pytest.approx(expected)

    def test_multi_target_rejected(self):
        scene = scene_fixture()
        text = "the red circles"
        ex = GroundedExample(
            "m",
            scene,
            text,
            tokenize(text),
            (Annotation(span=(1, 3), boxes=(Box(*BOX_A), Box(*BOX_B))),),
        )
        pred = fake_pred([BOX_A], [[1.0, 0.0, 0.0, 0.0]])
        with pytest.raises(ValueError, match="exactly one target"):
            refexp_accuracy([ex], [pred])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            refexp_accuracy([], [])
        with pytest.raises(ValueError, match="protocol"):
            refexp_accuracy([caption_example()], [None], protocol="magic")


def qa_example(qa_type, answer, example_id="q0"):
    text = "how many red circles"
    return GroundedExample(
        example_id,
        scene_fixture(),
        text,
        tokenize(text),
        (),
        qa=QA(qa_type, answer),
    )


def qa_logits_for(cfg, type_name, answer, type_correct=True):
    logits = {}
    type_names = [n for n, _ in cfg.qa_types]
    for name, n_answers in cfg.qa_types:
        row = np.zeros((1, n_answers))
        if name == type_name:
            row[0, ANSWER_VOCABS[name].index(answer)] = 5.0
        logits[name] = Tensor(row)
    trow = np.zeros((1, len(type_names)))
    idx = type_names.index(type_name)
    trow[0, idx if type_correct else (idx + 1) % len(type_names)] = 5.0
    logits["type"] = Tensor(trow)
    return logits


class TestQAAccuracy:
    def setup_method(self):
        self.cfg = ModelConfig()

    def pred_for(self, qa_type, answer, type_correct=True):
        return fake_pred(
            [BOX_A],
            [[1.0, 0.0, 0.0, 0.0]],
            qa_logits=qa_logits_for(self.cfg, qa_type, answer, type_correct),
        )

    def test_oracle_logits_score_one(self):
        examples = [
            qa_example("count", "2", "a"),
            qa_example("exist", "yes", "b"),
            qa_example("attr", "red", "c"),
        ]
        preds = [self.pred_for(ex.qa.qa_type, ex.qa.answer) for ex in examples]
        result = qa_accuracy(examples, preds, self.cfg)
        assert result["overall"] == 1.0
        assert result["count"] == result["exist"] == result["attr"] == 1.0

    def test_wrong_type_dispatch_counts_wrong(self):
        ex = qa_example("count", "2")
        pred = self.pred_for("count", "2", type_correct=False)
        assert qa_accuracy([ex], [pred], self.cfg)["overall"] == 0.0

    def test_per_type_fractions_average_to_overall(self):
        examples = [
            qa_example("count", "1", "a"),
            qa_example("count", "2", "b"),
            qa_example("count", "3", "c"),
            qa_example("exist", "yes", "d"),
            qa_example("exist", "no", "e"),
        ]
        preds = [
            self.pred_for("count", "1"),
            self.pred_for("count", "2"),
            self.pred_for("count", "8"),  # wrong answer
            self.pred_for("exist", "yes"),
            self.pred_for("exist", "yes"),  # wrong answer
        ]
        result = qa_accuracy(examples, preds, self.cfg)
        assert result["count"] == pytest.approx(2 / 3)
        assert result["exist"] == pytest.approx(1 / 2)
        weighted = (result["count"] * 3 + result["exist"] * 2) / 5
        assert result["overall"] == pytest.approx(weighted)

    def test_single_head_variant(self):
        cfg = ModelConfig(single_qa_head=True)
        joined = [(n, a) for n, _ in cfg.qa_types for a in ANSWER_VOCABS[n]]
        row = np.zeros((1, len(joined)))
        row[0, joined.index(("exist", "yes"))] = 3.0
        pred = fake_pred([BOX_A], [[1.0, 0.0, 0.0, 0.0]],
                         qa_logits={"single": Tensor(row)})
        assert qa_accuracy([qa_example("exist", "yes")], [pred], cfg)["overall"] == 1.0
        assert qa_accuracy([qa_example("exist", "no")], [pred], cfg)["overall"] == 0.0

    def test_missing_question_rejected(self):
        with pytest.raises(ValueError, match="no question"):
            qa_accuracy([caption_example()], [self.pred_for("count", "2")], self.cfg)


class TestReport:
    def test_report_shape_and_serializability(self):
        cfg = ModelConfig(
            num_queries=5, max_tokens=8, grid_size=4, d_model=8, encoder_layers=1,
            decoder_layers=1, n_heads=2, contrastive_dim=4,
        )
        store = init_params(cfg, seed=0)
        captions, questions = generate_dataset(6, seed=8)
        report = detection_report(store, cfg, captions + questions, protocol="ANY")
        assert report["protocol"] == "ANY"
        assert report["num_examples"] == 12
        for key in ("recall@1", "recall@5", "recall@10", "ap", "refexp_acc", "qa"):
            assert key in report
        assert 0.0 <= report["ap"] <= 1.0
        assert 0.0 <= report["qa"]["overall"] <= 1.0
        json.dumps(report)  # must be JSON-ready

    def test_protocol_validation(self):
        cfg = ModelConfig(num_queries=3, max_tokens=8, grid_size=4, d_model=8,
                          encoder_layers=1, decoder_layers=1, n_heads=2,
                          contrastive_dim=4)
        with pytest.raises(ValueError, match="protocol"):
            detection_report(init_params(cfg, 0), cfg, [], protocol="weird")

    def test_predict_all_matches_manual_forward(self):
        cfg = ModelConfig(num_queries=3, max_tokens=8, grid_size=4, d_model=8,
                          encoder_layers=1, decoder_layers=1, n_heads=2,
                          contrastive_dim=4)
        store = init_params(cfg, seed=1)
        captions, _ = generate_dataset(3, seed=2)
        preds = predict_all(store, cfg, captions)
        assert len(preds) == 3
        for p in preds:
            p.validate(cfg)
