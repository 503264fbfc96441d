"""Synthetic 2-D scenes with grounded captions and questions.

Scenes hold 2..8 colored shapes whose boxes pairwise overlap at IoU of
at most 0.2.  Captions come from three closed templates (singular with a
uniquely identifying attribute subset, plural binding every match,
relational binding a subject and a reference object) and record exact
token spans for every box they mention, so span supervision is perfect
by construction.  Questions cover counting, existence, and attribute
lookup; the objects a question mentions are annotated the same way.

The combination pass packs mutually compatible captions of one scene
into longer texts (no cross-phrase box pair above GIoU 0.5, under 250
characters), and the dedup pass collapses examples whose normalized
texts coincide.  Everything is a pure function of (seed, config); the
JSONL round trip is byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, giou, iou

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow", "purple", "gray")
SIZES = ("small", "large")
RELATIONS = ("left of", "right of", "above", "below")

STOPWORDS = frozenset({"the", "a", "an", "is", "there", "of"})
_PUNCT = ".,!?;"

_TEMPLATE_WORDS = (
    ("the", "a", "is", "there", "what", "color", "how", "many", ".")
    + tuple(r.split()[0] for r in RELATIONS)
    + ("of",)
)


def build_vocab() -> dict[str, int]:
    """Static token map: padding is id 0, template words follow sorted."""
    words = sorted(
        set(SHAPES)
        | {s + "s" for s in SHAPES}
        | set(COLORS)
        | set(SIZES)
        | set(_TEMPLATE_WORDS)
    )
    vocab = {"<pad>": 0}
    for w in words:
        vocab[w] = len(vocab)
    return vocab


VOCAB = build_vocab()


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase whitespace split with trailing punctuation peeled off."""
    out: list[str] = []
    for raw in text.lower().split():
        tail: list[str] = []
        while raw and raw[-1] in _PUNCT:
            tail.append(raw[-1])
            raw = raw[:-1]
        if raw:
            out.append(raw)
        out.extend(reversed(tail))
    return tuple(out)


def tokens_to_ids(tokens: Sequence[str], vocab: dict[str, int]) -> tuple[int, ...]:
    try:
        return tuple(vocab[t] for t in tokens)
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    box: Box

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]


@dataclass(frozen=True)
class Annotation:
    """A token span and the boxes that phrase grounds to.

    `referred` marks whether the phrase is the one a referring
    expression asks for (relational captions also annotate the
    reference object, which is not the referred target)."""

    span: tuple[int, int]
    boxes: tuple[Box, ...]
    referred: bool = True

    def __post_init__(self):
        s, e = self.span
        if not 0 <= s < e:
            raise ValueError(f"bad span [{s}, {e})")


@dataclass(frozen=True)
class QA:
    qa_type: str
    answer: str

    def __post_init__(self):
        if self.qa_type not in ANSWER_VOCABS:
            raise ValueError(f"unknown qa type {self.qa_type!r}")
        if self.answer not in ANSWER_VOCABS[self.qa_type]:
            raise ValueError(f"answer {self.answer!r} not valid for {self.qa_type}")


ANSWER_VOCABS: dict[str, tuple[str, ...]] = {
    "count": tuple(str(i) for i in range(9)),
    "exist": ("no", "yes"),
    "attr": COLORS,
}
QA_TYPES = tuple(ANSWER_VOCABS)


@dataclass(frozen=True)
class GroundedExample:
    """One text over one scene; question examples carry a qa record."""

    example_id: str
    scene: Scene
    text: str
    tokens: tuple[str, ...]
    annotations: tuple[Annotation, ...]
    qa: QA | None = None

    def __post_init__(self):
        spans = sorted(a.span for a in self.annotations)
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ValueError(f"overlapping spans [{s0},{e0}) and [{s1},..)")
        for a in self.annotations:
            if a.span[1] > len(self.tokens):
                raise ValueError("span outside token range")
            if not a.boxes and self.qa is None:
                raise ValueError("caption annotation with no boxes")


@dataclass(frozen=True)
class GenConfig:
    min_objects: int = 2
    max_objects: int = 8
    max_pairwise_iou: float = 0.2
    small_range: tuple[float, float] = (0.08, 0.14)
    large_range: tuple[float, float] = (0.16, 0.24)
    max_attempts: int = 1000


def generate_scene(rng: np.random.Generator, cfg: GenConfig = GenConfig()) -> Scene:
    """Rejection-sample boxes until the pairwise-IoU cap holds."""
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        for attempt in range(cfg.max_attempts):
            size = SIZES[rng.integers(len(SIZES))]
            lo, hi = cfg.small_range if size == "small" else cfg.large_range
            w, h = (float(v) for v in rng.uniform(lo, hi, size=2))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            box = Box(cx, cy, w, h)
            if all(iou(box, o.box) <= cfg.max_pairwise_iou for o in objects):
                objects.append(SceneObject(shape=shape, color=color, size=size, box=box))
                break
        else:
            raise RuntimeError(f"object placement failed after {cfg.max_attempts} attempts")
    return Scene(objects=tuple(objects))


def _matches(obj: SceneObject, words: Iterable[str]) -> bool:
    return all(w in (obj.shape, obj.color, obj.size) for w in words)


def _singular_caption(scene: Scene, rng: np.random.Generator, example_id: str):
    candidates = []
    for obj in scene.objects:
        for desc in (
            (obj.shape,),
            (obj.color, obj.shape),
            (obj.size, obj.shape),
            (obj.size, obj.color, obj.shape),
        ):
            if sum(_matches(o, desc) for o in scene.objects) == 1:
                candidates.append((desc, obj))
    if not candidates:
        return None
    desc, obj = candidates[rng.integers(len(candidates))]
    text = "the " + " ".join(desc)
    tokens = tokenize(text)
    ann = Annotation(span=(1, len(tokens)), boxes=(obj.box,))
    return GroundedExample(example_id, scene, text, tokens, (ann,))


def _plural_caption(scene: Scene, rng: np.random.Generator, example_id: str):
    groups: dict[tuple[str, str], list[SceneObject]] = {}
    for obj in scene.objects:
        groups.setdefault((obj.color, obj.shape), []).append(obj)
    plural = [(k, v) for k, v in groups.items() if len(v) >= 2]
    if not plural:
        return None
    (color, shape), members = plural[rng.integers(len(plural))]
    text = f"the {color} {shape}s"
    tokens = tokenize(text)
    ann = Annotation(span=(1, 3), boxes=tuple(o.box for o in members))
    return GroundedExample(example_id, scene, text, tokens, (ann,))


def _relation_holds(subj: SceneObject, ref: SceneObject, rel: str, margin=0.05) -> bool:
    if rel == "left of":
        return subj.box.cx < ref.box.cx - margin
    if rel == "right of":
        return subj.box.cx > ref.box.cx + margin
    if rel == "above":
        return subj.box.cy < ref.box.cy - margin
    return subj.box.cy > ref.box.cy + margin


def _relational_caption(scene: Scene, rng: np.random.Generator, example_id: str):
    refs = [
        o
        for o in scene.objects
        if sum(p.color == o.color and p.shape == o.shape for p in scene.objects) == 1
    ]
    options = []
    for rel in RELATIONS:
        for ref in refs:
            subjects = [
                o for o in scene.objects if o is not ref and _relation_holds(o, ref, rel)
            ]
            by_shape: dict[str, list[SceneObject]] = {}
            for s in subjects:
                by_shape.setdefault(s.shape, []).append(s)
            for shape, members in by_shape.items():
                if len(members) == 1:
                    options.append((members[0], rel, ref))
    if not options:
        return None
    subj, rel, ref = options[rng.integers(len(options))]
    text = f"the {subj.shape} {rel} the {ref.color} {ref.shape}"
    tokens = tokenize(text)
    # [the, shape, rel0, of, the, color, shape] with two-word relations
    rel_len = len(rel.split())
    subj_ann = Annotation(span=(1, 2), boxes=(subj.box,), referred=True)
    ref_start = 3 + rel_len
    ref_ann = Annotation(span=(ref_start, ref_start + 2), boxes=(ref.box,), referred=False)
    return GroundedExample(example_id, scene, text, tokens, (subj_ann, ref_ann))


_CAPTION_TEMPLATES = (_singular_caption, _plural_caption, _relational_caption)


def generate_caption(
    scene: Scene, rng: np.random.Generator, example_id: str = "cap"
) -> GroundedExample:
    """Apply a randomly ordered template until one finds an unambiguous
    referent.  At least one template always applies: when no attribute
    subset singles out any object, some (color, shape) group has two
    members and the plural template binds it."""
    for idx in rng.permutation(len(_CAPTION_TEMPLATES)):
        result = _CAPTION_TEMPLATES[idx](scene, rng, example_id)
        if result is not None:
            return result
    raise RuntimeError("no caption template applies to this scene")


def _question_count(scene, rng, example_id):
    color = COLORS[rng.integers(len(COLORS))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    members = [o for o in scene.objects if o.color == color and o.shape == shape]
    text = f"how many {color} {shape}s"
    anns = (Annotation(span=(2, 4), boxes=tuple(o.box for o in members)),)
    return GroundedExample(
        example_id, scene, text, tokenize(text), anns, qa=QA("count", str(len(members)))
    )


def _question_exist(scene, rng, example_id):
    size = SIZES[rng.integers(len(SIZES))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    members = [o for o in scene.objects if o.size == size and o.shape == shape]
    text = f"is there a {size} {shape}"
    anns = (
        (Annotation(span=(3, 5), boxes=tuple(o.box for o in members)),) if members else ()
    )
    answer = "yes" if members else "no"
    return GroundedExample(
        example_id, scene, text, tokenize(text), anns, qa=QA("exist", answer)
    )


def _question_attr(scene, rng, example_id):
    unique = [
        o
        for o in scene.objects
        if sum(p.size == o.size and p.shape == o.shape for p in scene.objects) == 1
    ]
    if not unique:
        return None
    obj = unique[rng.integers(len(unique))]
    text = f"what color is the {obj.size} {obj.shape}"
    anns = (Annotation(span=(4, 6), boxes=(obj.box,)),)
    return GroundedExample(
        example_id, scene, text, tokenize(text), anns, qa=QA("attr", obj.color)
    )


def generate_question(
    scene: Scene, rng: np.random.Generator, example_id: str = "qa"
) -> GroundedExample:
    """Draw a question type; attribute questions need a unique referent
    and fall back to the other types when none exists."""
    kind = QA_TYPES[rng.integers(len(QA_TYPES))]
    if kind == "attr":
        result = _question_attr(scene, rng, example_id)
        if result is not None:
            return result
        kind = QA_TYPES[rng.integers(2)]  # count or exist
    if kind == "count":
        return _question_count(scene, rng, example_id)
    return _question_exist(scene, rng, example_id)


def generate_dataset(
    n_scenes: int, seed: int, cfg: GenConfig = GenConfig()
) -> tuple[list[GroundedExample], list[GroundedExample]]:
    """(captions, questions), one of each per scene, with independent
    per-scene RNG streams so generation order never matters."""
    captions, questions = [], []
    for idx, child in enumerate(np.random.SeedSequence(seed).spawn(n_scenes)):
        rng = np.random.default_rng(child)
        scene = generate_scene(rng, cfg)
        captions.append(generate_caption(scene, rng, example_id=f"s{idx:05d}/cap"))
        questions.append(generate_question(scene, rng, example_id=f"s{idx:05d}/qa"))
    return captions, questions


# --- combination and dedup ---------------------------------------------------


def _cross_conflict(a: GroundedExample, b: GroundedExample) -> bool:
    for ann_a in a.annotations:
        for ann_b in b.annotations:
            for ba in ann_a.boxes:
                for bb in ann_b.boxes:
                    if giou(ba, bb) > 0.5:
                        return True
    return False


def _concatenate(members: list[GroundedExample]) -> GroundedExample:
    if len(members) == 1:
        return members[0]
    text = ". ".join(m.text for m in members)
    tokens: list[str] = []
    annotations: list[Annotation] = []
    for i, m in enumerate(members):
        if i > 0:
            tokens.append(".")
        offset = len(tokens)
        tokens.extend(m.tokens)
        for ann in m.annotations:
            annotations.append(
                replace(ann, span=(ann.span[0] + offset, ann.span[1] + offset))
            )
    return GroundedExample(
        example_id="+".join(m.example_id for m in members),
        scene=members[0].scene,
        text=text,
        tokens=tuple(tokens),
        annotations=tuple(annotations),
    )


def combine_annotations(
    examples: Sequence[GroundedExample], max_chars: int = 250
) -> list[GroundedExample]:
    """Pack compatible captions of one scene into combined examples.

    Two captions conflict when any cross-caption box pair has GIoU above
    0.5; a greedy coloring (descending degree, smallest feasible color)
    separates conflicting captions, and each color class is split
    greedily so no output text reaches max_chars."""
    examples = list(examples)
    if not examples:
        return []
    scene = examples[0].scene
    for e in examples[1:]:
        if e.scene != scene:
            raise ValueError("combine requires examples over a single scene")
    if any(e.qa is not None for e in examples):
        raise ValueError("combine applies to captions, not question examples")

    n = len(examples)
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if _cross_conflict(examples[i], examples[j]):
                adj[i, j] = adj[j, i] = True

    colors = np.full(n, -1, dtype=int)
    for v in sorted(range(n), key=lambda v: (-int(adj[v].sum()), v)):
        taken = {int(colors[u]) for u in np.flatnonzero(adj[v]) if colors[u] >= 0}
        c = 0
        while c in taken:
            c += 1
        colors[v] = c

    out: list[GroundedExample] = []
    for c in range(int(colors.max()) + 1):
        group: list[GroundedExample] = []
        length = 0
        for v in np.flatnonzero(colors == c):
            ex = examples[int(v)]
            grown = length + 2 + len(ex.text) if group else len(ex.text)
            if group and grown >= max_chars:
                out.append(_concatenate(group))
                group, grown = [], len(ex.text)
            group.append(ex)
            length = grown
        if group:
            out.append(_concatenate(group))
    return out


def normalize_text(text: str) -> str:
    words = (w.strip(_PUNCT) for w in text.lower().split())
    return " ".join(w for w in words if w and w not in STOPWORDS)


def _boxes_overlap(a: GroundedExample, b: GroundedExample, thresh: float) -> bool:
    boxes_a = [box for ann in a.annotations for box in ann.boxes]
    boxes_b = [box for ann in b.annotations for box in ann.boxes]
    return any(iou(x, y) > thresh for x in boxes_a for y in boxes_b)


def _merge_boxes(into: GroundedExample, other: GroundedExample) -> GroundedExample:
    merged = tuple(
        replace(ann, boxes=ann.boxes + extra.boxes)
        for ann, extra in zip(into.annotations, other.annotations)
    )
    return replace(into, annotations=merged)


def dedup_merge(
    examples: Sequence[GroundedExample], iou_thresh: float = 0.7
) -> list[GroundedExample]:
    """Collapse examples whose normalized texts are equal: overlapping
    duplicates keep the first copy, non-overlapping ones merge their
    boxes.  Repeats until a fixpoint."""
    items = list(examples)
    changed = True
    while changed:
        changed = False
        out: list[GroundedExample] = []
        keys = []
        for ex in items:
            key = normalize_text(ex.text)
            partner = next(
                (
                    i
                    for i, k in enumerate(keys)
                    if k == key and len(out[i].annotations) == len(ex.annotations)
                ),
                None,
            )
            if partner is None:
                out.append(ex)
                keys.append(key)
            elif _boxes_overlap(out[partner], ex, iou_thresh):
                changed = True  # duplicate dropped
            else:
                out[partner] = _merge_boxes(out[partner], ex)
                changed = True
        items = out
    return items


# --- JSONL serialization ------------------------------------------------------


def _round9(x: float) -> float:
    return float(f"{x:.9g}")


def _box_list(b: Box) -> list[float]:
    return [_round9(b.cx), _round9(b.cy), _round9(b.w), _round9(b.h)]


def example_to_record(ex: GroundedExample) -> dict:
    record = {
        "id": ex.example_id,
        "scene": {
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size, "box": _box_list(o.box)}
                for o in ex.scene.objects
            ]
        },
        "text": ex.text,
        "tokens": list(ex.tokens),
        "annotations": [
            {
                "span": list(a.span),
                "boxes": [_box_list(b) for b in a.boxes],
                "referred": a.referred,
            }
            for a in ex.annotations
        ],
    }
    if ex.qa is not None:
        record["qa"] = {"type": ex.qa.qa_type, "answer": ex.qa.answer}
    return record


def record_to_example(record: dict) -> GroundedExample:
    scene = Scene(
        objects=tuple(
            SceneObject(o["shape"], o["color"], o["size"], Box(*o["box"]))
            for o in record["scene"]["objects"]
        )
    )
    annotations = tuple(
        Annotation(
            span=tuple(a["span"]),
            boxes=tuple(Box(*b) for b in a["boxes"]),
            referred=a.get("referred", True),
        )
        for a in record["annotations"]
    )
    qa = None
    if "qa" in record:
        qa = QA(qa_type=record["qa"]["type"], answer=record["qa"]["answer"])
    return GroundedExample(
        example_id=record["id"],
        scene=scene,
        text=record["text"],
        tokens=tuple(record["tokens"]),
        annotations=annotations,
        qa=qa,
    )


def write_jsonl(examples: Iterable[GroundedExample], path: str | Path) -> None:
    with open(path, "w", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[GroundedExample]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_to_example(json.loads(line)))
    return out
