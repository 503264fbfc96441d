"""Text-conditioned detection model over synthetic scenes.

The encoder runs a small post-LN transformer over the concatenation of
grid-cell scene features and embedded text tokens, so every scene cell
can attend to every word.  A decoder refines a fixed set of learned
object queries (plus one query per question type and a type query)
against that memory and emits, per object query: a box, a distribution
over token positions plus a trailing no-object column, a contrastive
embedding, and a referred-object logit.  Question answers come from the
extra queries.

Parameters live in a flat name -> Tensor store; names end in ".w" for
multiplicative weights and ".b" for biases, which the tests rely on.
Checkpoints are a simple binary record stream and load back bitwise.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .synthdata import ANSWER_VOCABS, COLORS, SHAPES, SIZES, Scene, build_vocab

SCENE_FEATURE_DIM = 1 + len(COLORS) + len(SHAPES) + len(SIZES)

_CHECKPOINT_MAGIC = b"MDET"
_CHECKPOINT_VERSION = 1


def _default_qa_types() -> tuple[tuple[str, int], ...]:
    return tuple((name, len(answers)) for name, answers in ANSWER_VOCABS.items())


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 25
    max_tokens: int = 32
    grid_size: int = 8
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    n_heads: int = 4
    contrastive_dim: int = 32
    vocab: dict[str, int] = field(default_factory=build_vocab)
    qa_types: tuple[tuple[str, int], ...] = field(default_factory=_default_qa_types)
    binary_token_head: bool = False
    single_qa_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name, value in (
            ("num_queries", self.num_queries),
            ("max_tokens", self.max_tokens),
            ("grid_size", self.grid_size),
            ("d_model", self.d_model),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("contrastive_dim", self.contrastive_dim),
        ):
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.vocab.get("<pad>", -1) != 0:
            raise ValueError("vocab must map '<pad>' to id 0")

    @property
    def ffn_dim(self) -> int:
        return 2 * self.d_model

    @property
    def token_columns(self) -> int:
        return 2 if self.binary_token_head else self.max_tokens + 1

    @property
    def n_extra_queries(self) -> int:
        if not self.qa_types:
            return 0
        return 1 if self.single_qa_head else len(self.qa_types) + 1


def _param_table(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    """(name, shape, kind, fan_in) rows in a fixed creation order."""
    d, f = cfg.d_model, cfg.ffn_dim
    rows: list[tuple[str, tuple[int, ...], str, int]] = []

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        rows.append((f"{name}.w", (fan_in, fan_out), "lin_w", fan_in))
        rows.append((f"{name}.b", (fan_out,), "lin_b", fan_in))

    def ln(name: str) -> None:
        rows.append((f"{name}.w", (d,), "ln_w", 0))
        rows.append((f"{name}.b", (d,), "ln_b", 0))

    def embed(name: str, shape: tuple[int, ...]) -> None:
        rows.append((name, shape, "embed", 0))

    embed("token_embed", (len(cfg.vocab), d))
    embed("pos_text", (cfg.max_tokens, d))
    linear("scene_proj", SCENE_FEATURE_DIM, d)
    embed("pos_row", (cfg.grid_size, d))
    embed("pos_col", (cfg.grid_size, d))
    for i in range(cfg.encoder_layers):
        for nm in ("q", "k", "v", "o"):
            linear(f"enc{i}.{nm}", d, d)
        ln(f"enc{i}.ln1")
        linear(f"enc{i}.ffn1", d, f)
        linear(f"enc{i}.ffn2", f, d)
        ln(f"enc{i}.ln2")
    embed("query_embed", (cfg.num_queries, d))
    if cfg.n_extra_queries:
        embed("qa_query_embed", (cfg.n_extra_queries, d))
    for i in range(cfg.decoder_layers):
        for nm in ("q", "k", "v", "o"):
            linear(f"dec{i}.self.{nm}", d, d)
        ln(f"dec{i}.ln1")
        for nm in ("q", "k", "v", "o"):
            linear(f"dec{i}.cross.{nm}", d, d)
        ln(f"dec{i}.ln2")
        linear(f"dec{i}.ffn1", d, f)
        linear(f"dec{i}.ffn2", f, d)
        ln(f"dec{i}.ln3")
    linear("box1", d, d)
    linear("box2", d, d)
    linear("box3", d, 4)
    linear("token_head", d, cfg.token_columns)
    linear("contrast_obj", d, cfg.contrastive_dim)
    linear("contrast_tok", d, cfg.contrastive_dim)
    linear("referred", d, 1)
    if cfg.qa_types:
        if cfg.single_qa_head:
            linear("qa_single", d, sum(n for _, n in cfg.qa_types))
        else:
            for name, n_answers in cfg.qa_types:
                linear(f"qa_{name}", d, n_answers)
            linear("qa_type", d, len(cfg.qa_types))
    return rows


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, shape, _, _ in _param_table(cfg)}


class ParamStore:
    """Named parameter tensors plus an EMA shadow of their values."""

    def __init__(self, params: dict[str, Tensor], ema: dict[str, np.ndarray] | None = None):
        self.params = params
        if ema is None:
            ema = {k: v.data.copy() for k, v in params.items()}
        self.ema = ema

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def ema_store(self) -> "ParamStore":
        """Inference-time view over the averaged weights."""
        frozen = {k: Tensor(v.copy()) for k, v in self.ema.items()}
        return ParamStore(frozen, ema={k: v.copy() for k, v in self.ema.items()})


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameters: uniform +-1/sqrt(fan_in) linear maps, N(0, 0.02)
    embeddings, identity layer norms.  Bitwise deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind, fan_in in _param_table(cfg):
        if kind in ("lin_w", "lin_b"):
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ln_w":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(np.ascontiguousarray(data), requires_grad=True)
    return ParamStore(params)


# --- featurization ------------------------------------------------------------


def scene_features(scene: Scene, grid_size: int) -> np.ndarray:
    """(G*G, 12) handcrafted cell features, row-major cell order.

    Each cell reports the covered fraction and attribute one-hots of the
    object with the largest intersection (ties to the lowest object
    index), or zeros when nothing overlaps it."""
    g = grid_size
    feats = np.zeros((g * g, SCENE_FEATURE_DIM))
    if not scene.objects:
        return feats
    boxes = np.array([o.box.to_xyxy() for o in scene.objects])
    edges = np.arange(g + 1) / g
    cell_area = 1.0 / (g * g)
    # cell k = r * g + c covers [edges[c], edges[c+1]] x [edges[r], edges[r+1]]
    x0 = np.tile(edges[:-1], g)[:, None]
    x1 = np.tile(edges[1:], g)[:, None]
    y0 = np.repeat(edges[:-1], g)[:, None]
    y1 = np.repeat(edges[1:], g)[:, None]
    iw = np.minimum(boxes[:, 2], x1) - np.maximum(boxes[:, 0], x0)
    ih = np.minimum(boxes[:, 3], y1) - np.maximum(boxes[:, 1], y0)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    best = np.argmax(inter, axis=1)  # ties to the lowest object index
    covered = inter[np.arange(g * g), best] > 0
    cells = np.flatnonzero(covered)
    feats[cells, 0] = inter[cells, best[cells]] / cell_area
    for k in cells:
        o = scene.objects[best[k]]
        feats[k, 1 + COLORS.index(o.color)] = 1.0
        feats[k, 1 + len(COLORS) + SHAPES.index(o.shape)] = 1.0
        feats[k, 1 + len(COLORS) + len(SHAPES) + SIZES.index(o.size)] = 1.0
    return feats


def encode_scene(scene: Scene, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Project cell features and add learned row/column positions."""
    g = cfg.grid_size
    feats = Tensor(scene_features(scene, g))
    x = ag.add(ag.matmul(feats, store["scene_proj.w"]), store["scene_proj.b"])
    rows = np.repeat(np.arange(g), g)
    cols = np.tile(np.arange(g), g)
    pos = ag.add(
        ag.gather_rows(store["pos_row"], rows), ag.gather_rows(store["pos_col"], cols)
    )
    return ag.add(x, pos)


def encode_text(
    token_ids: Sequence[int], store: ParamStore, cfg: ModelConfig
) -> tuple[Tensor, np.ndarray, int]:
    """Embedded text padded to max_tokens.

    Returns (embeddings (L, d), real-token mask (L,), real count).
    Padding uses id 0; padded positions are masked out of attention by
    the caller and carry no supervision."""
    ids = list(token_ids)
    vocab_size = len(cfg.vocab)
    for i in ids:
        if not 0 <= i < vocab_size:
            raise ValueError(f"unknown id {i}")
    if len(ids) > cfg.max_tokens:
        warnings.warn(
            f"text of {len(ids)} tokens truncated to {cfg.max_tokens}", stacklevel=2
        )
        ids = ids[: cfg.max_tokens]
    n_real = len(ids)
    padded = np.zeros(cfg.max_tokens, dtype=int)
    padded[:n_real] = ids
    mask = np.zeros(cfg.max_tokens, dtype=bool)
    mask[:n_real] = True
    emb = ag.add(ag.gather_rows(store["token_embed"], padded), store["pos_text"])
    return emb, mask, n_real


# --- transformer blocks -------------------------------------------------------


def _linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return ag.add(ag.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def _layer_norm(x: Tensor, store: ParamStore, name: str) -> Tensor:
    normed = ag.layer_norm(x)
    return ag.add(ag.mul(normed, store[f"{name}.w"]), store[f"{name}.b"])


def _split_heads(x: Tensor, n_heads: int, dh: int) -> Tensor:
    rows = x.data.shape[0]
    return ag.swap_axes(ag.reshape(x, (rows, n_heads, dh)), 0, 1)


def _attention(
    x_q: Tensor,
    x_kv: Tensor,
    store: ParamStore,
    prefix: str,
    n_heads: int,
    mask_add: np.ndarray | None,
) -> Tensor:
    d = x_q.data.shape[-1]
    dh = d // n_heads
    n_q = x_q.data.shape[0]
    # heads run as one stacked (n_heads, rows, dh) batch
    q = _split_heads(_linear(x_q, store, f"{prefix}.q"), n_heads, dh)
    k = _split_heads(_linear(x_kv, store, f"{prefix}.k"), n_heads, dh)
    v = _split_heads(_linear(x_kv, store, f"{prefix}.v"), n_heads, dh)
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / np.sqrt(dh))
    if mask_add is not None:
        scores = ag.add(scores, Tensor(mask_add))
    mixed = ag.matmul(ag.softmax_rows(scores), v)
    out = ag.reshape(ag.swap_axes(mixed, 0, 1), (n_q, d))
    return _linear(out, store, f"{prefix}.o")


def _ffn(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    hidden = ag.relu(_linear(x, store, f"{prefix}.ffn1"))
    return _linear(hidden, store, f"{prefix}.ffn2")


def _encoder_layer(x: Tensor, store, prefix: str, n_heads: int, mask_add) -> Tensor:
    x = _layer_norm(ag.add(x, _attention(x, x, store, prefix, n_heads, mask_add)),
                    store, f"{prefix}.ln1")
    return _layer_norm(ag.add(x, _ffn(x, store, prefix)), store, f"{prefix}.ln2")


def _decoder_layer(q: Tensor, memory: Tensor, store, prefix: str, n_heads: int,
                   cross_mask: np.ndarray | None) -> Tensor:
    q = _layer_norm(ag.add(q, _attention(q, q, store, f"{prefix}.self", n_heads, None)),
                    store, f"{prefix}.ln1")
    q = _layer_norm(
        ag.add(q, _attention(q, memory, store, f"{prefix}.cross", n_heads, cross_mask)),
        store, f"{prefix}.ln2")
    return _layer_norm(ag.add(q, _ffn(q, store, prefix)), store, f"{prefix}.ln3")


def _normalize_rows(x: Tensor, dim: int) -> Tensor:
    """Unit-normalize rows so contrastive dots stay bounded; zero rows
    pass through as zeros."""
    sq = ag.mul(x, x)
    rowsum = ag.matmul(sq, Tensor(np.ones((dim, 1))))
    inv = ag.exp(ag.scale(ag.log(ag.add(rowsum, Tensor(1e-12))), -0.5))
    return ag.mul(x, ag.matmul(inv, Tensor(np.ones((1, dim)))))


# --- prediction ---------------------------------------------------------------


@dataclass
class Prediction:
    """Per-example model outputs; fields are autograd tensors so losses
    can run straight on them, use `.data` for plain arrays."""

    boxes: Tensor  # (N, 4) in [0, 1]
    token_dists: Tensor  # (N, token_columns), rows on the simplex
    obj_embs: Tensor  # (N, contrastive_dim), unit rows
    tok_embs: Tensor  # (max_tokens, contrastive_dim), unit rows
    referred_logits: Tensor  # (N, 1)
    qa_logits: dict[str, Tensor]  # per-type rows (1, n_answers) plus "type"
    token_mask: np.ndarray  # (max_tokens,) True at real tokens
    n_tokens: int

    def validate(self, cfg: ModelConfig) -> None:
        n, l1 = cfg.num_queries, cfg.token_columns
        if self.boxes.data.shape != (n, 4):
            raise ValueError(f"boxes shape {self.boxes.data.shape}")
        if self.token_dists.data.shape != (n, l1):
            raise ValueError(f"token_dists shape {self.token_dists.data.shape}")
        if not (self.boxes.data >= 0).all() or not (self.boxes.data <= 1).all():
            raise ValueError("boxes out of [0, 1]")
        rows = self.token_dists.data.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ValueError("token distribution rows do not sum to 1")


def forward(
    store: ParamStore, cfg: ModelConfig, scene: Scene, token_ids: Sequence[int]
) -> Prediction:
    g2 = cfg.grid_size * cfg.grid_size
    length = cfg.max_tokens
    x_scene = encode_scene(scene, store, cfg)
    x_text, mask, n_real = encode_text(token_ids, store, cfg)
    x = ag.concat([x_scene, x_text], axis=0)

    s_total = g2 + length
    key_bias = np.zeros(s_total)
    key_bias[g2:][~mask] = -1e9
    enc_mask = np.broadcast_to(key_bias, (s_total, s_total)).copy()
    for i in range(cfg.encoder_layers):
        x = _encoder_layer(x, store, f"enc{i}", cfg.n_heads, enc_mask)
    memory = x

    queries = [store["query_embed"]]
    if cfg.n_extra_queries:
        queries.append(store["qa_query_embed"])
    q = ag.concat(queries, axis=0) if len(queries) > 1 else queries[0]
    n_q = cfg.num_queries + cfg.n_extra_queries
    cross_mask = np.broadcast_to(key_bias, (n_q, s_total)).copy()
    for i in range(cfg.decoder_layers):
        q = _decoder_layer(q, memory, store, f"dec{i}", cfg.n_heads, cross_mask)

    obj = ag.slice_axis(q, 0, 0, cfg.num_queries)
    boxes = ag.sigmoid(
        _linear(ag.relu(_linear(ag.relu(_linear(obj, store, "box1")), store, "box2")),
                store, "box3")
    )
    token_dists = ag.softmax_rows(_linear(obj, store, "token_head"))
    obj_embs = _normalize_rows(_linear(obj, store, "contrast_obj"), cfg.contrastive_dim)
    text_memory = ag.slice_axis(memory, 0, g2, g2 + length)
    tok_embs = _normalize_rows(
        _linear(text_memory, store, "contrast_tok"), cfg.contrastive_dim
    )
    referred_logits = _linear(obj, store, "referred")

    qa_logits: dict[str, Tensor] = {}
    if cfg.qa_types:
        base = cfg.num_queries
        if cfg.single_qa_head:
            row = ag.slice_axis(q, 0, base, base + 1)
            qa_logits["single"] = _linear(row, store, "qa_single")
        else:
            for t, (name, _) in enumerate(cfg.qa_types):
                row = ag.slice_axis(q, 0, base + t, base + t + 1)
                qa_logits[name] = _linear(row, store, f"qa_{name}")
            type_row = ag.slice_axis(q, 0, base + len(cfg.qa_types),
                                     base + len(cfg.qa_types) + 1)
            qa_logits["type"] = _linear(type_row, store, "qa_type")

    return Prediction(
        boxes=boxes,
        token_dists=token_dists,
        obj_embs=obj_embs,
        tok_embs=tok_embs,
        referred_logits=referred_logits,
        qa_logits=qa_logits,
        token_mask=mask,
        n_tokens=n_real,
    )


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    """Binary records: magic, version, then (name, rank, dims, f64 data)
    per tensor; EMA values follow under an "ema/" name prefix."""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", _CHECKPOINT_VERSION))
        entries = [(name, t.data) for name, t in store.params.items()]
        entries += [(f"ema/{name}", arr) for name, arr in store.ema.items()]
        for name, arr in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def load_checkpoint(path: str | Path, cfg: ModelConfig) -> ParamStore:
    """Read a checkpoint and validate every tensor against the config's
    expected shapes."""
    expected = expected_shapes(cfg)
    raw: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
            raw[name] = data.reshape(shape).astype(np.float64)

    params: dict[str, Tensor] = {}
    ema: dict[str, np.ndarray] = {}
    for name, arr in raw.items():
        base = name[4:] if name.startswith("ema/") else name
        if base not in expected:
            raise ValueError(f"unexpected tensor {name!r} in checkpoint")
        if arr.shape != expected[base]:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                f"config wants {expected[base]}"
            )
        if name.startswith("ema/"):
            ema[base] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:3]}")
    if set(ema) != set(expected):
        raise ValueError("checkpoint missing EMA tensors")
    ordered = {name: params[name] for name in expected}
    return ParamStore(ordered, ema={name: ema[name] for name in expected})


# --- config sidecar ------------------------------------------------------------


def config_to_json(cfg: ModelConfig) -> str:
    record = {
        "num_queries": cfg.num_queries,
        "max_tokens": cfg.max_tokens,
        "grid_size": cfg.grid_size,
        "d_model": cfg.d_model,
        "encoder_layers": cfg.encoder_layers,
        "decoder_layers": cfg.decoder_layers,
        "n_heads": cfg.n_heads,
        "contrastive_dim": cfg.contrastive_dim,
        "vocab": cfg.vocab,
        "qa_types": [[name, n] for name, n in cfg.qa_types],
        "binary_token_head": cfg.binary_token_head,
        "single_qa_head": cfg.single_qa_head,
    }
    return json.dumps(record, indent=2, sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    record = json.loads(text)
    return ModelConfig(
        num_queries=record["num_queries"],
        max_tokens=record["max_tokens"],
        grid_size=record["grid_size"],
        d_model=record["d_model"],
        encoder_layers=record["encoder_layers"],
        decoder_layers=record["decoder_layers"],
        n_heads=record["n_heads"],
        contrastive_dim=record["contrastive_dim"],
        vocab={k: int(v) for k, v in record["vocab"].items()},
        qa_types=tuple((name, int(n)) for name, n in record["qa_types"]),
        binary_token_head=record["binary_token_head"],
        single_qa_head=record["single_qa_head"],
    )
