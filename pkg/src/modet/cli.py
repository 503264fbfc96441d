"""Batch entry points: dataset generation, combination, training,
evaluation, inference, and gradient validation.

Every command resolves its configuration as defaults, then key=value
pairs from --config, then explicit flags, and writes a manifest beside
its outputs recording the resolved configuration, the seed, the paths,
and the tool version.  Replaying a manifest reruns the command with the
stored configuration and reproduces the outputs byte for byte.

Exit codes: 0 on success, 1 when inputs or results fail validation or
tolerance checks, 2 for usage errors.  Diagnostics go to standard
error; only `infer` rankings and the `gradcheck` table use stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .evaluation import (
    detection_report,
    rank_by_objectness,
    rank_by_referred,
    rank_by_span_mass,
)
from .gradcheck import run_suite
from .model import (
    ModelConfig,
    config_from_json,
    forward,
    load_checkpoint,
)
from .synthdata import (
    GenConfig,
    GroundedExample,
    Scene,
    SceneObject,
    combine_annotations,
    dedup_merge,
    generate_dataset,
    read_jsonl,
    tokenize,
    tokens_to_ids,
    write_jsonl,
)
from .geometry import Box, giou
from .training import TrainConfig, train


class UsageError(Exception):
    """Bad flags, unknown keys, malformed values, missing files."""


class ValidationFailure(Exception):
    """Input data or results violate a contract or tolerance."""


# --- configuration plumbing -----------------------------------------------------

GEN_DEFAULTS: dict[str, object] = {
    "scenes": 1000,
    "seed": 0,
    "min_objects": GenConfig.min_objects,
    "max_objects": GenConfig.max_objects,
    "max_pairwise_iou": GenConfig.max_pairwise_iou,
}

_MODEL_KEYS = (
    "num_queries",
    "max_tokens",
    "grid_size",
    "d_model",
    "encoder_layers",
    "decoder_layers",
    "n_heads",
    "contrastive_dim",
)

_TRAIN_KEYS = (
    "epochs",
    "qa_epochs",
    "batch_size",
    "base_lr",
    "lr_drop_epoch",
    "lr_drop_factor",
    "text_peak_lr",
    "warmup_frac",
    "weight_decay",
    "ema_decay",
    "seed",
    "qa_loss_weight",
    "no_contrastive",
    "binary_token_head",
    "no_curriculum",
    "single_qa_head",
)

TRAIN_DEFAULTS: dict[str, object] = {
    **{k: getattr(ModelConfig(), k) for k in _MODEL_KEYS},
    **{k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
    "no_object_weight": TrainConfig().loss.no_object_weight,
}

EVAL_DEFAULTS: dict[str, object] = {"protocol": "any", "use_ema": True}

INFER_DEFAULTS: dict[str, object] = {"rank": "objectness", "top": 5, "use_ema": True}

GRADCHECK_DEFAULTS: dict[str, object] = {"op_seeds": 5, "model_seed": 5}

COMBINE_DEFAULTS: dict[str, object] = {"max_chars": 250, "dedup_iou": 0.7}

# keys whose value may be the literal string "none"
_OPTIONAL_INTS = {"qa_epochs", "lr_drop_epoch"}


def _coerce(key: str, text: str, default: object) -> object:
    if key in _OPTIONAL_INTS and text.lower() == "none":
        return None
    kind = int if key in _OPTIONAL_INTS else type(default)
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise UsageError(f"bad value {text!r} for {key}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment, blanks skipped."""
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        out[key] = value
    return out


def resolve_config(
    defaults: dict[str, object],
    config_path: str | None,
    flag_values: dict[str, str | None],
) -> dict[str, object]:
    """defaults, overridden by file entries, overridden by flags."""
    resolved = dict(defaults)
    if config_path is not None:
        for key, value in read_config_file(config_path).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, value, defaults[key])
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = _coerce(key, value, defaults[key])
    return resolved


def worker_cap() -> int:
    """Parallelism ceiling from MODET_THREADS (>= 1, default 1)."""
    raw = os.environ.get("MODET_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"MODET_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise UsageError(f"MODET_THREADS must be >= 1, got {cap}")
    return cap


# --- manifests -------------------------------------------------------------------


def manifest_path(anchor: str | Path) -> Path:
    """DIR/manifest.json for directories, FILE.manifest.json otherwise."""
    anchor = Path(anchor)
    if anchor.is_dir():
        return anchor / "manifest.json"
    return anchor.with_name(anchor.name + ".manifest.json")


def write_manifest(
    command: str,
    config: dict[str, object],
    inputs: dict[str, str],
    outputs: dict[str, str],
    anchor: str | Path,
) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    path = manifest_path(anchor)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def replay_manifest(path: str | Path) -> int:
    """Rerun the recorded command; outputs land at the recorded paths."""
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest: {exc}") from None
    for key in ("command", "config", "inputs", "outputs"):
        if key not in manifest:
            raise UsageError(f"manifest missing {key!r}")
    command = manifest["command"]
    if command not in _COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    return _COMMANDS[command](manifest["config"], manifest["inputs"], manifest["outputs"])


# --- commands ---------------------------------------------------------------------


def _require_file(label: str, value: str | None) -> Path:
    if value is None:
        raise UsageError(f"--{label} is required")
    path = Path(value)
    if not path.exists():
        raise UsageError(f"--{label}: no such file: {path}")
    return path


def _read_examples(label: str, path: Path) -> list[GroundedExample]:
    try:
        return read_jsonl(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationFailure(f"--{label}: malformed records in {path}: {exc}") from None


def cmd_gen(config: dict, inputs: dict, outputs: dict) -> int:
    out_dir = Path(outputs["out"])
    if config["scenes"] < 1:
        raise UsageError(f"scenes must be >= 1, got {config['scenes']}")
    try:
        gen_cfg = GenConfig(
            min_objects=config["min_objects"],
            max_objects=config["max_objects"],
            max_pairwise_iou=config["max_pairwise_iou"],
        )
        captions, questions = generate_dataset(config["scenes"], config["seed"], gen_cfg)
    except (ValueError, RuntimeError) as exc:
        raise ValidationFailure(str(exc)) from None
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(captions, out_dir / "captions.jsonl")
    write_jsonl(questions, out_dir / "questions.jsonl")
    write_manifest("gen", config, inputs, outputs, out_dir)
    print(
        f"gen: {len(captions)} captions, {len(questions)} questions -> {out_dir}",
        file=sys.stderr,
    )
    return 0


def _audit_combined(examples: Sequence[GroundedExample], max_chars: int) -> list[str]:
    """Cross-phrase GIoU cap and text-length violations, one line each."""
    problems = []
    for ex in examples:
        if len(ex.text) > max_chars:
            problems.append(f"{ex.example_id}: text length {len(ex.text)} > {max_chars}")
        anns = ex.annotations
        for i in range(len(anns)):
            for j in range(i + 1, len(anns)):
                worst = max(
                    (giou(a, b) for a in anns[i].boxes for b in anns[j].boxes),
                    default=-1.0,
                )
                if worst > 0.5:
                    problems.append(
                        f"{ex.example_id}: phrases {i} and {j} share a box "
                        f"(GIoU {worst:.3f} > 0.5)"
                    )
    return problems


def cmd_combine(config: dict, inputs: dict, outputs: dict) -> int:
    in_path = _require_file("in", inputs.get("in"))
    out_path = Path(outputs["out"])
    examples = _read_examples("in", in_path)
    if any(ex.qa is not None for ex in examples):
        raise ValidationFailure("combine applies to captions; input has questions")

    groups: dict[Scene, list[GroundedExample]] = {}
    for ex in examples:
        groups.setdefault(ex.scene, []).append(ex)

    combined: list[GroundedExample] = []
    fixpoint_breaks = 0
    for group in groups.values():
        merged = dedup_merge(group, iou_thresh=config["dedup_iou"])
        if dedup_merge(merged, iou_thresh=config["dedup_iou"]) != merged:
            fixpoint_breaks += 1
        combined.extend(combine_annotations(merged, max_chars=config["max_chars"]))

    problems = _audit_combined(combined, config["max_chars"])
    if fixpoint_breaks:
        problems.append(f"dedup_merge not a fixpoint on {fixpoint_breaks} scene groups")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(combined, out_path)
    write_manifest("combine", config, inputs, outputs, out_path)
    print(
        f"combine: {len(examples)} inputs over {len(groups)} scenes "
        f"-> {len(combined)} outputs, {len(problems)} violations",
        file=sys.stderr,
    )
    for line in problems:
        print(f"combine: {line}", file=sys.stderr)
    if problems:
        raise ValidationFailure("combined outputs violate constraints")
    return 0


def _load_train_data(path: Path) -> dict[str, list[GroundedExample]]:
    if path.is_dir():
        captions_path = path / "captions.jsonl"
        if not captions_path.exists():
            raise UsageError(f"--data: {path} has no captions.jsonl")
        data = {"detect_full": _read_examples("data", captions_path)}
        questions_path = path / "questions.jsonl"
        if questions_path.exists():
            data["qa"] = _read_examples("data", questions_path)
        return data
    examples = _read_examples("data", path)
    return {
        "detect_full": [ex for ex in examples if ex.qa is None],
        "qa": [ex for ex in examples if ex.qa is not None],
    }


def cmd_train(config: dict, inputs: dict, outputs: dict) -> int:
    data_path = _require_file("data", inputs.get("data"))
    out_dir = Path(outputs["out"])
    data = _load_train_data(data_path)
    try:
        model_cfg = ModelConfig(**{k: config[k] for k in _MODEL_KEYS})
        train_cfg = TrainConfig(
            **{k: config[k] for k in _TRAIN_KEYS},
            loss=replace(TrainConfig().loss, no_object_weight=config["no_object_weight"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        _, metrics = train(model_cfg, data, train_cfg, out_dir=out_dir)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    write_manifest("train", config, inputs, outputs, out_dir)
    last = metrics[-1]
    print(
        f"train: {len(metrics)} epochs, final loss {last['loss']['total']:.4f} "
        f"-> {out_dir}",
        file=sys.stderr,
    )
    return 0


def _load_model(ckpt: Path, use_ema: bool):
    config_path = ckpt.parent / "config.json"
    if not config_path.exists():
        raise UsageError(f"no config.json beside checkpoint {ckpt}")
    try:
        model_cfg = config_from_json(config_path.read_text())
        store = load_checkpoint(ckpt, model_cfg)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    return model_cfg, (store.ema_store() if use_ema else store)


def cmd_eval(config: dict, inputs: dict, outputs: dict) -> int:
    data_path = _require_file("data", inputs.get("data"))
    ckpt = _require_file("ckpt", inputs.get("ckpt"))
    report_path = Path(outputs["report"])
    protocols = {"any": "ANY", "merged": "MERGED"}
    if config["protocol"] not in protocols:
        raise UsageError(f"protocol must be any or merged, got {config['protocol']!r}")
    if data_path.is_dir():
        examples = []
        for name in ("captions.jsonl", "questions.jsonl"):
            if (data_path / name).exists():
                examples.extend(_read_examples("data", data_path / name))
    else:
        examples = _read_examples("data", data_path)
    if not examples:
        raise ValidationFailure(f"--data: {data_path} holds no examples")
    model_cfg, store = _load_model(ckpt, config["use_ema"])
    try:
        report = detection_report(
            store, model_cfg, examples, protocol=protocols[config["protocol"]]
        )
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest("eval", config, inputs, outputs, report_path)
    shown = {k: v for k, v in report.items() if k in ("ap", "recall@1", "qa")}
    print(f"eval: {shown} -> {report_path}", file=sys.stderr)
    return 0


def _scene_from_record(record: dict) -> Scene:
    if "scene" in record:
        record = record["scene"]
    if "objects" not in record:
        raise ValidationFailure("scene file needs an 'objects' list")
    try:
        return Scene(
            objects=tuple(
                SceneObject(o["shape"], o["color"], o["size"], Box(*o["box"]))
                for o in record["objects"]
            )
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"malformed scene object: {exc}") from None


def cmd_infer(config: dict, inputs: dict, outputs: dict) -> int:
    ckpt = _require_file("ckpt", inputs.get("ckpt"))
    scene_path = _require_file("scene", inputs.get("scene"))
    text = inputs.get("text")
    if text is None:
        raise UsageError("--text is required")
    if config["top"] < 1:
        raise UsageError(f"top must be >= 1, got {config['top']}")
    rankers = {"objectness", "span", "referred"}
    if config["rank"] not in rankers:
        raise UsageError(f"rank must be one of {sorted(rankers)}, got {config['rank']!r}")

    try:
        record = json.loads(scene_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"--scene: {exc}") from None
    scene = _scene_from_record(record)

    model_cfg, store = _load_model(ckpt, config["use_ema"])
    tokens = tokenize(text)
    if not tokens:
        raise ValidationFailure("text has no tokens")
    if len(tokens) > model_cfg.max_tokens:
        raise ValidationFailure(
            f"text has {len(tokens)} tokens, model caps at {model_cfg.max_tokens}"
        )
    try:
        ids = tokens_to_ids(tokens, model_cfg.vocab)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None

    pred = forward(store, model_cfg, scene, ids)
    if config["rank"] == "objectness":
        ranked = rank_by_objectness(pred)
    elif config["rank"] == "span":
        if model_cfg.binary_token_head:
            raise ValidationFailure(
                "span ranking needs per-position token columns; "
                "this checkpoint was trained with the binary token head"
            )
        ranked = rank_by_span_mass(pred, (0, len(tokens)))
    else:
        ranked = rank_by_referred(pred)

    lines = [
        f"{score:.6f} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"
        for box, score in ranked.entries[: config["top"]]
    ]
    for line in lines:
        print(line)
    out = outputs.get("out")
    if out is not None:
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("\n".join(lines) + "\n")
        write_manifest("infer", config, inputs, outputs, out_path)
    return 0


def cmd_gradcheck(config: dict, inputs: dict, outputs: dict) -> int:
    results = run_suite(n_seeds=config["op_seeds"], model_seed=config["model_seed"])
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:24s} {r.error:.3e} < {r.tol:.0e}")
    failures = [r for r in results if not r.passed]
    print(
        f"gradcheck: {len(results) - len(failures)}/{len(results)} within tolerance",
        file=sys.stderr,
    )
    if failures:
        raise ValidationFailure(f"{len(failures)} gradient checks out of tolerance")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "combine": cmd_combine,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


# --- argument parsing ---------------------------------------------------------------


def _add_config_flags(sub: argparse.ArgumentParser, defaults: dict[str, object]) -> None:
    for key in defaults:
        sub.add_argument(
            f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V"
        )
    sub.add_argument("--config", default=None, metavar="FILE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modet",
        description="Text-conditioned detection on synthetic scenes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate caption and question datasets")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_flags(p, GEN_DEFAULTS)

    p = sub.add_parser("combine", help="dedup and pack captions per scene")
    p.add_argument("--in", dest="in_path", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")
    _add_config_flags(p, COMBINE_DEFAULTS)

    p = sub.add_parser("train", help="run the two-stage curriculum")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_flags(p, TRAIN_DEFAULTS)

    p = sub.add_parser("eval", help="write a detection/QA report")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--ckpt", required=True, metavar="FILE")
    p.add_argument("--report", required=True, metavar="FILE")
    _add_config_flags(p, EVAL_DEFAULTS)

    p = sub.add_parser("infer", help="rank boxes for a text over a scene")
    p.add_argument("--ckpt", required=True, metavar="FILE")
    p.add_argument("--text", required=True)
    p.add_argument("--scene", required=True, metavar="FILE")
    p.add_argument("--out", default=None, metavar="FILE")
    _add_config_flags(p, INFER_DEFAULTS)

    p = sub.add_parser("gradcheck", help="finite-difference validation suite")
    _add_config_flags(p, GRADCHECK_DEFAULTS)

    p = sub.add_parser("replay", help="rerun a recorded manifest")
    p.add_argument("manifest", metavar="FILE")

    return parser


_DEFAULTS = {
    "gen": GEN_DEFAULTS,
    "combine": COMBINE_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "infer": INFER_DEFAULTS,
    "gradcheck": GRADCHECK_DEFAULTS,
}

_INPUT_FLAGS = {
    "gen": (),
    "combine": ("in_path",),
    "train": ("data",),
    "eval": ("data", "ckpt"),
    "infer": ("ckpt", "scene", "text"),
    "gradcheck": (),
}

_OUTPUT_FLAGS = {
    "gen": ("out",),
    "combine": ("out",),
    "train": ("out",),
    "eval": ("report",),
    "infer": ("out",),
    "gradcheck": (),
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        worker_cap()
        if args.command == "replay":
            return replay_manifest(args.manifest)
        defaults = _DEFAULTS[args.command]
        config = resolve_config(
            defaults,
            args.config,
            {key: getattr(args, key) for key in defaults},
        )
        inputs = {
            flag.removesuffix("_path"): getattr(args, flag)
            for flag in _INPUT_FLAGS[args.command]
            if getattr(args, flag) is not None
        }
        outputs = {
            flag: getattr(args, flag)
            for flag in _OUTPUT_FLAGS[args.command]
            if getattr(args, flag) is not None
        }
        return _COMMANDS[args.command](config, inputs, outputs)
    except UsageError as exc:
        print(f"modet {args.command}: {exc}", file=sys.stderr)
        return 2
    except ValidationFailure as exc:
        print(f"modet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
