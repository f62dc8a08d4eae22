"""``gaitmap`` command line: simulate, extract, split, train, eval, explain.

Exit codes: 0 success, 2 invalid input or configuration (including subject
leakage), 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .encoders import Modality, RopeMode, TextEmbeddingProvider
from .errors import ConfigError, GaitmapError, LeakageError, NumericError
from .explain import DEFAULT_TOP_K, explain_clip, render_report
from .knowledge_map import save_knowledge_map
from .model import ModelConfig, ScreeningModel, load_model, save_model
from .pooling_fusion import LatentQueryMode, Variant
from .pose_io import Manifest, load_manifest, save_manifest
from .synth_gait import build_synthetic_dataset
from .training_eval import (
    ClassWeighting,
    TrainConfig,
    check_subject_disjoint,
    evaluate,
    prepare_clips,
    split_subject_disjoint,
    train,
    write_loss_csv,
)

log = logging.getLogger("gaitmap")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config_file(path, allowed: set[str]) -> dict:
    if path is None:
        return {}
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"{path}: unknown config keys {sorted(extra)}")
    return raw


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# -- commands ---------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    cfg = _override(
        _load_config_file(args.config, {"subjects", "clips", "positive_fraction", "seed", "noise_std", "video"}),
        subjects=args.subjects, clips=args.clips, positive_fraction=args.positive_fraction,
        seed=args.seed, noise_std=args.noise_std, video=args.video,
    )
    cfg = {"subjects": 20, "clips": 3, "positive_fraction": 0.5, "seed": 0, "noise_std": 1.5, "video": True, **cfg}
    out = Path(args.out)
    manifest = build_synthetic_dataset(out, cfg["subjects"], cfg["clips"], cfg["positive_fraction"], cfg["seed"],
                                       cfg["noise_std"], write_video=cfg["video"])
    _write_json(out / "simulate_config.json", cfg)
    print(manifest)
    return EXIT_OK


def cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = prepare_clips(manifest, with_video=False, conf_threshold=args.conf_threshold)
    for clip in clips:
        save_knowledge_map(clip.kmap, out / f"{clip.clip_id.replace('#', '_')}.gmkm")
    _write_json(out / "extract_config.json", {"manifest": Path(args.manifest).name, "conf_threshold": args.conf_threshold})
    print(f"{len(clips)} knowledge maps written to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    res = split_subject_disjoint(manifest, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(res.train, out / "train.json")
    save_manifest(res.test, out / "test.json")
    _write_json(out / "split_config.json",
                {"test_fraction": args.test_fraction, "seed": args.seed, "warnings": res.warnings})
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"train: {len(res.train.subjects())} subjects / {len(res.train)} entries -> {out / 'train.json'}")
    print(f"test: {len(res.test.subjects())} subjects / {len(res.test)} entries -> {out / 'test.json'}")
    return EXIT_OK


def _text_provider(path, seed: int) -> TextEmbeddingProvider:
    return TextEmbeddingProvider.from_file(path) if path else TextEmbeddingProvider(seed=seed)


def _eval_provider(path):
    return TextEmbeddingProvider.from_file(path) if path else None


_NESTED_MODEL_KEYS = {"encoder", "fusion", "prompts", "text_seed", "silhouette_size"}
_FLAT_MODEL_KEYS = {"variant", "rope_mode", "modalities", "n_layers", "n_latents", "query_mode", "d_model", "n_heads",
                    "mlp_ratio", "patch_frames", "rope_base"}


def _model_config(section: dict, overrides: dict) -> ModelConfig:
    """Model section in resolved (nested) or flat form, then flag overrides."""
    if not isinstance(section, dict):
        raise ConfigError("model config must be a JSON object")
    if section and set(section) <= _NESTED_MODEL_KEYS:
        base = ModelConfig.from_json(section)
        enc, fus = base.encoder.to_json(), base.fusion.to_json()
        flat = {k: v for k, v in {**enc, **fus}.items() if k in _FLAT_MODEL_KEYS}
        extras = {"prompts": base.prompts, "text_seed": base.text_seed, "silhouette_size": base.silhouette_size}
    else:
        unknown = set(section) - _FLAT_MODEL_KEYS
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        flat, extras = dict(section), {}
    flat.update(overrides)
    try:
        cfg = ModelConfig.build(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **extras) if extras else cfg


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config, {"model", "train"})
    model_over = {k: v for k, v in {
        "variant": args.variant, "rope_mode": args.rope, "n_layers": args.layers,
        "modalities": args.modalities.split(",") if args.modalities else None,
        "n_latents": args.latents, "query_mode": args.query_mode, "d_model": args.d_model, "n_heads": args.heads,
    }.items() if v is not None}
    mcfg = _model_config(file_cfg.get("model", {}), model_over)
    tcfg = TrainConfig.from_json(_override(
        file_cfg.get("train", {}), learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, class_weighting=args.class_weighting,
    ))
    manifest = load_manifest(args.manifest)
    if args.test_manifest:
        check_subject_disjoint(manifest.subjects(), load_manifest(args.test_manifest).subjects())
    clips = prepare_clips(manifest, with_video=Modality.VIDEO in mcfg.fusion.modalities)
    model = ScreeningModel(mcfg, seed=tcfg.seed, text_provider=_text_provider(args.text_embeddings, mcfg.text_seed))
    result = train(model, clips, tcfg)
    out = Path(args.out)
    save_model(model, out, result.norm, {"train": tcfg.to_json(), "train_subjects": sorted(manifest.subjects())})
    write_loss_csv(result.history, out / "loss.csv")
    _write_json(out / "resolved_config.json", {"model": mcfg.to_json(), "train": tcfg.to_json()})
    last = result.history[-1]
    print(f"trained {len(clips)} clips, final loss {last.loss:.4f}, train acc {last.train_acc:.3f} -> {out}")
    return EXIT_OK


def _guard_leakage(meta: dict, test: Manifest, train_manifest, allow: bool) -> bool:
    """Returns True when overlap was found and explicitly allowed."""
    train_subjects = set(meta.get("train_subjects", []))
    if train_manifest:
        train_subjects |= load_manifest(train_manifest).subjects()
    try:
        check_subject_disjoint(train_subjects, test.subjects())
    except LeakageError:
        if not allow:
            raise
        log.warning("evaluating on subjects seen in training; report is watermarked")
        return True
    return False


def cmd_eval(args) -> int:
    model, norm, meta = load_model(args.model, _eval_provider(args.text_embeddings))
    test = load_manifest(args.manifest)
    leaked = _guard_leakage(meta, test, args.train_manifest, args.allow_leakage)
    clips = prepare_clips(test, with_video=Modality.VIDEO in model.modalities)
    report = evaluate(model, clips, norm)
    report.leakage_override = leaked
    out = Path(args.out)
    _write_json(out, report.to_json())
    _write_json(out.with_name(out.stem + ".config.json"),
                {"model": meta["model"], "allow_leakage": args.allow_leakage, "n_clips": len(clips)})
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_explain(args) -> int:
    model, norm, meta = load_model(args.model, _eval_provider(args.text_embeddings))
    manifest = load_manifest(args.manifest)
    clips = prepare_clips(manifest, with_video=Modality.VIDEO in model.modalities)
    by_id = {c.clip_id: c for c in clips}
    wanted = args.clip or sorted(by_id)
    missing = [c for c in wanted if c not in by_id]
    if missing:
        raise ConfigError(f"unknown clip ids {missing}; available e.g. {sorted(by_id)[:3]}")
    out = Path(args.out)
    for cid in wanted:
        paths = render_report(explain_clip(model, by_id[cid], norm, args.top_k), out)
        print(f"{cid}: {paths['json']}")
    _write_json(out / "explain_config.json", {"clips": wanted, "top_k": args.top_k, "model": meta["model"]})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitmap", description="Gait knowledge-map scoliosis screening pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic gait dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--clips", type=int, help="clips per subject")
    s.add_argument("--positive-fraction", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-std", type=float)
    s.add_argument("--no-video", dest="video", action="store_const", const=False, help="skip silhouette files")
    s.add_argument("--config")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("extract", help="write one knowledge map per clip")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--conf-threshold", type=float, default=0.3)
    e.set_defaults(func=cmd_extract)

    sp = sub.add_parser("split", help="subject-disjoint train/test manifests")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--test-fraction", type=float, default=0.3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a screening model")
    t.add_argument("--manifest", required=True, help="training manifest")
    t.add_argument("--test-manifest", help="refuse to train if it shares subjects with the training manifest")
    t.add_argument("--out", required=True, help="model directory")
    t.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--rope", choices=[r.value for r in RopeMode])
    t.add_argument("--modalities", help="comma list of knowledge_map,video,text")
    t.add_argument("--layers", type=int)
    t.add_argument("--latents", type=int)
    t.add_argument("--query-mode", choices=[q.value for q in LatentQueryMode])
    t.add_argument("--d-model", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--class-weighting", choices=[c.value for c in ClassWeighting])
    t.add_argument("--text-embeddings", help="JSON file of prompt vectors")
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a model on a test manifest")
    ev.add_argument("--model", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--train-manifest")
    ev.add_argument("--out", required=True, help="metrics JSON path")
    ev.add_argument("--allow-leakage", action="store_true", help="permit subject overlap; watermarks the report")
    ev.add_argument("--text-embeddings")
    ev.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="attention heat maps and top features per clip")
    x.add_argument("--model", required=True)
    x.add_argument("--manifest", required=True)
    x.add_argument("--clip", action="append", help="clip id such as S0001_c0#0 (repeatable; default all)")
    x.add_argument("--out", required=True)
    x.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    x.add_argument("--text-embeddings")
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GaitmapError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
