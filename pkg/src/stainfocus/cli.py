"""Command-line interface: generation, analysis, training, evaluation.

Every command writes its artifacts under <out>/<run-name>/ together with
the fully resolved configuration and a run_info.json recording the seed
and the package source digest, so runs are self-describing.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .analysis import analyze_dataset, write_report
from .config import ConfigError, RunConfig, default_config, load_config, write_resolved_config
from .dataset import (
    DatasetManifest,
    ValidationError,
    fewshot_sample,
    load_manifest,
    resolve_image_path,
    save_manifest,
    split_by_fov,
)
from .evaluation import ArrayDataset, evaluate, evaluate_arrays, write_metrics
from .model import (
    FocusRankModel,
    GROUNDED_VARIANTS,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .synthgen import generate_dataset
from .training import (
    ConfigurationError,
    run_ablation_ladder,
    stage1_train,
    stage2_train,
    write_ablation_table,
    write_train_log,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


def source_digest() -> str:
    """SHA-256 over this package's source files (code version stamp)."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _run_dir(cfg: RunConfig, out_flag, run_name_flag, command: str) -> Path:
    out = Path(out_flag) if out_flag else Path(cfg.out_dir)
    name = run_name_flag or (cfg.run_name if cfg.run_name != "run" else command)
    run_dir = out / name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_run_info(run_dir: Path, cfg: RunConfig, command: str) -> None:
    write_resolved_config(cfg, run_dir / "config.txt")
    info = {
        "command": command,
        "seed": cfg.seed,
        "package_version": __version__,
        "source_digest": source_digest(),
    }
    with open(run_dir / "run_info.json", "w", encoding="utf-8") as f:
        json.dump(info, f, indent=2, sort_keys=True)


def _model_config(cfg: RunConfig, manifest: DatasetManifest, variant: str) -> ModelConfig:
    return ModelConfig(
        stain_names=manifest.stain_vocabulary,
        num_levels=manifest.num_levels,
        image_size=cfg.gen.image_size,
        embed_dim=cfg.embed_dim,
        token_dim=cfg.token_dim,
        tokens_per_stain=cfg.tokens_per_stain,
        tokens_per_rank=cfg.tokens_per_rank,
        anchors=cfg.anchors,
        cond_hidden=cfg.cond_hidden,
        vision_width=cfg.vision_width,
        variant=variant,
        init_seed=cfg.train.seed,
    )


def _absolute_entries(manifest: DatasetManifest):
    return manifest.with_entries(
        e.__class__(
            image_path=str(resolve_image_path(manifest, e)),
            stain=e.stain,
            tissue=e.tissue,
            fov_id=e.fov_id,
            z_index=e.z_index,
            rank=e.rank,
        )
        for e in manifest.entries
    )


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    run_dir = _run_dir(cfg, args.out, args.run_name, "gen-data")
    _write_run_info(run_dir, cfg, "gen-data")
    manifest = generate_dataset(cfg.gen, run_dir / "dataset")
    print(f"wrote {len(manifest)} images to {run_dir / 'dataset'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = default_config()
    run_dir = _run_dir(cfg, args.out, args.run_name, "analyze")
    manifest = load_manifest(args.manifest)
    report = analyze_dataset(manifest)
    write_report(report, run_dir)
    _write_run_info(run_dir, cfg, "analyze")
    print(f"report written to {run_dir}")
    return EXIT_OK


def _load_split(cfg: RunConfig, manifest_path):
    manifest = load_manifest(manifest_path)
    train_m, val_m = split_by_fov(manifest, cfg.val_fraction, cfg.seed)
    return manifest, ArrayDataset.from_manifest(train_m), ArrayDataset.from_manifest(val_m)


def cmd_train(args) -> int:
    overrides = {"seed": args.seed}
    if args.variant:
        overrides["train.variant"] = args.variant
    cfg = load_config(args.config, overrides)
    variant = cfg.variant
    manifest_path = args.data or cfg.manifest_path
    if not manifest_path:
        raise ConfigError("no dataset manifest: pass --data or set data.manifest")
    run_dir = _run_dir(cfg, args.out, args.run_name, f"train-{variant}")
    _write_run_info(run_dir, cfg, "train")
    manifest, train_data, val_data = _load_split(cfg, manifest_path)

    logs = []
    if args.stage in ("1", "all"):
        if variant not in GROUNDED_VARIANTS:
            if args.stage == "1":
                raise ConfigurationError(
                    f"variant {variant} skips the grounding stage; "
                    "use --stage 2 or a grounded variant (D or E)"
                )
            model = FocusRankModel(_model_config(cfg, manifest, variant))
        else:
            model = FocusRankModel(_model_config(cfg, manifest, variant))
            logs.append(stage1_train(train_data, model, cfg.train, val_data))
            save_checkpoint(model, run_dir / "stage1.pt")
            print(f"grounding stage done: {run_dir / 'stage1.pt'}")
    else:  # stage 2 only
        if variant in GROUNDED_VARIANTS:
            if not args.checkpoint:
                raise ConfigurationError(
                    f"variant {variant} needs a grounding checkpoint for "
                    "--stage 2; pass --checkpoint <stage1.pt> or use --stage all"
                )
            model = load_checkpoint(args.checkpoint)
            if model.config.variant != variant:
                raise ConfigurationError(
                    f"checkpoint was built for variant {model.config.variant}, "
                    f"requested {variant}"
                )
        else:
            model = FocusRankModel(_model_config(cfg, manifest, variant))

    if args.stage in ("2", "all"):
        logs.append(stage2_train(train_data, model, cfg.train, val_data))
        save_checkpoint(model, run_dir / "final.pt")
        metrics = evaluate_arrays(model, val_data)
        write_metrics(metrics, run_dir / "metrics.json")
        print(
            f"rank stage done: accuracy={metrics.accuracy:.4f} "
            f"mae={metrics.mae:.4f} ({run_dir / 'final.pt'})"
        )
    write_train_log(logs, run_dir / "train_log.jsonl")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = default_config()
    run_dir = _run_dir(cfg, args.out, args.run_name, "eval")
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    metrics = evaluate(model, manifest)
    write_metrics(metrics, run_dir / "metrics.json")
    _write_run_info(run_dir, cfg, "eval")
    print(f"metrics written to {run_dir / 'metrics.json'}")
    if metrics.has_nan():
        print("error: metrics contain NaN", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = {"seed": args.seed}
    if args.variants:
        overrides["ablate.variants"] = tuple(
            v.strip() for v in args.variants.split(",") if v.strip()
        )
    cfg = load_config(args.config, overrides)
    if args.seeds is not None:
        seeds = tuple(cfg.seed + i for i in range(args.seeds))
    else:
        seeds = cfg.ablate_seeds
    manifest_path = args.data or cfg.manifest_path
    if not manifest_path:
        raise ConfigError("no dataset manifest: pass --data or set data.manifest")
    run_dir = _run_dir(cfg, args.out, args.run_name, "ablate")
    _write_run_info(run_dir, cfg, "ablate")
    manifest, train_data, val_data = _load_split(cfg, manifest_path)
    table = run_ablation_ladder(
        train_data,
        val_data,
        _model_config(cfg, manifest, "E"),
        cfg.train,
        variants=cfg.ablate_variants,
        seeds=seeds,
    )
    write_ablation_table(table, run_dir)
    print(f"ablation table written to {run_dir}")
    return EXIT_OK


def cmd_fewshot_sample(args) -> int:
    cfg = default_config({"seed": args.seed})
    run_dir = _run_dir(cfg, args.out, args.run_name, "fewshot-sample")
    manifest = load_manifest(args.manifest)
    sampled = fewshot_sample(_absolute_entries(manifest), args.k, cfg.seed)
    save_manifest(sampled, run_dir / "manifest.csv")
    _write_run_info(run_dir, cfg, "fewshot-sample")
    print(f"sampled {len(sampled)} entries to {run_dir / 'manifest.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainfocus",
        description="Stain-aware ordinal focus quality assessment toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output root (default: config out_dir)")
        p.add_argument("--run-name", help="run directory name")
        p.add_argument("--seed", type=int, default=None, help="global seed override")

    p = sub.add_parser("gen-data", help="generate a synthetic multi-stain dataset")
    p.add_argument("config", help="run config file")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("analyze", help="sharpness/rank analysis of a dataset")
    p.add_argument("manifest", help="dataset manifest CSV")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train the two-stage ranking model")
    p.add_argument("config", help="run config file")
    p.add_argument("--data", help="dataset manifest CSV (overrides data.manifest)")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--variant", choices=("A", "B", "C", "D", "E"), default=None)
    p.add_argument("--checkpoint", help="grounding-stage checkpoint for --stage 2")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation ladder")
    p.add_argument("config")
    p.add_argument("--data", help="dataset manifest CSV (overrides data.manifest)")
    p.add_argument("--variants", help="comma list, e.g. A,E")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fewshot-sample", help="sample k entries per (stain, rank)")
    p.add_argument("manifest")
    p.add_argument("--k", type=int, required=True)
    common(p)
    p.set_defaults(func=cmd_fewshot_sample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
