"""Declarative run configuration with dotted keys.

A run config is a plain text file of `dotted.key = value` lines; unknown
keys are rejected so typos fail fast. Flags override file keys, and file
keys override the built-in defaults. Every command writes the fully
resolved config next to its outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .synthgen import DEFAULT_STAINS, GenConfig, StainOptics
from .training import TrainConfig


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""


def _to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _to_str_list(s: str) -> tuple:
    return tuple(part.strip() for part in s.split(",") if part.strip())


def _to_int_list(s: str) -> tuple:
    return tuple(int(p) for p in _to_str_list(s))


_SCHEMA = {
    "run_name": str,
    "out_dir": str,
    "seed": int,
    "data.manifest": str,
    "gen.stains": _to_str_list,
    "gen.stacks_per_stain": int,
    "gen.planes_per_stack": int,
    "gen.image_size": int,
    "gen.best_focus_mode": str,
    "gen.num_levels": int,
    "gen.seed": int,
    "gen.tissue": str,
    "train.stage1_epochs": int,
    "train.stage2_epochs": int,
    "train.batch_size": int,
    "train.stage1_lr": float,
    "train.stage2_lr": float,
    "train.alpha": float,
    "train.beta": float,
    "train.kl_temperature": float,
    "train.stage1_kl": _to_bool,
    "train.seed": int,
    "train.val_fraction": float,
    "train.variant": str,
    "model.embed_dim": int,
    "model.token_dim": int,
    "model.tokens_per_stain": int,
    "model.tokens_per_rank": int,
    "model.anchors": _to_int_list,
    "model.cond_hidden": int,
    "model.vision_width": int,
    "ablate.variants": _to_str_list,
    "ablate.seeds": _to_int_list,
}

_OPTICS_FIELDS = {
    "blur_rate": float,
    "base_sigma": float,
    "background": float,
    "noise_std": float,
    "blob_density": float,
    "blob_radius": float,
    "bandlimit_cutoff": float,
    "intensity": float,
}

STAIN_REGISTRY = {s.stain_name: s for s in DEFAULT_STAINS}


def parse_dotted_file(path) -> dict:
    """Read `key = value` lines; blank lines and #-comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
    return raw


def _validate_key(key: str) -> None:
    if key in _SCHEMA:
        return
    if key.startswith("gen.optics."):
        parts = key.split(".")
        if len(parts) == 4 and parts[3] in _OPTICS_FIELDS:
            return
        raise ConfigError(
            f"unknown optics key {key!r}; expected "
            f"gen.optics.<stain>.<{'/'.join(sorted(_OPTICS_FIELDS))}>"
        )
    raise ConfigError(f"unknown config key {key!r}")


@dataclass(frozen=True)
class RunConfig:
    run_name: str = "run"
    out_dir: str = "runs"
    seed: int = 0
    manifest_path: str | None = None
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    val_fraction: float = 0.25
    variant: str = "E"
    embed_dim: int = 64
    token_dim: int = 64
    tokens_per_stain: int = 2
    tokens_per_rank: int = 2
    anchors: tuple = ()
    cond_hidden: int = 64
    vision_width: int = 16
    ablate_variants: tuple = ("A", "E")
    ablate_seeds: tuple = (0,)
    resolved: dict = field(default_factory=dict)


def _build_stains(names, optics_overrides) -> tuple:
    stains = []
    for name in names:
        overrides = optics_overrides.get(name, {})
        if name in STAIN_REGISTRY:
            stains.append(replace(STAIN_REGISTRY[name], **overrides))
        else:
            missing = set(_OPTICS_FIELDS) - set(overrides)
            if missing:
                raise ConfigError(
                    f"stain {name!r} is not a built-in profile; provide "
                    f"gen.optics.{name}.* for: {', '.join(sorted(missing))}"
                )
            stains.append(StainOptics(stain_name=name, **overrides))
    return tuple(stains)


def resolve_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Apply typed parsing, defaults, and flag overrides to raw keys."""
    values = {}
    optics: dict[str, dict] = {}
    for key, text in raw.items():
        _validate_key(key)
        if key.startswith("gen.optics."):
            _, _, stain, fieldname = key.split(".")
            try:
                optics.setdefault(stain, {})[fieldname] = _OPTICS_FIELDS[fieldname](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        else:
            try:
                values[key] = _SCHEMA[key](text)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val

    # the global seed falls back to FLUO_SEED when nothing else sets it
    if "seed" not in values:
        env_seed = os.environ.get("FLUO_SEED")
        if env_seed is not None:
            try:
                values["seed"] = int(env_seed)
            except ValueError as exc:
                raise ConfigError(f"FLUO_SEED must be an integer: {env_seed!r}") from exc
    seed = values.get("seed", 0)

    stain_names = values.get(
        "gen.stains", tuple(s.stain_name for s in DEFAULT_STAINS)
    )
    for stain in optics:
        if stain not in stain_names:
            raise ConfigError(
                f"optics override for stain {stain!r} not listed in gen.stains"
            )
    try:
        gen = GenConfig(
            stains=_build_stains(stain_names, optics),
            stacks_per_stain=values.get("gen.stacks_per_stain", 16),
            planes_per_stack=values.get("gen.planes_per_stack", 32),
            image_size=values.get("gen.image_size", 64),
            best_focus_mode=values.get("gen.best_focus_mode", "center"),
            seed=values.get("gen.seed", seed),
            num_levels=values.get("gen.num_levels", 10),
            tissue=values.get("gen.tissue", "synthetic"),
        )
        train = TrainConfig(
            stage1_epochs=values.get("train.stage1_epochs", 10),
            stage2_epochs=values.get("train.stage2_epochs", 100),
            batch_size=values.get("train.batch_size", 64),
            stage1_lr=values.get("train.stage1_lr", 1e-3),
            stage2_lr=values.get("train.stage2_lr", 5e-4),
            alpha=values.get("train.alpha", 1.0),
            beta=values.get("train.beta", 1.0),
            kl_temperature=values.get("train.kl_temperature", 1.0),
            stage1_kl=values.get("train.stage1_kl", True),
            seed=values.get("train.seed", seed),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(
        run_name=values.get("run_name", "run"),
        out_dir=values.get("out_dir", "runs"),
        seed=seed,
        manifest_path=values.get("data.manifest"),
        gen=gen,
        train=train,
        val_fraction=values.get("train.val_fraction", 0.25),
        variant=values.get("train.variant", "E"),
        embed_dim=values.get("model.embed_dim", 64),
        token_dim=values.get("model.token_dim", 64),
        tokens_per_stain=values.get("model.tokens_per_stain", 2),
        tokens_per_rank=values.get("model.tokens_per_rank", 2),
        anchors=values.get("model.anchors", ()),
        cond_hidden=values.get("model.cond_hidden", 64),
        vision_width=values.get("model.vision_width", 16),
        ablate_variants=values.get("ablate.variants", ("A", "E")),
        ablate_seeds=values.get("ablate.seeds", (0,)),
        resolved={},
    )
    return replace(cfg, resolved=serialize_config(cfg))


def serialize_config(cfg: RunConfig) -> dict:
    """Flatten a RunConfig back to dotted keys (the resolved snapshot)."""
    out = {
        "run_name": cfg.run_name,
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "gen.stains": ",".join(s.stain_name for s in cfg.gen.stains),
        "gen.stacks_per_stain": cfg.gen.stacks_per_stain,
        "gen.planes_per_stack": cfg.gen.planes_per_stack,
        "gen.image_size": cfg.gen.image_size,
        "gen.best_focus_mode": cfg.gen.best_focus_mode,
        "gen.num_levels": cfg.gen.num_levels,
        "gen.seed": cfg.gen.seed,
        "gen.tissue": cfg.gen.tissue,
        "train.val_fraction": cfg.val_fraction,
        "train.variant": cfg.variant,
        "model.embed_dim": cfg.embed_dim,
        "model.token_dim": cfg.token_dim,
        "model.tokens_per_stain": cfg.tokens_per_stain,
        "model.tokens_per_rank": cfg.tokens_per_rank,
        "model.anchors": ",".join(str(a) for a in cfg.anchors),
        "model.cond_hidden": cfg.cond_hidden,
        "model.vision_width": cfg.vision_width,
        "ablate.variants": ",".join(cfg.ablate_variants),
        "ablate.seeds": ",".join(str(s) for s in cfg.ablate_seeds),
    }
    if cfg.manifest_path:
        out["data.manifest"] = cfg.manifest_path
    for f in fields(TrainConfig):
        out[f"train.{f.name}"] = getattr(cfg.train, f.name)
    for s in cfg.gen.stains:
        for name in _OPTICS_FIELDS:
            out[f"gen.optics.{s.stain_name}.{name}"] = getattr(s, name)
    return out


def write_resolved_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(cfg.resolved):
            value = cfg.resolved[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            f.write(f"{key} = {value}\n")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return resolve_config(parse_dotted_file(path), overrides)


def default_config(overrides: dict | None = None) -> RunConfig:
    return resolve_config({}, overrides)
