"""Two-stage training, losses, baselines, and the ablation ladder.

Stage 1 (stain grounding) updates only the stain token table and the
text-side adapter against stain-class supervision. Stage 2 (rank
training) freezes those and updates the base rank embeddings, the
conditioning network, the vision encoder, the context tokens and the
logit scale. Both stages combine a cross-entropy term with a
KL-divergence term against a soft target distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ValidationError
from .encoders import VisionEncoder
from .evaluation import ArrayDataset, evaluate_arrays, predict_dataset
from .model import (
    FocusRankModel,
    GROUNDED_VARIANTS,
    ModelConfig,
    VARIANTS,
    parameter_digests,
)


class ConfigurationError(ValueError):
    """A run was configured inconsistently (wrong variant/stage pairing)."""


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 100
    batch_size: int = 64
    stage1_lr: float = 1e-3
    stage2_lr: float = 5e-4
    alpha: float = 1.0
    beta: float = 1.0
    kl_temperature: float = 1.0
    stage1_kl: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.kl_temperature <= 0:
            raise ValidationError("kl_temperature must be > 0")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValidationError("epoch counts must be >= 1")


@dataclass(frozen=True)
class AblationConfig:
    """Exactly one model variant or one baseline kind."""

    variant: str | None = None
    baseline: str | None = None

    def __post_init__(self):
        if (self.variant is None) == (self.baseline is None):
            raise ConfigurationError("choose exactly one of variant or baseline")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.baseline is not None and self.baseline not in ("CE", "OE"):
            raise ConfigurationError(f"unknown baseline {self.baseline!r}")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _as_batch(logits: torch.Tensor, labels) -> tuple[torch.Tensor, torch.Tensor]:
    if logits.dim() == 1:
        logits = logits[None]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels[None]
    if labels.shape[0] != logits.shape[0]:
        raise ValidationError("labels length must match logits batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValidationError(
            f"label out of range [0, {logits.shape[1] - 1}]: "
            f"{int(labels.min())}..{int(labels.max())}"
        )
    return logits, labels


def ce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Batch-averaged cross entropy, -log softmax(logits)[label]."""
    logits, labels = _as_batch(logits, labels)
    return F.cross_entropy(logits, labels)


def ordinal_target(
    num_levels: int, ranks, tau: float, dtype=torch.float32
) -> torch.Tensor:
    """Unimodal soft labels q_k proportional to exp(-|k - r| / tau)."""
    if tau <= 0:
        raise ValidationError(f"tau must be > 0, got {tau}")
    ranks = torch.as_tensor(ranks, dtype=torch.long)
    if ranks.dim() == 0:
        ranks = ranks[None]
    levels = torch.arange(num_levels, dtype=dtype)
    logq = -torch.abs(levels[None, :] - ranks[:, None].to(dtype)) / tau
    return torch.softmax(logq, dim=-1)


def ordinal_kl_loss(logits: torch.Tensor, ranks, tau: float) -> torch.Tensor:
    """KL(q || softmax(logits)) against the unimodal ordinal target."""
    logits, ranks = _as_batch(logits, ranks)
    q = ordinal_target(logits.shape[1], ranks, tau, dtype=logits.dtype)
    log_p = F.log_softmax(logits, dim=-1)
    kl = (q * (torch.log(q) - log_p)).sum(dim=-1)
    return kl.mean()


def class_smoothing_kl_loss(logits: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """KL against a symmetric smoothed one-hot target.

    Stain classes are unordered, so the target puts weight 1 on the true
    class and exp(-1/tau) on every other class (then normalizes); tau
    acts as a label-smoothing temperature.
    """
    if tau <= 0:
        raise ValidationError(f"tau must be > 0, got {tau}")
    logits, labels = _as_batch(logits, labels)
    num = logits.shape[1]
    off = torch.full((num, num), -1.0 / tau, dtype=logits.dtype)
    off.fill_diagonal_(0.0)
    q = torch.softmax(off, dim=-1)[labels]
    log_p = F.log_softmax(logits, dim=-1)
    kl = (q * (torch.log(q) - log_p)).sum(dim=-1)
    return kl.mean()


def stage1_loss(
    model: FocusRankModel, images: torch.Tensor, stain_labels, cfg: TrainConfig
) -> torch.Tensor:
    """Grounding objective: alpha * CE + beta * smoothing-KL on stain logits."""
    logits = model.stain_logits(images)
    loss = cfg.alpha * ce_loss(logits, stain_labels)
    if cfg.stage1_kl and cfg.beta > 0:
        loss = loss + cfg.beta * class_smoothing_kl_loss(
            logits, stain_labels, cfg.kl_temperature
        )
    return loss


def stage2_loss(
    model: FocusRankModel,
    images: torch.Tensor,
    stain_ids,
    ranks,
    cfg: TrainConfig,
) -> torch.Tensor:
    """Ranking objective: alpha * CE + beta * ordinal-KL on rank logits."""
    logits = model.rank_logits(images, stain_ids)
    loss = cfg.alpha * ce_loss(logits, ranks)
    if cfg.beta > 0:
        loss = loss + cfg.beta * ordinal_kl_loss(logits, ranks, cfg.kl_temperature)
    return loss


# --------------------------------------------------------------------------
# stage training
# --------------------------------------------------------------------------


@dataclass
class StageLog:
    stage: int
    epochs: list = field(default_factory=list)
    digests_before: dict = field(default_factory=dict)
    digests_after: dict = field(default_factory=dict)
    update_groups: tuple = ()

    def changed_groups(self) -> set:
        return {
            name
            for name in self.digests_before
            if self.digests_before[name] != self.digests_after[name]
        }


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _make_optimizer(model_params, lr: float, epochs: int):
    optimizer = torch.optim.RAdam(model_params, lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
    return optimizer, scheduler


def stage1_train(
    train_data: ArrayDataset,
    model: FocusRankModel,
    cfg: TrainConfig,
    val_data: ArrayDataset | None = None,
) -> StageLog:
    """Ground stain tokens and adapter against stain-class labels."""
    if len(torch.unique(train_data.stain_ids)) < 2:
        raise ValidationError("stain grounding needs at least 2 stains in the data")
    model.set_stage(1)
    log = StageLog(
        stage=1,
        digests_before=parameter_digests(model),
        update_groups=model.stage_update_groups(1),
    )
    params = model.trainable_parameters()
    optimizer, scheduler = _make_optimizer(params, cfg.stage1_lr, cfg.stage1_epochs)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()
    for epoch in range(cfg.stage1_epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(len(train_data), cfg.batch_size, gen):
            optimizer.zero_grad(set_to_none=True)
            loss = stage1_loss(
                model, train_data.images[idx], train_data.stain_ids[idx], cfg
            )
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        scheduler.step()
        record = {
            "epoch": epoch,
            "loss": total / count,
            "lr": scheduler.get_last_lr()[0],
        }
        record["stain_accuracy"] = stain_accuracy(
            model, val_data if val_data is not None else train_data
        )
        log.epochs.append(record)
        model.train()
    model.eval()
    model.grounded_flag.fill_(1)
    log.digests_after = parameter_digests(model)
    return log


@torch.no_grad()
def stain_accuracy(model: FocusRankModel, data: ArrayDataset) -> float:
    model.eval()
    correct, total = 0, 0
    for start in range(0, len(data), 256):
        sl = slice(start, start + 256)
        logits = model.stain_logits(data.images[sl])
        correct += int((logits.argmax(dim=-1) == data.stain_ids[sl]).sum())
        total += logits.shape[0]
    return correct / total


def stage2_train(
    train_data: ArrayDataset,
    model: FocusRankModel,
    cfg: TrainConfig,
    val_data: ArrayDataset | None = None,
) -> StageLog:
    """Train rank embeddings, conditioning, vision encoder and contexts."""
    grounded = bool(model.grounded_flag.item())
    if model.config.variant in GROUNDED_VARIANTS and not grounded:
        raise ConfigurationError(
            f"variant {model.config.variant} needs the grounding stage first; "
            "run stage 1 (or pass its checkpoint) before stage 2"
        )
    if model.config.variant not in GROUNDED_VARIANTS and grounded:
        raise ConfigurationError(
            f"variant {model.config.variant} skips grounding but the model "
            "was grounded; rebuild the model without stage 1"
        )
    model.set_stage(2)
    log = StageLog(
        stage=2,
        digests_before=parameter_digests(model),
        update_groups=model.stage_update_groups(2),
    )
    params = model.trainable_parameters()
    optimizer, scheduler = _make_optimizer(params, cfg.stage2_lr, cfg.stage2_epochs)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    model.train()
    for epoch in range(cfg.stage2_epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(len(train_data), cfg.batch_size, gen):
            optimizer.zero_grad(set_to_none=True)
            loss = stage2_loss(
                model,
                train_data.images[idx],
                train_data.stain_ids[idx],
                train_data.ranks[idx],
                cfg,
            )
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        scheduler.step()
        record = {
            "epoch": epoch,
            "loss": total / count,
            "lr": scheduler.get_last_lr()[0],
        }
        if val_data is not None:
            ranks, expected = predict_dataset(model, val_data)
            record["val_accuracy"] = float(
                (ranks == val_data.ranks).float().mean()
            )
            record["val_mae"] = float(
                (expected - val_data.ranks.to(expected.dtype)).abs().mean()
            )
        log.epochs.append(record)
        model.train()
    model.eval()
    log.digests_after = parameter_digests(model)
    return log


def train_variant(
    variant: str,
    train_data: ArrayDataset,
    val_data: ArrayDataset | None,
    model_config: ModelConfig,
    cfg: TrainConfig,
) -> tuple[FocusRankModel, list[StageLog]]:
    """Build and train one ablation variant end to end."""
    from dataclasses import replace

    torch.manual_seed(cfg.seed)
    model = FocusRankModel(replace(model_config, variant=variant))
    logs = []
    if variant in GROUNDED_VARIANTS:
        logs.append(stage1_train(train_data, model, cfg, val_data))
    logs.append(stage2_train(train_data, model, cfg, val_data))
    return model, logs


# --------------------------------------------------------------------------
# CE / OE baselines
# --------------------------------------------------------------------------


class CEBaseline(nn.Module):
    """Vision encoder with a plain K-way classification head."""

    def __init__(self, image_size: int, embed_dim: int, num_levels: int, width: int = 16):
        super().__init__()
        self.num_levels = num_levels
        self.encoder = VisionEncoder(image_size, embed_dim, width)
        self.head = nn.Linear(embed_dim, num_levels)

    def forward(self, images):
        return self.head(self.encoder(images))

    def loss(self, images, ranks):
        return F.cross_entropy(self(images), torch.as_tensor(ranks))

    @torch.no_grad()
    def predict_batch(self, images, stain_ids=None):
        self.eval()
        logits = self(images)
        probs = F.softmax(logits, dim=-1)
        levels = torch.arange(self.num_levels, dtype=probs.dtype)
        return logits.argmax(dim=-1), probs, (probs * levels).sum(dim=-1)


class OEBaseline(nn.Module):
    """Vision encoder with K-1 cumulative binary heads.

    Head j predicts P(rank > j); the decoded rank is the number of heads
    whose probability exceeds 0.5.
    """

    def __init__(self, image_size: int, embed_dim: int, num_levels: int, width: int = 16):
        super().__init__()
        self.num_levels = num_levels
        self.encoder = VisionEncoder(image_size, embed_dim, width)
        self.head = nn.Linear(embed_dim, num_levels - 1)

    def forward(self, images):
        return self.head(self.encoder(images))

    def loss(self, images, ranks):
        logits = self(images)
        ranks = torch.as_tensor(ranks)
        thresholds = torch.arange(self.num_levels - 1)
        targets = (ranks[:, None] > thresholds[None, :]).to(logits.dtype)
        return F.binary_cross_entropy_with_logits(logits, targets)

    @staticmethod
    def decode(head_probs: torch.Tensor) -> torch.Tensor:
        """Rank = count of cumulative heads with probability > 0.5."""
        return (head_probs > 0.5).sum(dim=-1)

    @staticmethod
    def to_probabilities(head_probs: torch.Tensor) -> torch.Tensor:
        """Convert P(rank > j) heads into a per-level distribution."""
        ones = torch.ones_like(head_probs[:, :1])
        zeros = torch.zeros_like(head_probs[:, :1])
        cum = torch.cat([ones, head_probs, zeros], dim=-1)
        diffs = (cum[:, :-1] - cum[:, 1:]).clamp_min(0.0)
        return diffs / diffs.sum(dim=-1, keepdim=True).clamp_min(1e-12)

    @torch.no_grad()
    def predict_batch(self, images, stain_ids=None):
        self.eval()
        head_probs = torch.sigmoid(self(images))
        probs = self.to_probabilities(head_probs)
        levels = torch.arange(self.num_levels, dtype=probs.dtype)
        return self.decode(head_probs), probs, (probs * levels).sum(dim=-1)


def baseline_train(
    train_data: ArrayDataset,
    cfg: TrainConfig,
    kind: str,
    val_data: ArrayDataset | None = None,
    image_size: int = 64,
    embed_dim: int = 64,
):
    """Train a CE or OE baseline with the stage-2 optimizer settings."""
    if kind not in ("CE", "OE"):
        raise ConfigurationError(f"baseline kind must be CE or OE, got {kind!r}")
    torch.manual_seed(cfg.seed)
    cls = CEBaseline if kind == "CE" else OEBaseline
    model = cls(image_size, embed_dim, train_data.num_levels)
    optimizer, scheduler = _make_optimizer(
        model.parameters(), cfg.stage2_lr, cfg.stage2_epochs
    )
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    log = StageLog(stage=2, update_groups=(kind,))
    model.train()
    for epoch in range(cfg.stage2_epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(len(train_data), cfg.batch_size, gen):
            optimizer.zero_grad(set_to_none=True)
            loss = model.loss(train_data.images[idx], train_data.ranks[idx])
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        scheduler.step()
        record = {"epoch": epoch, "loss": total / count}
        if val_data is not None:
            ranks, _ = predict_dataset(model, val_data)
            record["val_accuracy"] = float((ranks == val_data.ranks).float().mean())
        log.epochs.append(record)
        model.train()
    model.eval()
    metrics = evaluate_arrays(model, val_data if val_data is not None else train_data)
    return model, metrics, log


# --------------------------------------------------------------------------
# ablation ladder
# --------------------------------------------------------------------------

#: published full-scale accuracies for context; not reproducible here
#: (they require pretrained backbones and the original datasets)
PUBLISHED_REFERENCE = {
    "accuracy": {"A": 83.12, "D": 84.28, "E": 85.21},
    "reproduced": False,
    "note": "full-scale published accuracies, recorded for context only",
}

LADDER_ORDER = ("A", "B", "C", "D", "E")


def run_ablation_ladder(
    train_data: ArrayDataset,
    val_data: ArrayDataset,
    model_config: ModelConfig,
    cfg: TrainConfig,
    variants=("A", "E"),
    seeds=(0,),
) -> dict:
    """Train each variant across seeds and tabulate metric statistics."""
    if not seeds:
        raise ValidationError("need at least one seed")
    variants = tuple(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigurationError(f"unknown variant {v!r}")
    rows = {}
    for variant in variants:
        per_seed = []
        for seed in seeds:
            run_cfg = _with_seed(cfg, seed)
            model_cfg = _with_init_seed(model_config, seed)
            model, _ = train_variant(variant, train_data, val_data, model_cfg, run_cfg)
            metrics = evaluate_arrays(model, val_data)
            per_seed.append(metrics)
        rows[variant] = {
            "seeds": list(seeds),
            "accuracy": _mean_std([m.accuracy for m in per_seed]),
            "plcc": _mean_std([m.plcc for m in per_seed]),
            "srcc": _mean_std([m.srcc for m in per_seed]),
            "mae": _mean_std([m.mae for m in per_seed]),
        }
    ordered = [v for v in LADDER_ORDER if v in rows]
    if len(ordered) > 1:
        for prev, cur in zip(ordered, ordered[1:]):
            prev_acc = rows[prev]["accuracy"]["mean"]
            cur_acc = rows[cur]["accuracy"]["mean"]
            rows[cur]["step_gain_accuracy"] = cur_acc - prev_acc
    return {
        "variants": rows,
        "ladder_order": ordered,
        "published_reference": PUBLISHED_REFERENCE,
    }


def _mean_std(values) -> dict:
    defined = [v for v in values if v is not None]
    if not defined:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(defined)), "std": float(np.std(defined))}


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def _with_init_seed(cfg: ModelConfig, seed: int) -> ModelConfig:
    from dataclasses import replace

    return replace(cfg, init_seed=seed)


def write_ablation_table(table: dict, out_dir) -> None:
    """Emit ablation_table.json and a flat CSV companion."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation_table.json", "w", encoding="utf-8") as f:
        json.dump(table, f, indent=2, sort_keys=True)
    with open(out_dir / "ablation_table.csv", "w", encoding="utf-8") as f:
        f.write(
            "variant,accuracy_mean,accuracy_std,plcc_mean,plcc_std,"
            "srcc_mean,srcc_std,mae_mean,mae_std,step_gain_accuracy\n"
        )
        for variant in table["ladder_order"]:
            row = table["variants"][variant]
            cells = [variant]
            for metric in ("accuracy", "plcc", "srcc", "mae"):
                m = row[metric]
                cells.append("" if m["mean"] is None else f"{m['mean']:.6g}")
                cells.append("" if m["std"] is None else f"{m['std']:.6g}")
            gain = row.get("step_gain_accuracy")
            cells.append("" if gain is None else f"{gain:.6g}")
            f.write(",".join(cells) + "\n")


def write_train_log(logs, path) -> None:
    """Append stage logs as JSON lines (one record per epoch)."""
    with open(path, "w", encoding="utf-8") as f:
        for log in logs:
            for record in log.epochs:
                f.write(json.dumps({"stage": log.stage, **record}) + "\n")
