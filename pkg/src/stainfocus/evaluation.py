"""Rank prediction and the evaluation metric suite.

Accuracy is computed on argmax ranks; PLCC, SRCC and MAE on the
expected rank (probability-weighted mean level), which is continuous
in [0, K-1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .analysis import UndefinedCorrelationError, mae as _mae, plcc as _plcc, srcc as _srcc
from .dataset import DatasetManifest, ValidationError, load_images
from .model import config_digest


@dataclass(frozen=True)
class ArrayDataset:
    """Manifest materialized as tensors for training and evaluation."""

    images: torch.Tensor  # (N, H, W) float32 in [0, 1]
    stain_ids: torch.Tensor  # (N,) long
    ranks: torch.Tensor  # (N,) long
    stain_names: tuple
    num_levels: int

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ArrayDataset":
        images = torch.from_numpy(load_images(manifest).astype(np.float32))
        stain_ids = torch.tensor(
            [manifest.stain_index(e.stain) for e in manifest.entries],
            dtype=torch.long,
        )
        ranks = torch.tensor([e.rank for e in manifest.entries], dtype=torch.long)
        return cls(
            images=images,
            stain_ids=stain_ids,
            ranks=ranks,
            stain_names=manifest.stain_vocabulary,
            num_levels=manifest.num_levels,
        )

    def __len__(self):
        return self.images.shape[0]


def predict(model, image, stain_id: int):
    """Predict one image: (argmax rank, probability vector, expected rank)."""
    image = torch.as_tensor(image, dtype=torch.float32)
    if image.dim() != 2:
        raise ValidationError(f"expected a single HxW image, got dim {image.dim()}")
    ranks, probs, expected = model.predict_batch(
        image[None], torch.tensor([stain_id])
    )
    return int(ranks[0]), probs[0], float(expected[0])


def predict_dataset(model, data: ArrayDataset, batch_size: int = 256):
    """Argmax ranks and expected ranks over a whole dataset."""
    all_ranks, all_expected = [], []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        ranks, _, expected = model.predict_batch(
            data.images[sl], data.stain_ids[sl]
        )
        all_ranks.append(ranks)
        all_expected.append(expected)
    return torch.cat(all_ranks), torch.cat(all_expected)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    plcc: float | None
    srcc: float | None
    mae: float
    per_stain: dict
    sample_count: int
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "plcc": self.plcc,
            "srcc": self.srcc,
            "mae": self.mae,
            "per_stain": self.per_stain,
            "sample_count": self.sample_count,
            "config_digest": self.config_digest,
        }

    def has_nan(self) -> bool:
        values = [self.accuracy, self.plcc, self.srcc, self.mae]
        for group in self.per_stain.values():
            values.extend(group.values())
        return any(v is not None and not np.isfinite(v) for v in values)


def _safe_corr(fn, a, b) -> float | None:
    try:
        return fn(a, b)
    except UndefinedCorrelationError:
        return None


def compute_metrics(
    pred_ranks, expected_ranks, true_ranks, stain_ids=None, stain_names=(), digest=""
) -> MetricsReport:
    """Metric suite over prediction arrays (used by all model kinds)."""
    pred_ranks = np.asarray(pred_ranks)
    expected_ranks = np.asarray(expected_ranks, dtype=np.float64)
    true_ranks = np.asarray(true_ranks)
    if len(true_ranks) == 0:
        raise ValidationError("cannot evaluate an empty prediction set")
    accuracy = float(np.mean(pred_ranks == true_ranks))
    report_mae = _mae(expected_ranks, true_ranks.astype(np.float64))
    report_plcc = _safe_corr(_plcc, expected_ranks, true_ranks)
    report_srcc = _safe_corr(_srcc, expected_ranks, true_ranks)

    per_stain = {}
    if stain_ids is not None:
        stain_ids = np.asarray(stain_ids)
        for sid, name in enumerate(stain_names):
            sel = stain_ids == sid
            if not sel.any():
                continue
            entry = {
                "accuracy": float(np.mean(pred_ranks[sel] == true_ranks[sel])),
                "mae": _mae(expected_ranks[sel], true_ranks[sel].astype(np.float64)),
                "count": int(sel.sum()),
            }
            if sel.sum() >= 2:
                entry["plcc"] = _safe_corr(_plcc, expected_ranks[sel], true_ranks[sel])
                entry["srcc"] = _safe_corr(_srcc, expected_ranks[sel], true_ranks[sel])
            else:
                entry["plcc"] = None
                entry["srcc"] = None
            per_stain[name] = entry

    return MetricsReport(
        accuracy=accuracy,
        plcc=report_plcc,
        srcc=report_srcc,
        mae=report_mae,
        per_stain=per_stain,
        sample_count=len(true_ranks),
        config_digest=digest,
    )


def evaluate_arrays(model, data: ArrayDataset) -> MetricsReport:
    pred_ranks, expected = predict_dataset(model, data)
    digest = config_digest(model.config) if hasattr(model, "config") else ""
    return compute_metrics(
        pred_ranks.numpy(),
        expected.numpy(),
        data.ranks.numpy(),
        data.stain_ids.numpy(),
        data.stain_names,
        digest,
    )


def evaluate(model, manifest: DatasetManifest) -> MetricsReport:
    """Evaluate a trained model over every entry of a manifest."""
    if not manifest.entries:
        raise ValidationError("manifest has no entries")
    return evaluate_arrays(model, ArrayDataset.from_manifest(manifest))


def write_metrics(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
