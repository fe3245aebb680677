"""Spatial-frequency sharpness metric and stain-dependence statistics.

The spatial frequency (SF) of an image is the root of the summed squared
row and column gradient energies; sharp images score high, defocused
ones low. analyze_dataset aggregates SF per rank and per stain and
correlates it with the ordinal focus labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import DatasetManifest, ValidationError, load_image, resolve_image_path


def spatial_frequency(image: np.ndarray) -> float:
    """Gradient-energy sharpness of an M x N grayscale image.

    RF is the RMS of vertical first differences (normalized by (M-1)*N),
    CF the RMS of horizontal ones (normalized by M*(N-1)); the result is
    sqrt(RF^2 + CF^2). Zero exactly for constant images.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValidationError(f"image must be at least 2x2, got shape {img.shape}")
    m, n = img.shape
    row_diff = img[1:, :] - img[:-1, :]
    col_diff = img[:, 1:] - img[:, :-1]
    rf_sq = np.sum(row_diff * row_diff) / ((m - 1) * n)
    cf_sq = np.sum(col_diff * col_diff) / (m * (n - 1))
    return float(np.sqrt(rf_sq + cf_sq))


def _rank_data(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        # positions i..j (0-based) share the average of ranks i+1..j+1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _check_pair(a, b, min_len=2):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValidationError("inputs must be 1-D sequences")
    if len(a) != len(b):
        raise ValidationError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < min_len:
        raise ValidationError(f"need at least {min_len} values, got {len(a)}")
    return a, b


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (a constant input)."""


def plcc(a, b) -> float:
    """Pearson linear correlation coefficient."""
    a, b = _check_pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.sum(da * db) / denom)


def srcc(a, b) -> float:
    """Spearman rank correlation; ties get average ranks."""
    a, b = _check_pair(a, b)
    return plcc(_rank_data(a), _rank_data(b))


def mae(a, b) -> float:
    """Mean absolute error between two equal-length sequences."""
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class StainBoxStats:
    """Boxplot statistics for one stain's SF distribution."""

    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class AnalysisReport:
    """Per-rank and per-stain SF aggregates plus rank correlations.

    per_stain_srcc maps stain name to Spearman(rank, SF) over that
    stain's images, or None when the stain has a single rank.
    """

    per_rank_mean_sf: tuple  # (rank, mean, std, count) rows
    per_stain_sf: dict  # stain -> StainBoxStats
    per_stain_srcc: dict  # stain -> float | None
    mean_srcc: float
    std_srcc: float

    def to_dict(self) -> dict:
        return {
            "per_rank_mean_sf": [
                {"rank": r, "mean": m, "std": s, "count": c}
                for (r, m, s, c) in self.per_rank_mean_sf
            ],
            "per_stain_sf": {k: asdict(v) for k, v in self.per_stain_sf.items()},
            "per_stain_srcc": dict(self.per_stain_srcc),
            "summary": {"mean_srcc": self.mean_srcc, "std_srcc": self.std_srcc},
        }


def _box_stats(values: np.ndarray) -> StainBoxStats:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    low_fence = q1 - 1.5 * iqr
    high_fence = q3 + 1.5 * iqr
    inside = values[(values >= low_fence) & (values <= high_fence)]
    # whiskers extend to the most extreme points within the fences
    lo = float(inside.min()) if inside.size else float(q1)
    hi = float(inside.max()) if inside.size else float(q3)
    return StainBoxStats(
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        whisker_low=lo,
        whisker_high=hi,
        mean=float(values.mean()),
        std=float(values.std()),
        count=int(values.size),
    )


def analyze_dataset(manifest: DatasetManifest, sf_values=None) -> AnalysisReport:
    """Compute SF statistics and SF-rank correlations for a dataset.

    sf_values may carry precomputed per-entry SF scores (same order as
    manifest.entries); otherwise images are loaded from disk. A stain
    represented at a single rank gets srcc None rather than being
    dropped.
    """
    if not manifest.entries:
        raise ValidationError("manifest has no entries")
    if sf_values is None:
        sf_values = np.array(
            [
                spatial_frequency(load_image(resolve_image_path(manifest, e)))
                for e in manifest.entries
            ]
        )
    else:
        sf_values = np.asarray(sf_values, dtype=np.float64)
        if len(sf_values) != len(manifest.entries):
            raise ValidationError("sf_values length does not match manifest")

    ranks = np.array([e.rank for e in manifest.entries])
    stains = [e.stain for e in manifest.entries]

    per_rank = []
    for r in sorted(set(ranks.tolist())):
        sel = sf_values[ranks == r]
        per_rank.append((int(r), float(sel.mean()), float(sel.std()), int(sel.size)))

    per_stain_sf = {}
    per_stain_srcc: dict = {}
    defined = []
    for stain in manifest.stain_vocabulary:
        sel = np.array([s == stain for s in stains])
        if not sel.any():
            continue
        per_stain_sf[stain] = _box_stats(sf_values[sel])
        stain_ranks = ranks[sel]
        if len(set(stain_ranks.tolist())) < 2:
            per_stain_srcc[stain] = None
            continue
        rho = srcc(stain_ranks, sf_values[sel])
        per_stain_srcc[stain] = rho
        defined.append(rho)

    if defined:
        mean_rho = float(np.mean(defined))
        std_rho = float(np.std(defined))
    else:
        mean_rho = float("nan")
        std_rho = float("nan")

    return AnalysisReport(
        per_rank_mean_sf=tuple(per_rank),
        per_stain_sf=per_stain_sf,
        per_stain_srcc=per_stain_srcc,
        mean_srcc=mean_rho,
        std_srcc=std_rho,
    )


def write_report(report: AnalysisReport, out_dir) -> None:
    """Emit report.json plus plot-ready rank_curve.csv and stain_boxplot.csv."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
    with open(out_dir / "rank_curve.csv", "w", encoding="utf-8") as f:
        f.write("rank,mean_sf,std_sf,count\n")
        for r, m, s, c in report.per_rank_mean_sf:
            f.write(f"{r},{m:.10g},{s:.10g},{c}\n")
    with open(out_dir / "stain_boxplot.csv", "w", encoding="utf-8") as f:
        f.write(
            "stain,q1,median,q3,whisker_low,whisker_high,mean,std,count,srcc\n"
        )
        for stain, box in report.per_stain_sf.items():
            rho = report.per_stain_srcc.get(stain)
            rho_s = "" if rho is None else f"{rho:.10g}"
            f.write(
                f"{stain},{box.q1:.10g},{box.median:.10g},{box.q3:.10g},"
                f"{box.whisker_low:.10g},{box.whisker_high:.10g},"
                f"{box.mean:.10g},{box.std:.10g},{box.count},{rho_s}\n"
            )
