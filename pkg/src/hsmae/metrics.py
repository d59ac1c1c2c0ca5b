"""Reconstruction metrics: masked / unmasked / total MSE and global per-band SSIM.

SSIM here is the single-window form: means, variances and covariance are
taken over the whole band image (population statistics), with
``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2``. The cube score is the unweighted
mean over bands. This differs from the usual 7x7 / Gaussian-window SSIM.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .datacube import BandStats
from .patching import MaskPlan

__all__ = ["EvalReport", "MseReport", "evaluate", "mse_report", "ssim", "ssim_band"]

CSV_FIELDS = ("sample_id", "total_mse", "masked_mse", "unmasked_mse", "ssim")


@dataclass(frozen=True)
class MseReport:
    total_mse: float
    masked_mse: float
    unmasked_mse: float
    masked_pixels: int
    unmasked_pixels: int
    space: str = "reflectance"


def mse_report(recon: np.ndarray, target: np.ndarray, plan: MaskPlan, space: str = "reflectance") -> MseReport:
    recon, target = np.asarray(recon), np.asarray(target)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {target.shape}")
    if plan.dims.shape != recon.shape:
        raise ValueError(f"plan covers {plan.dims.shape}, arrays are {recon.shape}")
    sq = (recon.astype(np.float64) - target.astype(np.float64)) ** 2
    pm = plan.pixel_mask()
    nm, nu = int(pm.sum()), int((~pm).sum())
    return MseReport(
        float(sq.mean()),
        float(sq[pm].sum() / nm) if nm else 0.0,
        float(sq[~pm].sum() / nu) if nu else 0.0,
        nm,
        nu,
        space,
    )


def ssim_band(x: np.ndarray, y: np.ndarray, L: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy, cxy = (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()
    return float(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def ssim(x: np.ndarray, y: np.ndarray, L: float = 1.0) -> float:
    """Mean over bands of the global SSIM; 2-D inputs are a single band."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if L <= 0:
        raise ValueError("dynamic range L must be > 0")
    if x.ndim == 2:
        return ssim_band(x, y, L)
    return float(np.mean([ssim_band(x[..., c], y[..., c], L) for c in range(x.shape[-1])]))


@dataclass(frozen=True)
class EvalReport:
    total_mse: float
    masked_mse: float
    unmasked_mse: float
    ssim: float
    masked_pixels: int
    unmasked_pixels: int
    space: str = "reflectance"
    normalized: dict[str, float] | None = None
    n_samples: int = 1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _mean_report(rows: Sequence[EvalReport]) -> EvalReport:
    norm = None
    if rows[0].normalized is not None:
        norm = {k: float(np.mean([r.normalized[k] for r in rows])) for k in rows[0].normalized}  # type: ignore[index]
    return EvalReport(
        float(np.mean([r.total_mse for r in rows])),
        float(np.mean([r.masked_mse for r in rows])),
        float(np.mean([r.unmasked_mse for r in rows])),
        float(np.mean([r.ssim for r in rows])),
        sum(r.masked_pixels for r in rows),
        sum(r.unmasked_pixels for r in rows),
        rows[0].space,
        norm,
        len(rows),
    )


def evaluate(
    model: Any,
    dataset: Sequence[tuple[np.ndarray, np.ndarray, MaskPlan]],
    stats: BandStats,
    L: float = 1.0,
    sample_ids: Sequence[str] | None = None,
) -> tuple[EvalReport, list[EvalReport], str]:
    """Score ``model.reconstruct`` on (input, target, plan) triples in reflectance units.

    Returns the dataset-mean report, the per-sample reports (both spaces) and
    the per-sample CSV text (reflectance space) in dataset order.
    """
    if not dataset:
        raise ValueError("empty evaluation dataset")
    ids = list(sample_ids) if sample_ids is not None else [str(k) for k in range(len(dataset))]
    rows: list[EvalReport] = []
    for x, y, plan in dataset:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        recon_n = np.asarray(model.reconstruct((x - stats.mean) / stats.std, plan), dtype=np.float64)
        recon = recon_n * stats.std + stats.mean
        refl = mse_report(recon, y, plan)
        norm = mse_report(recon_n, (y - stats.mean) / stats.std, plan, space="normalized")
        rows.append(
            EvalReport(
                refl.total_mse,
                refl.masked_mse,
                refl.unmasked_mse,
                ssim(recon, y, L),
                refl.masked_pixels,
                refl.unmasked_pixels,
                "reflectance",
                {"total_mse": norm.total_mse, "masked_mse": norm.masked_mse, "unmasked_mse": norm.unmasked_mse},
            )
        )
    return _mean_report(rows), rows, rows_to_csv(ids, rows)


def rows_to_csv(ids: Sequence[str], rows: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for sid, r in zip(ids, rows):
        w.writerow([sid, repr(r.total_mse), repr(r.masked_mse), repr(r.unmasked_mse), repr(r.ssim)])
    return buf.getvalue()


def read_csv_rows(path_or_text: str | Path) -> list[dict[str, str]]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    return list(csv.DictReader(io.StringIO(text)))
