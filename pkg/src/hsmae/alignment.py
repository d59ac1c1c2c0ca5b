"""Wavelength-interval band matching between a multispectral and a hyperspectral sensor.

An HSI band is matched to an MSI band when the MSI interval covers more than
``threshold`` (default 0.6, strict) of the reference width. Matched HSI bands
become the fixed visible bands when reconstructing HSI from MSI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .datacube import BandInfo, BandTable, Cube, linear_band_table

__all__ = [
    "BandMatch",
    "BandMatchSet",
    "assemble_input",
    "band_overlap",
    "match_bands",
    "sensor_table",
    "simulate_msi",
]

DENOMINATORS = ("hsi", "msi", "union")


def sensor_table(name: str) -> BandTable:
    """Built-in band table by name (``sentinel2``/``hls-s30``, ``emit``, ``enmap``, ``desk``) or JSON path."""
    key = name.lower()
    if key == "desk":
        return linear_band_table(24, sensor_name="desk")
    if key == "hls-s30":
        key = "sentinel2"
    if key in ("sentinel2", "emit", "enmap"):
        with resources.files("hsmae.data").joinpath(f"{key}.json").open(encoding="utf-8") as fh:
            return BandTable.from_dict(json.load(fh))
    path = Path(name)
    if path.is_file():
        return BandTable.from_json(path)
    raise ValueError(f"unknown sensor table {name!r}")


def band_overlap(msi: BandInfo, hsi: BandInfo, denominator: str = "hsi") -> float:
    """Intersection length of the two band intervals over the chosen reference width."""
    inter = max(0.0, min(msi.hi, hsi.hi) - max(msi.lo, hsi.lo))
    if denominator == "hsi":
        ref = hsi.width_nm
    elif denominator == "msi":
        ref = msi.width_nm
    elif denominator == "union":
        ref = max(msi.hi, hsi.hi) - min(msi.lo, hsi.lo)
    else:
        raise ValueError(f"denominator must be one of {DENOMINATORS}")
    return min(1.0, inter / ref)


@dataclass(frozen=True)
class BandMatch:
    msi_index: int
    hsi_index: int
    overlap_fraction: float

    def to_dict(self) -> dict[str, Any]:
        return {"msi_index": self.msi_index, "hsi_index": self.hsi_index, "overlap_fraction": self.overlap_fraction}


@dataclass(frozen=True)
class BandMatchSet:
    msi_table: BandTable
    hsi_table: BandTable
    matches: tuple[BandMatch, ...]
    threshold: float = 0.6
    denominator: str = "hsi"

    def __post_init__(self) -> None:
        object.__setattr__(self, "matches", tuple(sorted(self.matches, key=lambda m: m.hsi_index)))
        seen = [m.hsi_index for m in self.matches]
        if len(seen) != len(set(seen)):
            raise ValueError("each HSI band may be matched at most once")
        for m in self.matches:
            if not 0 <= m.hsi_index < len(self.hsi_table) or not 0 <= m.msi_index < len(self.msi_table):
                raise ValueError(f"match {m} refers to a band outside its table")

    @property
    def hsi_indices(self) -> list[int]:
        return [m.hsi_index for m in self.matches]

    def source_of(self) -> dict[int, int]:
        return {m.hsi_index: m.msi_index for m in self.matches}

    def to_dict(self) -> dict[str, Any]:
        return {
            "threshold": self.threshold,
            "denominator": self.denominator,
            "msi_table": self.msi_table.to_dict(),
            "hsi_table": self.hsi_table.to_dict(),
            "matches": [m.to_dict() for m in self.matches],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BandMatchSet":
        return cls(
            BandTable.from_dict(d["msi_table"]),
            BandTable.from_dict(d["hsi_table"]),
            tuple(BandMatch(int(m["msi_index"]), int(m["hsi_index"]), float(m["overlap_fraction"])) for m in d["matches"]),
            float(d.get("threshold", 0.6)),
            d.get("denominator", "hsi"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "BandMatchSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def match_bands(
    msi_table: BandTable, hsi_table: BandTable, threshold: float = 0.6, denominator: str = "hsi"
) -> BandMatchSet:
    """All (msi, hsi) pairs with overlap strictly above ``threshold``.

    When several MSI bands qualify for one HSI band, the larger overlap wins,
    then the lower MSI index.
    """
    best: dict[int, BandMatch] = {}
    for h in hsi_table.bands:
        for m in msi_table.bands:
            f = band_overlap(m, h, denominator)
            if f <= threshold:
                continue
            cur = best.get(h.index)
            if cur is None or (f, -m.index) > (cur.overlap_fraction, -cur.msi_index):
                best[h.index] = BandMatch(m.index, h.index, f)
    return BandMatchSet(msi_table, hsi_table, tuple(best.values()), threshold, denominator)


def assemble_input(msi: Cube | np.ndarray, matches: BandMatchSet, group: int) -> np.ndarray:
    """Build the (H, W, C_hsi) encoder input from an MSI cube.

    Matched HSI bands copy their MSI band; unmatched bands inside a group with
    at least one match take the value of the nearest matched band in that group
    (lower index on ties); groups without matches stay 0.
    """
    x = msi.data if isinstance(msi, Cube) else np.asarray(msi)
    if x.ndim != 3 or x.shape[2] != len(matches.msi_table):
        raise ValueError(f"MSI array shape {x.shape} does not fit a {len(matches.msi_table)}-band table")
    C = len(matches.hsi_table)
    if C % group:
        raise ValueError(f"group size {group} does not divide {C} HSI bands")
    H, W, _ = x.shape
    out = np.zeros((H, W, C), dtype=np.float64)
    src = matches.source_of()
    for g0 in range(0, C, group):
        matched = [b for b in range(g0, g0 + group) if b in src]
        if not matched:
            continue
        for b in range(g0, g0 + group):
            nearest = min(matched, key=lambda k: (abs(k - b), k))
            out[:, :, b] = x[:, :, src[nearest]]
    return out


def simulate_msi(hsi: Cube, msi_table: BandTable) -> Cube:
    """Box-response MSI bands: each is the overlap-length-weighted mean of the HSI bands it covers."""
    hb = hsi.band_table.bands
    weights = np.zeros((len(hb), len(msi_table)))
    for j, m in enumerate(msi_table.bands):
        for i, h in enumerate(hb):
            weights[i, j] = max(0.0, min(m.hi, h.hi) - max(m.lo, h.lo))
        if weights[:, j].sum() == 0:
            nearest = int(np.argmin(np.abs(hsi.band_table.centers - m.center_nm)))
            weights[nearest, j] = 1.0
    weights /= weights.sum(axis=0, keepdims=True)
    data = hsi.data.astype(np.float64) @ weights
    return Cube(data.astype(np.float32), msi_table)
