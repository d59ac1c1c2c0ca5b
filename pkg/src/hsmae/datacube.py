"""Hyperspectral cube container, HSC binary I/O, band statistics and synthetic scenes.

HSC layout: one UTF-8 JSON header line terminated by ``\\n``, followed by
``H*W*C`` little-endian float32 values in row-major (H, W, C) order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "BandInfo",
    "BandTable",
    "BandStats",
    "Cube",
    "CubeFormatError",
    "SynthSpec",
    "compute_stats",
    "denormalize",
    "gen_synthetic",
    "linear_band_table",
    "load_cube",
    "normalize",
    "save_cube",
]

HSC_MAGIC = "HSC1"
STD_FLOOR = 1e-6


class CubeFormatError(ValueError):
    """Raised when a cube or HSC file violates the format contract."""


@dataclass(frozen=True)
class BandInfo:
    index: int
    center_nm: float
    width_nm: float

    def __post_init__(self) -> None:
        if self.index < 0:
            raise CubeFormatError(f"band index must be >= 0, got {self.index}")
        if not (self.center_nm > 0 and self.width_nm > 0):
            raise CubeFormatError(f"band {self.index}: center and width must be > 0")
        if self.center_nm - self.width_nm / 2 <= 0:
            raise CubeFormatError(f"band {self.index}: interval must lie above 0 nm")

    @property
    def lo(self) -> float:
        return self.center_nm - self.width_nm / 2

    @property
    def hi(self) -> float:
        return self.center_nm + self.width_nm / 2

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "center_nm": self.center_nm, "width_nm": self.width_nm}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BandInfo":
        return cls(int(d["index"]), float(d["center_nm"]), float(d["width_nm"]))


@dataclass(frozen=True)
class BandTable:
    """Ordered band list of one sensor. Indices run 0..C-1, centers strictly increase."""

    sensor_name: str
    bands: tuple[BandInfo, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bands", tuple(self.bands))
        if not self.bands:
            raise CubeFormatError("band table must not be empty")
        for k, b in enumerate(self.bands):
            if b.index != k:
                raise CubeFormatError(f"band indices must be contiguous from 0 (position {k} has {b.index})")
        centers = [b.center_nm for b in self.bands]
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise CubeFormatError("band centers must be strictly increasing")

    def __len__(self) -> int:
        return len(self.bands)

    @property
    def centers(self) -> np.ndarray:
        return np.array([b.center_nm for b in self.bands], dtype=np.float64)

    @property
    def widths(self) -> np.ndarray:
        return np.array([b.width_nm for b in self.bands], dtype=np.float64)

    def nearest(self, wavelength_nm: float) -> int:
        return int(np.argmin(np.abs(self.centers - wavelength_nm)))

    def to_list(self) -> list[dict[str, Any]]:
        return [b.to_dict() for b in self.bands]

    def to_dict(self) -> dict[str, Any]:
        return {"sensor_name": self.sensor_name, "bands": self.to_list()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BandTable":
        return cls(str(d.get("sensor_name", "")), tuple(BandInfo.from_dict(b) for b in d["bands"]))

    @classmethod
    def from_json(cls, path: str | Path) -> "BandTable":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if isinstance(d, list):
            d = {"sensor_name": Path(path).stem, "bands": d}
        return cls.from_dict(d)


def linear_band_table(n: int, lo_nm: float = 420.0, hi_nm: float = 2450.0, sensor_name: str = "linear") -> BandTable:
    """``n`` contiguous bands tiling [lo_nm, hi_nm]; width equals spacing."""
    width = (hi_nm - lo_nm) / n
    centers = lo_nm + width * (np.arange(n) + 0.5)
    return BandTable(sensor_name, tuple(BandInfo(k, float(c), float(width)) for k, c in enumerate(centers)))


@dataclass
class Cube:
    """An (H, W, C) reflectance array plus its band table."""

    data: np.ndarray
    band_table: BandTable

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise CubeFormatError(f"cube data must be 3-D (H, W, C), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise CubeFormatError(f"cube dims must be >= 1, got {self.data.shape}")
        if len(self.band_table) != self.data.shape[2]:
            raise CubeFormatError(
                f"band table mismatch: {len(self.band_table)} bands for C={self.data.shape[2]}"
            )
        if not np.all(np.isfinite(self.data)):
            raise CubeFormatError("cube contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def H(self) -> int:
        return self.data.shape[0]

    @property
    def W(self) -> int:
        return self.data.shape[1]

    @property
    def C(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "Cube":
        return Cube(data, self.band_table)


def _header(cube: Cube) -> dict[str, Any]:
    H, W, C = cube.shape
    return {
        "magic": HSC_MAGIC,
        "H": H,
        "W": W,
        "C": C,
        "dtype": "f32le",
        "sensor_name": cube.band_table.sensor_name,
        "bands": cube.band_table.to_list(),
    }


def save_cube(cube: Cube, path: str | Path) -> None:
    path = Path(path)
    header = json.dumps(_header(cube), separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header + b"\n")
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write cube to {path}: {exc}") from exc


def load_cube(path: str | Path) -> Cube:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such cube file: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CubeFormatError(f"{path}: missing header line")
    try:
        hdr = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CubeFormatError(f"{path}: unreadable header: {exc}") from exc
    if hdr.get("magic") != HSC_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {hdr.get('magic')!r}")
    if hdr.get("dtype") != "f32le":
        raise CubeFormatError(f"{path}: unsupported dtype {hdr.get('dtype')!r}")
    H, W, C = int(hdr["H"]), int(hdr["W"]), int(hdr["C"])
    payload = raw[nl + 1 :]
    if len(payload) != 4 * H * W * C:
        raise CubeFormatError(
            f"{path}: payload size mismatch (expected {4 * H * W * C} bytes, got {len(payload)})"
        )
    if len(hdr["bands"]) != C:
        raise CubeFormatError(f"{path}: band table mismatch ({len(hdr['bands'])} bands for C={C})")
    table = BandTable(str(hdr.get("sensor_name", "")), tuple(BandInfo.from_dict(b) for b in hdr["bands"]))
    data = np.frombuffer(payload, dtype="<f4").reshape(H, W, C).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError(f"{path}: non-finite values in payload")
    return Cube(data, table)


@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise CubeFormatError("band stats mean/std must be equal-length vectors")
        if not np.all(self.std > 0):
            raise CubeFormatError("band stats std must be strictly positive")

    @property
    def C(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict[str, Sequence[float]]) -> "BandStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_stats(cubes: Sequence[Cube]) -> BandStats:
    """Per-band population mean/std over every pixel of every cube, std floored at 1e-6."""
    if not cubes:
        raise ValueError("compute_stats needs at least one cube")
    C = cubes[0].C
    if any(c.C != C for c in cubes):
        raise CubeFormatError("all cubes must share the same band count")
    flat = np.concatenate([c.data.reshape(-1, C).astype(np.float64) for c in cubes], axis=0)
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    return BandStats(mean, np.maximum(std, STD_FLOOR))


def _check_stats(cube: Cube, stats: BandStats) -> None:
    if stats.C != cube.C:
        raise CubeFormatError(f"stats have {stats.C} bands, cube has {cube.C}")


def normalize(cube: Cube, stats: BandStats) -> Cube:
    _check_stats(cube, stats)
    return cube.with_data((cube.data.astype(np.float64) - stats.mean) / stats.std)


def denormalize(cube: Cube, stats: BandStats) -> Cube:
    _check_stats(cube, stats)
    return cube.with_data(cube.data.astype(np.float64) * stats.std + stats.mean)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic linear-mixing scene.

    ``noise`` is the std of additive Gaussian noise (0 disables it). ``n_peaks``
    Gaussian bumps make up each endmember spectrum; ``n_waves`` random cosines
    make up each (pre-softmax) abundance field.
    """

    H: int
    W: int
    C: int
    n_endmembers: int = 4
    seed: int = 0
    noise: float = 0.0
    n_peaks: int = 3
    n_waves: int = 3
    max_freq: float = 1.5
    sharpness: float = 2.0
    band_table: BandTable | None = field(default=None, compare=False)


def gen_synthetic(spec: SynthSpec) -> Cube:
    """Convex mixture of smooth endmember spectra under smooth abundance maps; values in [0, 1]."""
    if spec.n_endmembers < 1:
        raise ValueError("n_endmembers must be >= 1")
    if min(spec.H, spec.W, spec.C) < 1:
        raise ValueError("H, W, C must be >= 1")
    table = spec.band_table or linear_band_table(spec.C, sensor_name="synthetic")
    if len(table) != spec.C:
        raise CubeFormatError(f"band table mismatch: {len(table)} bands for C={spec.C}")
    rng = np.random.default_rng(spec.seed)
    wl = table.centers
    lo, hi = float(wl.min()), float(wl.max())
    span = max(hi - lo, 1.0)

    K = spec.n_endmembers
    spectra = np.empty((K, spec.C))
    for k in range(K):
        base = rng.uniform(0.05, 0.25)
        centers = rng.uniform(lo - 0.1 * span, hi + 0.1 * span, spec.n_peaks)
        widths = rng.uniform(0.05, 0.3, spec.n_peaks) * span
        amps = rng.uniform(0.1, 0.6, spec.n_peaks)
        s = base + (amps[:, None] * np.exp(-0.5 * ((wl[None, :] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
        spectra[k] = s / max(1.0, s.max())

    yy, xx = np.meshgrid(np.arange(spec.H) / spec.H, np.arange(spec.W) / spec.W, indexing="ij")
    logits = np.zeros((K, spec.H, spec.W))
    for k in range(K):
        fy = rng.uniform(-spec.max_freq, spec.max_freq, spec.n_waves)
        fx = rng.uniform(-spec.max_freq, spec.max_freq, spec.n_waves)
        ph = rng.uniform(0, 2 * math.pi, spec.n_waves)
        for a, b, c in zip(fy, fx, ph):
            logits[k] += np.cos(2 * math.pi * (a * yy + b * xx) + c)
    logits *= spec.sharpness
    logits -= logits.max(axis=0, keepdims=True)
    abund = np.exp(logits)
    abund /= abund.sum(axis=0, keepdims=True)

    data = np.einsum("khw,kc->hwc", abund, spectra)
    if spec.noise > 0:
        data = data + rng.normal(0.0, spec.noise, data.shape)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return Cube(data, table)


def iter_cube_paths(directory: str | Path) -> Iterable[Path]:
    return sorted(Path(directory).glob("*.hsc"))
