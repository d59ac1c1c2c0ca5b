"""(p, p, s) tokenization of cubes, masking plans and fixed positional embeddings.

Tokens are indexed in row-major (row, col, band-group) order:
``index = (i * gw + j) * gs + g``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Iterable

import numpy as np

from .datacube import Cube

__all__ = [
    "STRATEGIES",
    "GridDims",
    "MaskPlan",
    "TokenGrid",
    "build_pos_embed",
    "mask_from_band_match",
    "n_masked_units",
    "patchify",
    "sample_mask",
    "unpatchify",
]

STRATEGIES = ("spatial", "spectral", "spatial-spectral", "fixed-bands")
RANDOM_STRATEGIES = STRATEGIES[:3]


@dataclass(frozen=True)
class GridDims:
    gh: int
    gw: int
    gs: int
    p: int
    s: int

    def __post_init__(self) -> None:
        if min(self.gh, self.gw, self.gs, self.p, self.s) < 1:
            raise ValueError(f"grid dims must all be >= 1: {self}")

    @classmethod
    def for_shape(cls, H: int, W: int, C: int, p: int, s: int) -> "GridDims":
        if p < 1 or s < 1:
            raise ValueError("patch side p and group size s must be >= 1")
        if H % p or W % p:
            raise ValueError(f"patch side {p} does not divide spatial dims {H}x{W}")
        if C % s:
            raise ValueError(f"group size {s} does not divide band count {C}")
        return cls(H // p, W // p, C // s, p, s)

    @property
    def n_tokens(self) -> int:
        return self.gh * self.gw * self.gs

    @property
    def token_len(self) -> int:
        return self.p * self.p * self.s

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.gh * self.p, self.gw * self.p, self.gs * self.s)

    def index(self, i: int, j: int, g: int) -> int:
        return (i * self.gw + j) * self.gs + g

    def coords(self) -> np.ndarray:
        """(n_tokens, 3) array of (i, j, g) per token index."""
        i, j, g = np.meshgrid(np.arange(self.gh), np.arange(self.gw), np.arange(self.gs), indexing="ij")
        return np.stack([i.ravel(), j.ravel(), g.ravel()], axis=1)

    def to_dict(self) -> dict[str, int]:
        return {"gh": self.gh, "gw": self.gw, "gs": self.gs, "p": self.p, "s": self.s}


@dataclass
class TokenGrid:
    dims: GridDims
    tokens: np.ndarray

    def __post_init__(self) -> None:
        if self.tokens.shape != (self.dims.n_tokens, self.dims.token_len):
            raise ValueError(
                f"token array shape {self.tokens.shape} != ({self.dims.n_tokens}, {self.dims.token_len})"
            )


def _to_array(cube: Any) -> np.ndarray:
    return cube.data if isinstance(cube, Cube) else np.asarray(cube)


def patchify(cube: Any, p: int, s: int) -> TokenGrid:
    x = _to_array(cube)
    H, W, C = x.shape
    d = GridDims.for_shape(H, W, C, p, s)
    t = x.reshape(d.gh, p, d.gw, p, d.gs, s).transpose(0, 2, 4, 1, 3, 5)
    return TokenGrid(d, t.reshape(d.n_tokens, d.token_len))


def unpatchify(grid: TokenGrid, H: int, W: int, C: int) -> np.ndarray:
    d = grid.dims
    if d.shape != (H, W, C):
        raise ValueError(f"grid covers {d.shape}, requested {(H, W, C)}")
    t = grid.tokens.reshape(d.gh, d.gw, d.gs, d.p, d.p, d.s).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(H, W, C)


@dataclass(frozen=True)
class MaskPlan:
    """Which tokens the encoder does not see. ``masked`` is sorted and duplicate-free."""

    dims: GridDims
    masked: tuple[int, ...]
    strategy: str
    ratio: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        m = tuple(sorted(set(int(k) for k in self.masked)))
        if m and (m[0] < 0 or m[-1] >= self.dims.n_tokens):
            raise ValueError("masked token index out of range")
        object.__setattr__(self, "masked", m)

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.dims.n_tokens, dtype=bool)
        out[list(self.masked)] = True
        return out

    @property
    def visible(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def masked_idx(self) -> np.ndarray:
        return np.asarray(self.masked, dtype=np.int64)

    @property
    def n_visible(self) -> int:
        return self.dims.n_tokens - len(self.masked)

    def pixel_mask(self) -> np.ndarray:
        """Boolean (H, W, C) array, True where the pixel belongs to a masked token."""
        d = self.dims
        m = np.repeat(self.mask[:, None], d.token_len, axis=1)
        return unpatchify(TokenGrid(d, m), *d.shape)

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "r": self.ratio,
            "seed": self.seed,
            "dims": self.dims.to_dict(),
            "masked": list(self.masked),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MaskPlan":
        return cls(GridDims(**d["dims"]), tuple(d["masked"]), d["strategy"], d.get("r"), d.get("seed"))


def n_masked_units(r: float, n_units: int) -> int:
    """round(r * n) with halves rounded away from zero."""
    return int(math.floor(r * n_units + 0.5))


def sample_mask(strategy: str, dims: GridDims, r: float, seed: int) -> MaskPlan:
    """Uniformly mask exactly round(r*N) units without replacement.

    Units are band groups (spectral), spatial patches (spatial) or single
    tokens (spatial-spectral).
    """
    if strategy not in RANDOM_STRATEGIES:
        raise ValueError(f"strategy must be one of {RANDOM_STRATEGIES}, got {strategy!r}")
    if not (0.0 <= r < 1.0):
        raise ValueError(f"masking ratio must lie in [0, 1), got {r}")
    rng = np.random.default_rng(seed)
    coords = dims.coords()
    if strategy == "spectral":
        units = rng.permutation(dims.gs)[: n_masked_units(r, dims.gs)]
        masked = np.flatnonzero(np.isin(coords[:, 2], units))
    elif strategy == "spatial":
        n_sp = dims.gh * dims.gw
        units = rng.permutation(n_sp)[: n_masked_units(r, n_sp)]
        masked = np.flatnonzero(np.isin(coords[:, 0] * dims.gw + coords[:, 1], units))
    else:
        masked = rng.permutation(dims.n_tokens)[: n_masked_units(r, dims.n_tokens)]
    return MaskPlan(dims, tuple(masked.tolist()), strategy, float(r), int(seed))


def _matched_hsi_indices(matches: Any) -> list[int]:
    if hasattr(matches, "matches"):
        return [int(m.hsi_index) for m in matches.matches]
    return [int(k) for k in matches]


def mask_from_band_match(matches: Any, dims: GridDims) -> MaskPlan:
    """Fixed-bands plan: a band group is visible iff at least one of its bands is matched.

    ``matches`` is a BandMatchSet or an iterable of matched HSI band indices.
    """
    C = dims.gs * dims.s
    idx = _matched_hsi_indices(matches)
    bad = [k for k in idx if not 0 <= k < C]
    if bad:
        raise ValueError(f"matched band indices out of range [0, {C}): {bad}")
    visible_groups = {k // dims.s for k in idx}
    g = dims.coords()[:, 2]
    masked = np.flatnonzero(~np.isin(g, sorted(visible_groups)))
    return MaskPlan(dims, tuple(masked.tolist()), "fixed-bands")


def _sincos_1d(d: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2))
    out = np.outer(pos.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=64)
def _pos_embed_cached(dims: GridDims, d: int) -> np.ndarray:
    d_spec = d // 4
    d_sp = d - d_spec
    c = dims.coords()
    emb = np.concatenate(
        [_sincos_1d(d_sp // 2, c[:, 0]), _sincos_1d(d_sp // 2, c[:, 1]), _sincos_1d(d_spec, c[:, 2])],
        axis=1,
    )
    emb.setflags(write=False)
    return emb


def build_pos_embed(dims: GridDims, d: int) -> np.ndarray:
    """Fixed (n_tokens, d) table: 2-D sin-cos over (i, j) in the first 3d/4 columns, 1-D over g in the last d/4."""
    if d < 16 or d % 16:
        raise ValueError(f"embedding width must be a positive multiple of 16, got {d}")
    return _pos_embed_cached(dims, d)


def spectral_slice(d: int) -> slice:
    return slice(d - d // 4, d)


def group_of_band(band: int, s: int) -> int:
    return band // s


def visible_groups(plan: MaskPlan) -> list[int]:
    m = plan.mask.reshape(plan.dims.gh * plan.dims.gw, plan.dims.gs)
    return [g for g in range(plan.dims.gs) if not m[:, g].all()]


def iter_units(dims: GridDims, strategy: str) -> Iterable[np.ndarray]:
    """Token-index groups that share a mask decision under ``strategy``."""
    c = dims.coords()
    if strategy == "spectral":
        for g in range(dims.gs):
            yield np.flatnonzero(c[:, 2] == g)
    elif strategy == "spatial":
        for u in range(dims.gh * dims.gw):
            yield np.flatnonzero(c[:, 0] * dims.gw + c[:, 1] == u)
    else:
        for k in range(dims.n_tokens):
            yield np.array([k])
