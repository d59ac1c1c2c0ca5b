"""SMAE1 checkpoints: one JSON manifest line, then a raw little-endian parameter payload.

The manifest lists every array as ``{name, shape, offset}`` (byte offsets into
the payload) in canonical parameter order, followed by optimizer moments when
present. Float32 models write ``f32le``; float64 models write ``f64le`` so that
resumed 64-bit runs stay bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .datacube import BandStats, BandTable
from .model import IdentityModel, ModelConfig, ModelState, param_shapes
from .optim import OptState

FORMAT = "SMAE1"
_DTYPES = {"f32le": "<f4", "f64le": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelState | IdentityModel
    step: int = 0
    opt: OptState | None = None
    stats: BandStats | None = None
    hsi_table: BandTable | None = None
    lineage: list[dict[str, Any]] = field(default_factory=list)


def _dtype_tag(dtype: np.dtype) -> str:
    return "f64le" if np.dtype(dtype) == np.float64 else "f32le"


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    manifest: dict[str, Any] = {"format": FORMAT, "step": ckpt.step, "lineage": ckpt.lineage}
    if ckpt.stats is not None:
        manifest["stats"] = ckpt.stats.to_dict()
    if ckpt.hsi_table is not None:
        manifest["hsi_table"] = ckpt.hsi_table.to_dict()
    chunks: list[bytes] = []
    if isinstance(ckpt.model, IdentityModel):
        manifest.update(kind="identity", config=None, dtype="f32le", arrays=[])
    else:
        m = ckpt.model
        tag = _dtype_tag(m.dtype)
        arrays: list[tuple[str, np.ndarray]] = [(n, m.params[n]) for n, _ in param_shapes(m.config)]
        if ckpt.opt is not None:
            arrays += [(f"opt.m.{n}", ckpt.opt.m[n]) for n, _ in param_shapes(m.config)]
            arrays += [(f"opt.v.{n}", ckpt.opt.v[n]) for n, _ in param_shapes(m.config)]
            manifest["opt_step"] = ckpt.opt.step
        entries, offset = [], 0
        for name, a in arrays:
            b = np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += len(b)
            chunks.append(b)
        manifest.update(kind="model", config=m.config.to_dict(), seed=m.seed, dtype=tag, arrays=entries)
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for b in chunks:
            fh.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    try:
        man = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if man.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} checkpoint")
    stats = BandStats.from_dict(man["stats"]) if "stats" in man else None
    table = BandTable.from_dict(man["hsi_table"]) if "hsi_table" in man else None
    lineage = list(man.get("lineage", []))
    if man.get("kind") == "identity":
        return Checkpoint(IdentityModel(), int(man["step"]), None, stats, table, lineage)

    cfg = ModelConfig.from_dict(man["config"])
    np_dtype = np.dtype(_DTYPES[man["dtype"]])
    payload = raw[nl + 1 :]
    arrays: dict[str, np.ndarray] = {}
    for e in man["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * np_dtype.itemsize
        if e["offset"] + n > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        arrays[e["name"]] = (
            np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(shape)), offset=e["offset"])
            .reshape(shape)
            .astype(np_dtype.newbyteorder("="))
        )
    names = [n for n, _ in param_shapes(cfg)]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:3]}")
    for n, shape in param_shapes(cfg):
        if arrays[n].shape != shape:
            raise CheckpointError(f"{path}: {n} has shape {arrays[n].shape}, expected {shape}")
    model = ModelState(cfg, {n: arrays[n] for n in names}, man.get("seed"))
    opt = None
    if f"opt.m.{names[0]}" in arrays:
        opt = OptState({n: arrays[f"opt.m.{n}"] for n in names}, {n: arrays[f"opt.v.{n}"] for n in names}, int(man["opt_step"]))
    return Checkpoint(model, int(man["step"]), opt, stats, table, lineage)
