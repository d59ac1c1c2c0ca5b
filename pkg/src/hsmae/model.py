"""Asymmetric masked-autoencoder transformer over (p, p, s) tokens.

The encoder sees only visible tokens (token projection + fixed positional
embedding -> pre-norm blocks -> norm). The decoder projects the latents to its
own width, scatters them back to their grid positions, fills masked positions
with a learned mask token, adds its positional table, runs its blocks, a final
norm and a linear head back to token space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from . import layers
from .datacube import BandStats, Cube
from .patching import GridDims, MaskPlan, TokenGrid, build_pos_embed, patchify, unpatchify

__all__ = [
    "PRESETS",
    "IdentityModel",
    "LossBreakdown",
    "ModelConfig",
    "ModelState",
    "PosEmbed",
    "decode",
    "encode",
    "forward",
    "holistic_loss",
    "init_model",
    "is_encoder_param",
    "loss_and_grads",
    "param_shapes",
    "pos_embed_for",
    "predict_tokens",
]


@dataclass(frozen=True)
class ModelConfig:
    enc_blocks: int = 2
    dec_blocks: int = 1
    enc_dim: int = 64
    dec_dim: int = 48
    enc_heads: int = 4
    dec_heads: int = 4
    patch: int = 8
    group: int = 4
    mlp_ratio: int = 4
    preset: str = "custom"

    def __post_init__(self) -> None:
        for name in ("enc_dim", "dec_dim", "enc_heads", "dec_heads", "patch", "group", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.enc_blocks < 0 or self.dec_blocks < 0:
            raise ValueError("block counts must be >= 0")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("embedding widths must be divisible by their head counts")

    @property
    def token_len(self) -> int:
        return self.patch * self.patch * self.group

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)


PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(2, 1, 64, 48, 4, 4, patch=8, group=4, mlp_ratio=4, preset="desk"),
    # 4/2 blocks, 768/512 widths, 8/8 heads on 128x128x240 EMIT patches.
    "emit-paper": ModelConfig(4, 2, 768, 512, 8, 8, patch=16, group=10, mlp_ratio=4, preset="emit-paper"),
    # 202 = 2 * 101, so EnMAP band groups are pairs.
    "enmap-paper": ModelConfig(4, 2, 768, 512, 8, 8, patch=16, group=2, mlp_ratio=4, preset="enmap-paper"),
}


def _block_shapes(prefix: str, d: int, ratio: int) -> list[tuple[str, tuple[int, ...]]]:
    h = d * ratio
    return [
        (prefix + "ln1.g", (d,)),
        (prefix + "ln1.b", (d,)),
        (prefix + "attn.qkv.w", (d, 3 * d)),
        (prefix + "attn.qv.b", (2 * d,)),
        (prefix + "attn.proj.w", (d, d)),
        (prefix + "attn.proj.b", (d,)),
        (prefix + "ln2.g", (d,)),
        (prefix + "ln2.b", (d,)),
        (prefix + "mlp.fc1.w", (d, h)),
        (prefix + "mlp.fc1.b", (h,)),
        (prefix + "mlp.fc2.w", (h, d)),
        (prefix + "mlp.fc2.b", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order; checkpoints and optimizers follow it."""
    L, De, Dd = cfg.token_len, cfg.enc_dim, cfg.dec_dim
    out: list[tuple[str, tuple[int, ...]]] = [("tok.w", (L, De)), ("tok.b", (De,))]
    for k in range(cfg.enc_blocks):
        out += _block_shapes(f"enc.{k}.", De, cfg.mlp_ratio)
    out += [("enc_norm.g", (De,)), ("enc_norm.b", (De,))]
    out += [("dec_embed.w", (De, Dd)), ("dec_embed.b", (Dd,)), ("mask_token", (Dd,))]
    for k in range(cfg.dec_blocks):
        out += _block_shapes(f"dec.{k}.", Dd, cfg.mlp_ratio)
    out += [("dec_norm.g", (Dd,)), ("dec_norm.b", (Dd,)), ("head.w", (Dd, L)), ("head.b", (L,))]
    return out


def is_encoder_param(name: str) -> bool:
    return name.startswith(("tok.", "enc.", "enc_norm."))


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int | None = None

    @property
    def dtype(self) -> np.dtype:
        return self.params["tok.w"].dtype

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def astype(self, dtype: Any) -> "ModelState":
        return ModelState(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.seed)

    def reconstruct(self, x: np.ndarray, plan: MaskPlan) -> np.ndarray:
        """Normalized (H, W, C) input -> normalized (H, W, C) reconstruction."""
        grid = patchify(x.astype(self.dtype), self.config.patch, self.config.group)
        recon = decode(self, encode(self, grid, plan), plan)
        return unpatchify(recon, *x.shape)


class IdentityModel:
    """Stub that reconstructs its input unchanged; used to exercise evaluation plumbing."""

    config = None

    def reconstruct(self, x: np.ndarray, plan: MaskPlan) -> np.ndarray:
        return np.array(x, dtype=np.float64, copy=True)


def init_model(cfg: ModelConfig, seed: int, dtype: Any = np.float32) -> ModelState:
    """Linear weights and mask token ~ N(0, 0.02) truncated at 2 std; biases 0; norm gains 1."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            v = np.ones(shape)
        elif name.endswith(".b"):
            v = np.zeros(shape)
        else:
            v = _trunc_normal(rng, shape, 0.02)
        params[name] = v.astype(dtype)
    return ModelState(cfg, params, seed)


@dataclass(frozen=True)
class PosEmbed:
    enc: np.ndarray
    dec: np.ndarray


def pos_embed_for(cfg: ModelConfig, dims: GridDims) -> PosEmbed:
    return PosEmbed(build_pos_embed(dims, cfg.enc_dim), build_pos_embed(dims, cfg.dec_dim))


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    masked: float
    unmasked: float
    masked_pixels: int
    unmasked_pixels: int

    def as_row(self) -> dict[str, float]:
        return {"total": self.total, "masked": self.masked, "unmasked": self.unmasked}


# -- batched internals -------------------------------------------------------------


def _encoder_fwd(p, cfg: ModelConfig, xv, posv):
    x, tok_in = layers.linear_fwd(xv, p["tok.w"], p["tok.b"])
    x = x + posv
    caches = []
    for k in range(cfg.enc_blocks):
        x, c = layers.block_fwd(x, p, f"enc.{k}.", cfg.enc_heads)
        caches.append(c)
    lat, ln = layers.layernorm_fwd(x, p["enc_norm.g"], p["enc_norm.b"])
    return lat, (tok_in, caches, ln)


def _encoder_bwd(dlat, cache, p, cfg: ModelConfig, grads):
    tok_in, caches, ln = cache
    dx, grads["enc_norm.g"], grads["enc_norm.b"] = layers.layernorm_bwd(dlat, ln, p["enc_norm.g"])
    for k in reversed(range(cfg.enc_blocks)):
        dx = layers.block_bwd(dx, caches[k], p, f"enc.{k}.", grads)
    _, grads["tok.w"], grads["tok.b"] = layers.linear_bwd(dx, tok_in, p["tok.w"])


def _decoder_fwd(p, cfg: ModelConfig, lat, vis, msk, posd):
    B, Nv, _ = lat.shape
    N = posd.shape[0]
    z, emb_in = layers.linear_fwd(lat, p["dec_embed.w"], p["dec_embed.b"])
    y = np.empty((B, N, cfg.dec_dim), dtype=z.dtype)
    rows = np.arange(B)[:, None]
    y[rows, vis] = z
    y[rows, msk] = p["mask_token"]
    y = y + posd
    caches = []
    for k in range(cfg.dec_blocks):
        y, c = layers.block_fwd(y, p, f"dec.{k}.", cfg.dec_heads)
        caches.append(c)
    h, ln = layers.layernorm_fwd(y, p["dec_norm.g"], p["dec_norm.b"])
    out, head_in = layers.linear_fwd(h, p["head.w"], p["head.b"])
    return out, (emb_in, vis, msk, caches, ln, head_in)


def _decoder_bwd(dout, cache, p, cfg: ModelConfig, grads):
    emb_in, vis, msk, caches, ln, head_in = cache
    dh, grads["head.w"], grads["head.b"] = layers.linear_bwd(dout, head_in, p["head.w"])
    dy, grads["dec_norm.g"], grads["dec_norm.b"] = layers.layernorm_bwd(dh, ln, p["dec_norm.g"])
    for k in reversed(range(cfg.dec_blocks)):
        dy = layers.block_bwd(dy, caches[k], p, f"dec.{k}.", grads)
    rows = np.arange(dy.shape[0])[:, None]
    grads["mask_token"] = dy[rows, msk].reshape(-1, dy.shape[-1]).sum(axis=0)
    dz = dy[rows, vis]
    dlat, grads["dec_embed.w"], grads["dec_embed.b"] = layers.linear_bwd(dz, emb_in, p["dec_embed.w"])
    return dlat


# -- public single-sample API ------------------------------------------------------


def _check_dims(m: ModelState, dims: GridDims) -> None:
    if (dims.p, dims.s) != (m.config.patch, m.config.group):
        raise ValueError(
            f"grid uses p={dims.p}, s={dims.s}; model expects p={m.config.patch}, s={m.config.group}"
        )


def encode(m: ModelState, grid: TokenGrid, plan: MaskPlan, pos: PosEmbed | None = None) -> np.ndarray:
    """Latents (n_visible, enc_dim) for the visible tokens in canonical order."""
    if grid.dims != plan.dims:
        raise ValueError("token grid and mask plan dims disagree")
    _check_dims(m, grid.dims)
    if plan.n_visible == 0:
        raise ValueError("no visible tokens: the encoder needs at least one")
    pos = pos or pos_embed_for(m.config, grid.dims)
    vis = plan.visible
    xv = grid.tokens[vis].astype(m.dtype)[None]
    lat, _ = _encoder_fwd(m.params, m.config, xv, pos.enc[vis].astype(m.dtype)[None])
    return lat[0]


def decode(m: ModelState, latents: np.ndarray, plan: MaskPlan, pos: PosEmbed | None = None) -> TokenGrid:
    if latents.shape != (plan.n_visible, m.config.enc_dim):
        raise ValueError(f"expected {plan.n_visible} latents of width {m.config.enc_dim}, got {latents.shape}")
    _check_dims(m, plan.dims)
    pos = pos or pos_embed_for(m.config, plan.dims)
    out, _ = _decoder_fwd(
        m.params, m.config, latents[None], plan.visible[None], plan.masked_idx[None], pos.dec.astype(m.dtype)
    )
    return TokenGrid(plan.dims, out[0])


def holistic_loss(recon: TokenGrid, target: TokenGrid, plan: MaskPlan) -> LossBreakdown:
    """Per-pixel MSE over all, masked and visible pixels. An empty set scores 0."""
    if recon.dims != target.dims or recon.dims != plan.dims:
        raise ValueError("recon, target and plan dims must agree")
    sq = (recon.tokens.astype(np.float64) - target.tokens.astype(np.float64)) ** 2
    return _breakdown(sq, plan.mask)


def _breakdown(sq: np.ndarray, mask: np.ndarray) -> LossBreakdown:
    per_tok = sq.sum(axis=1)
    L = sq.shape[1]
    pm = int(mask.sum()) * L
    pu = int((~mask).sum()) * L
    total = float(per_tok.sum() / (pm + pu))
    masked = float(per_tok[mask].sum() / pm) if pm else 0.0
    unmasked = float(per_tok[~mask].sum() / pu) if pu else 0.0
    return LossBreakdown(total, masked, unmasked, pm, pu)


def forward(
    m: ModelState,
    cube: Cube | np.ndarray,
    plan: MaskPlan,
    stats: BandStats | None,
    target: Cube | np.ndarray | None = None,
) -> tuple[np.ndarray, LossBreakdown]:
    """Reconstruct ``cube`` under ``plan``.

    With ``stats`` the input (and target) are reflectance and get normalized
    here; the returned reconstruction is denormalized. Without ``stats`` both
    are taken as already normalized. The loss is always in normalized space.
    ``target`` defaults to the input itself.
    """
    x = cube.data if isinstance(cube, Cube) else np.asarray(cube)
    y = x if target is None else (target.data if isinstance(target, Cube) else np.asarray(target))
    if stats is not None:
        x = (x.astype(np.float64) - stats.mean) / stats.std
        y = (y.astype(np.float64) - stats.mean) / stats.std
    recon = m.reconstruct(x, plan)
    loss = holistic_loss(
        patchify(recon, plan.dims.p, plan.dims.s), patchify(y, plan.dims.p, plan.dims.s), plan
    )
    if stats is not None:
        recon = recon.astype(np.float64) * stats.std + stats.mean
    return recon, loss


def loss_and_grads(
    m: ModelState,
    inputs: np.ndarray,
    targets: np.ndarray,
    plans: Sequence[MaskPlan],
    frozen_encoder: bool = False,
) -> tuple[float, list[LossBreakdown], dict[str, np.ndarray]]:
    """Mean holistic total loss over a batch of token arrays and its parameter gradients.

    ``inputs``/``targets`` are (B, N, token_len) normalized tokens. Samples are
    grouped by visible-token count; group gradients are accumulated in
    ascending-count order so the reduction order is fixed.
    """
    cfg, p = m.config, m.params
    B, N, L = inputs.shape
    dims = plans[0].dims
    if any(pl.dims != dims for pl in plans) or len(plans) != B:
        raise ValueError("every sample in a batch needs a plan with the same dims")
    pos = pos_embed_for(cfg, dims)
    pos_enc = pos.enc.astype(m.dtype)
    pos_dec = pos.dec.astype(m.dtype)
    inputs = inputs.astype(m.dtype)
    targets = targets.astype(m.dtype)

    grads = {name: np.zeros_like(v) for name, v in p.items()}
    breakdowns: list[LossBreakdown | None] = [None] * B
    total = 0.0
    counts = sorted({pl.n_visible for pl in plans})
    for nv in counts:
        if nv == 0:
            raise ValueError("no visible tokens: the encoder needs at least one")
        idx = [b for b, pl in enumerate(plans) if pl.n_visible == nv]
        vis = np.stack([plans[b].visible for b in idx])
        msk = np.stack([plans[b].masked_idx for b in idx]).reshape(len(idx), N - nv)
        rows = np.asarray(idx)[:, None]
        xv = inputs[rows, vis]
        lat, enc_cache = _encoder_fwd(p, cfg, xv, pos_enc[vis])
        out, dec_cache = _decoder_fwd(p, cfg, lat, vis, msk, pos_dec)
        resid = out - targets[idx]
        for k, b in enumerate(idx):
            breakdowns[b] = _breakdown(resid[k].astype(np.float64) ** 2, plans[b].mask)
            total += breakdowns[b].total
        g: dict[str, np.ndarray] = {}
        dlat = _decoder_bwd(resid * (2.0 / (B * N * L)), dec_cache, p, cfg, g)
        if not frozen_encoder:
            _encoder_bwd(dlat, enc_cache, p, cfg, g)
        for name, v in g.items():
            grads[name] += v
    return total / B, breakdowns, grads  # type: ignore[return-value]


def predict_tokens(m: ModelState, inputs: np.ndarray, plans: Sequence[MaskPlan]) -> np.ndarray:
    """Reconstructed (B, N, token_len) tokens, one sample at a time."""
    cfg, p = m.config, m.params
    pos = pos_embed_for(cfg, plans[0].dims)
    outs = []
    for b, pl in enumerate(plans):
        xv = inputs[b : b + 1, pl.visible].astype(m.dtype)
        lat, _ = _encoder_fwd(p, cfg, xv, pos.enc[pl.visible].astype(m.dtype)[None])
        out, _ = _decoder_fwd(p, cfg, lat, pl.visible[None], pl.masked_idx[None], pos.dec.astype(m.dtype))
        outs.append(out[0])
    return np.stack(outs)


def loss_only(m: ModelState, inputs: np.ndarray, targets: np.ndarray, plans: Sequence[MaskPlan]) -> float:
    """Batch-mean total loss without the backward pass."""
    out = predict_tokens(m, inputs, plans).astype(np.float64)
    return float(np.mean([np.mean((o - t.astype(np.float64)) ** 2) for o, t in zip(out, targets)]))
