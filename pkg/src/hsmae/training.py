"""Deterministic pretraining / fine-tuning loops and finite-difference gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .alignment import BandMatchSet, assemble_input
from .checkpoint import Checkpoint, save_checkpoint
from .datacube import BandStats, BandTable, Cube, compute_stats
from .model import LossBreakdown, ModelState, is_encoder_param, loss_and_grads, predict_tokens
from .optim import AdamWConfig, OptState, adamw_update
from .patching import GridDims, MaskPlan, mask_from_band_match, patchify, sample_mask

__all__ = [
    "NonFiniteLossError",
    "TrainConfig",
    "TrainResult",
    "finetune",
    "grad_check",
    "mask_seed",
    "pretrain",
    "train_step",
]

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "pretrain"
    freeze_encoder: bool = False
    strategy: str = "spatial-spectral"
    ratio: float = 0.75
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    steps: int = 300
    batch_size: int = 8
    ckpt_every: int = 0
    log_every: int = 1
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.freeze_encoder and self.mode != "finetune":
            raise ValueError("freeze_encoder is only valid in finetune mode")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"masking ratio must lie in [0, 1), got {self.ratio}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self) -> type:
        return PRECISIONS[self.precision]

    @property
    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.beta1, self.beta2, 1e-8, self.weight_decay)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def mask_seed(run_seed: int, step: int, sample_id: int) -> int:
    return int(np.random.SeedSequence([run_seed, step, sample_id]).generate_state(1)[0])


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5EED])).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    per_epoch = math.ceil(n / batch_size)
    order = _epoch_order(seed, step // per_epoch, n)
    k = step % per_epoch
    return order[k * batch_size : (k + 1) * batch_size]


def _pool(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    pm = sum(b.masked_pixels for b in parts)
    pu = sum(b.unmasked_pixels for b in parts)
    return LossBreakdown(
        float(np.mean([b.total for b in parts])),
        sum(b.masked * b.masked_pixels for b in parts) / pm if pm else 0.0,
        sum(b.unmasked * b.unmasked_pixels for b in parts) / pu if pu else 0.0,
        pm,
        pu,
    )


def _diagnose(m: ModelState, grads: dict[str, np.ndarray], parts: Sequence[LossBreakdown]) -> str:
    bad_samples = [k for k, b in enumerate(parts) if not math.isfinite(b.total)]
    bad_params = [n for n, v in m.params.items() if not np.all(np.isfinite(v))]
    bad_grads = [n for n, v in grads.items() if not np.all(np.isfinite(v))]
    return f"non-finite samples={bad_samples} params={bad_params[:5]} grads={bad_grads[:5]}"


def train_step(
    m: ModelState,
    opt: OptState,
    batch: Sequence[tuple],
    cfg: TrainConfig,
) -> tuple[ModelState, OptState, LossBreakdown]:
    """One AdamW update on the batch-mean holistic loss.

    Batch items are ``(x, plan)`` or ``(x, target, plan)`` with normalized
    (H, W, C) arrays. The returned loss is measured before the update.
    """
    if not batch:
        raise ValueError("empty batch")
    p, s = m.config.patch, m.config.group
    xs, ys, plans = [], [], []
    for item in batch:
        x, y, plan = (item[0], item[0], item[1]) if len(item) == 2 else item
        xs.append(patchify(np.asarray(x), p, s).tokens)
        ys.append(patchify(np.asarray(y), p, s).tokens)
        plans.append(plan)
    return _step_tokens(m, opt, np.stack(xs), np.stack(ys), plans, cfg)


def _step_tokens(m, opt, xs, ys, plans, cfg: TrainConfig):
    _, parts, grads = loss_and_grads(m, xs, ys, plans, frozen_encoder=cfg.freeze_encoder)
    loss = _pool(parts)
    if not math.isfinite(loss.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLossError(_diagnose(m, grads, parts))
    skip = frozenset(n for n in m.params if is_encoder_param(n)) if cfg.freeze_encoder else frozenset()
    params, opt = adamw_update(m.params, grads, opt, cfg.adamw, skip)
    return ModelState(m.config, params, m.seed), opt, loss


@dataclass
class TrainResult:
    model: ModelState
    opt: OptState
    step: int
    stats: BandStats
    history: list[tuple[int, LossBreakdown]] = field(default_factory=list)


MetricsHook = Callable[[int, LossBreakdown], None]


def metrics_row(step: int, loss: LossBreakdown) -> str:
    return f"{step},{loss.total!r},{loss.masked!r},{loss.unmasked!r}\n"


class _Recorder:
    def __init__(self, metrics_path: Path | None, append: bool):
        self.path = metrics_path
        if metrics_path is not None and not append:
            metrics_path.write_text("step,total,masked,unmasked\n")

    def __call__(self, step: int, loss: LossBreakdown) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(metrics_row(step, loss))


def _run(
    cfg: TrainConfig,
    m: ModelState,
    opt: OptState,
    start: int,
    n: int,
    make_batch: Callable[[int, np.ndarray], tuple[np.ndarray, np.ndarray, list[MaskPlan]]],
    stats: BandStats,
    out_dir: Path | None,
    hsi_table: BandTable | None,
    lineage: list[dict[str, Any]],
) -> TrainResult:
    recorder = _Recorder(out_dir / "metrics.csv" if out_dir else None, append=start > 0)
    history = []

    def checkpoint(step: int, name: str) -> None:
        if out_dir is not None:
            save_checkpoint(out_dir / name, Checkpoint(m, step, opt, stats, hsi_table, lineage))

    for step in range(start, cfg.steps):
        idx = batch_indices(cfg.seed, step, n, cfg.batch_size)
        xs, ys, plans = make_batch(step, idx)
        m, opt, loss = _step_tokens(m, opt, xs, ys, plans, cfg)
        history.append((step, loss))
        if cfg.log_every and step % cfg.log_every == 0:
            recorder(step, loss)
            log.debug("step %d total=%.6g masked=%.6g unmasked=%.6g", step, loss.total, loss.masked, loss.unmasked)
        if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            checkpoint(step + 1, f"ckpt_{step + 1:06d}.smae")
    checkpoint(cfg.steps, "model.smae")
    return TrainResult(m, opt, cfg.steps, stats, history)


def _normalized_tokens(arrays: Sequence[np.ndarray], stats: BandStats, p: int, s: int, dtype) -> np.ndarray:
    return np.stack(
        [patchify((np.asarray(a, dtype=np.float64) - stats.mean) / stats.std, p, s).tokens for a in arrays]
    ).astype(dtype)


def pretrain(
    cfg: TrainConfig,
    dataset: Sequence[Cube],
    model: ModelState,
    *,
    stats: BandStats | None = None,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Train ``model`` to reconstruct randomly masked cubes.

    Each sample gets a fresh plan per step, seeded by (run seed, step, sample
    index). ``stats`` default to statistics of ``dataset``. With ``resume`` the
    run continues from the checkpoint's model, optimizer and step.
    """
    if not dataset:
        raise ValueError("pretraining dataset is empty")
    if cfg.mode != "pretrain":
        raise ValueError("pretrain needs a TrainConfig with mode='pretrain'")
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        model, opt, start = resume.model, resume.opt, resume.step  # type: ignore[assignment]
        stats = resume.stats or stats
        if opt is None:
            raise ValueError("checkpoint has no optimizer state to resume from")
    else:
        opt, start = OptState.zeros_like(model.params), 0
    stats = stats or compute_stats(dataset)
    model = model.astype(cfg.dtype)
    opt = OptState({k: v.astype(cfg.dtype) for k, v in opt.m.items()}, {k: v.astype(cfg.dtype) for k, v in opt.v.items()}, opt.step)
    mc = model.config
    dims = GridDims.for_shape(*dataset[0].shape, mc.patch, mc.group)
    tokens = _normalized_tokens([c.data for c in dataset], stats, mc.patch, mc.group, cfg.dtype)

    def make_batch(step: int, idx: np.ndarray):
        plans = [sample_mask(cfg.strategy, dims, cfg.ratio, mask_seed(cfg.seed, step, int(k))) for k in idx]
        return tokens[idx], tokens[idx], plans

    lineage = [{"mode": "pretrain", "seed": cfg.seed, "init_seed": model.seed}]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    return _run(cfg, model, opt, start, len(dataset), make_batch, stats, out, dataset[0].band_table, lineage)


def finetune_inputs(pairs: Sequence[tuple[Cube, Cube]], matches: BandMatchSet, group: int) -> list[np.ndarray]:
    return [assemble_input(msi, matches, group) for msi, _ in pairs]


def finetune(
    cfg: TrainConfig,
    model: ModelState,
    pairs: Sequence[tuple[Cube, Cube]],
    matches: BandMatchSet,
    stats: BandStats,
    *,
    opt: OptState | None = None,
    out_dir: str | Path | None = None,
    lineage: list[dict[str, Any]] | None = None,
) -> TrainResult:
    """Adapt ``model`` to MSI -> HSI reconstruction with the fixed band-match plan.

    The encoder sees MSI-derived values in matched band groups; the target is
    the true HSI cube. ``cfg.freeze_encoder`` keeps encoder weights fixed.
    A fresh optimizer is used unless ``opt`` is given.
    """
    if not pairs:
        raise ValueError("fine-tuning dataset is empty")
    if cfg.mode != "finetune":
        raise ValueError("finetune needs a TrainConfig with mode='finetune'")
    mc = model.config
    dims = GridDims.for_shape(*pairs[0][1].shape, mc.patch, mc.group)
    plan = mask_from_band_match(matches, dims)
    if plan.n_visible == 0:
        raise ValueError("no visible tokens: the band matches leave every band group masked")
    model = model.astype(cfg.dtype)
    opt = opt or OptState.zeros_like(model.params)
    xs = _normalized_tokens(finetune_inputs(pairs, matches, mc.group), stats, mc.patch, mc.group, cfg.dtype)
    ys = _normalized_tokens([h.data for _, h in pairs], stats, mc.patch, mc.group, cfg.dtype)

    def make_batch(step: int, idx: np.ndarray):
        return xs[idx], ys[idx], [plan] * len(idx)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    lin = list(lineage or []) + [{"mode": "finetune", "seed": cfg.seed, "frozen": cfg.freeze_encoder}]
    return _run(cfg, model, opt, 0, len(pairs), make_batch, stats, out, matches.hsi_table, lin)


def grad_check(
    m: ModelState,
    sample: tuple,
    plan: MaskPlan,
    eps: float = 1e-5,
    n_params: int = 200,
    seed: int = 0,
    only: Sequence[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients of the total loss.

    ``sample`` is ``(x,)`` or ``(x, target)`` with normalized (H, W, C) arrays.
    ``n_params`` scalar parameters are drawn uniformly over all parameters,
    or over the named tensors in ``only``.
    Relative error uses ``|a - n| / (|a| + |n| + 1e-12)``.

    The difference of the two perturbed losses is formed as
    ``mean((o+ - o-) * (o+ + o- - 2 y))`` rather than ``L(+) - L(-)``; the two
    are equal in exact arithmetic but the latter cancels to roundoff when the
    gradient entry is tiny.
    """
    if m.dtype != np.float64:
        raise ValueError("grad_check requires a float64 model")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    p, s = m.config.patch, m.config.group
    x = patchify(np.asarray(sample[0], dtype=np.float64), p, s).tokens[None]
    y = patchify(np.asarray(sample[-1], dtype=np.float64), p, s).tokens[None]
    _, _, grads = loss_and_grads(m, x, y, [plan])

    names = list(m.params) if only is None else [n for n in m.params if n in set(only)]
    if not names:
        raise ValueError("grad_check: no parameters selected")
    sizes = np.array([m.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(int(offsets[-1]), size=min(n_params, int(offsets[-1])), replace=False)
    probe = m.copy()
    worst = 0.0
    for f in np.sort(flat_idx):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[k]
        arr = probe.params[name].reshape(-1)
        j = int(f - offsets[k])
        orig = arr[j]
        arr[j] = orig + eps
        op = predict_tokens(probe, x, [plan])
        arr[j] = orig - eps
        om = predict_tokens(probe, x, [plan])
        arr[j] = orig
        num = float(np.mean((op - om) * (op + om - 2.0 * y))) / (2 * eps)
        ana = float(grads[name].reshape(-1)[j])
        worst = max(worst, abs(ana - num) / (abs(ana) + abs(num) + 1e-12))
    return worst
