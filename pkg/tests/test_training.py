import csv
import math

import numpy as np
import pytest

from hsmae.alignment import match_bands, simulate_msi
from hsmae.checkpoint import load_checkpoint
from hsmae.datacube import BandTable, BandInfo, SynthSpec, compute_stats, gen_synthetic, linear_band_table
from hsmae.model import PRESETS, ModelConfig, forward, init_model, is_encoder_param
from hsmae.optim import AdamWConfig, OptState, adamw_update, decays
from hsmae.patching import GridDims, sample_mask
from hsmae.training import (
    NonFiniteLossError,
    TrainConfig,
    batch_indices,
    finetune,
    grad_check,
    mask_seed,
    pretrain,
    train_step,
)

DESK = PRESETS["desk"]


def _cubes(n=4, H=16, W=16, C=8, seed=0):
    return [gen_synthetic(SynthSpec(H, W, C, n_endmembers=3, seed=seed + k)) for k in range(n)]


def _pretrain_cfg(**kw):
    base = dict(mode="pretrain", steps=4, batch_size=2, seed=3, ratio=0.5)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="pretrain", freeze_encoder=True)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="distill")


def test_mask_seed_varies():
    seeds = {mask_seed(0, s, k) for s in range(10) for k in range(10)}
    assert len(seeds) == 100
    assert mask_seed(1, 2, 3) == mask_seed(1, 2, 3)


def test_batch_indices_cover_each_epoch():
    n, bs = 10, 3
    per_epoch = math.ceil(n / bs)
    for epoch in range(3):
        seen = np.concatenate([batch_indices(7, epoch * per_epoch + k, n, bs) for k in range(per_epoch)])
        assert sorted(seen.tolist()) == list(range(n))


# -- optimizer --------------------------------------------------------------------


def test_adamw_matches_scalar_oracle():
    cfg = AdamWConfig(lr=0.1, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01)
    params = {"w": np.array([[0.5, -1.0]]), "b": np.array([0.25])}
    opt = OptState.zeros_like(params)
    g1 = {"w": np.array([[0.2, -0.4]]), "b": np.array([1.0])}
    g2 = {"w": np.array([[-0.1, 0.3]]), "b": np.array([-0.5])}
    p, o = adamw_update(params, g1, opt, cfg)
    p, o = adamw_update(p, g2, o, cfg)

    def scalar(x, gs, decay):
        m = v = 0.0
        for t, g in enumerate(gs, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.95 * v + 0.05 * g * g
            step = (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.95**t)) + 1e-8)
            if decay:
                step += 0.01 * x
            x = x - 0.1 * step
        return x

    assert math.isclose(p["w"][0, 0], scalar(0.5, [0.2, -0.1], True), rel_tol=1e-12)
    assert math.isclose(p["w"][0, 1], scalar(-1.0, [-0.4, 0.3], True), rel_tol=1e-12)
    assert math.isclose(p["b"][0], scalar(0.25, [1.0, -0.5], False), rel_tol=1e-12)
    assert o.step == 2


def test_weight_decay_exemptions():
    m = init_model(DESK, 0)
    for name, v in m.params.items():
        assert decays(name, v) == (v.ndim >= 2)
    assert not decays("mask_token", m.params["mask_token"])


def test_skip_leaves_params_and_moments():
    params = {"a": np.ones(3), "b": np.ones((2, 2))}
    grads = {"a": np.ones(3), "b": np.ones((2, 2))}
    p, o = adamw_update(params, grads, OptState.zeros_like(params), AdamWConfig(), frozenset({"a"}))
    assert p["a"].tobytes() == params["a"].tobytes()
    assert not o.m["a"].any() and o.m["b"].any()


# -- training loops ---------------------------------------------------------------


def test_train_step_frozen_encoder_unchanged():
    m = init_model(DESK, 0)
    x = np.random.default_rng(0).standard_normal((16, 16, 8))
    plan = sample_mask("spectral", GridDims.for_shape(16, 16, 8, 8, 4), 0.5, 0)
    cfg = TrainConfig(mode="finetune", freeze_encoder=True, lr=1e-2)
    m2, _, _ = train_step(m, OptState.zeros_like(m.params), [(x, plan)], cfg)
    for n in m.params:
        same = m.params[n].tobytes() == m2.params[n].tobytes()
        assert same == is_encoder_param(n), n


def test_zero_lr_leaves_model_unchanged():
    m = init_model(DESK, 0)
    res = pretrain(_pretrain_cfg(lr=0.0), _cubes(), m)
    for n in m.params:
        assert res.model.params[n].tobytes() == m.params[n].tobytes()
    assert res.opt.step == 4


def test_pretrain_deterministic():
    cubes = _cubes()
    a = pretrain(_pretrain_cfg(), cubes, init_model(DESK, 1))
    b = pretrain(_pretrain_cfg(), cubes, init_model(DESK, 1))
    for n in a.model.params:
        assert a.model.params[n].tobytes() == b.model.params[n].tobytes()
    assert [h[1] for h in a.history] == [h[1] for h in b.history]


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_resume_reproduces_trajectory(tmp_path, precision):
    cubes = _cubes()
    full = pretrain(_pretrain_cfg(steps=6, precision=precision), cubes, init_model(DESK, 1), out_dir=tmp_path / "full")
    pretrain(_pretrain_cfg(steps=3, precision=precision), cubes, init_model(DESK, 1), out_dir=tmp_path / "half")
    ck = load_checkpoint(tmp_path / "half" / "model.smae")
    resumed = pretrain(_pretrain_cfg(steps=6, precision=precision), cubes, ck.model, resume=ck, out_dir=tmp_path / "half")
    for n in full.model.params:
        assert full.model.params[n].tobytes() == resumed.model.params[n].tobytes()
    rows_full = (tmp_path / "full" / "metrics.csv").read_text()
    rows_half = (tmp_path / "half" / "metrics.csv").read_text()
    assert rows_full == rows_half


def test_first_logged_loss_matches_forward(tmp_path):
    cubes = _cubes()
    cfg = _pretrain_cfg(batch_size=1, steps=1)
    m = init_model(DESK, 2)
    res = pretrain(cfg, cubes, m, out_dir=tmp_path)
    stats = compute_stats(cubes)
    k = int(batch_indices(cfg.seed, 0, len(cubes), 1)[0])
    dims = GridDims.for_shape(16, 16, 8, 8, 4)
    plan = sample_mask(cfg.strategy, dims, cfg.ratio, mask_seed(cfg.seed, 0, k))
    _, loss = forward(m, cubes[k], plan, stats)
    with open(tmp_path / "metrics.csv") as fh:
        row = next(csv.DictReader(fh))
    assert math.isclose(float(row["total"]), loss.total, rel_tol=1e-5)
    assert res.history[0][1].total == float(row["total"])


def test_logged_loss_identity(tmp_path):
    res = pretrain(_pretrain_cfg(), _cubes(), init_model(DESK, 0))
    for _, lb in res.history:
        mix = (lb.masked * lb.masked_pixels + lb.unmasked * lb.unmasked_pixels) / (lb.masked_pixels + lb.unmasked_pixels)
        assert math.isclose(lb.total, mix, rel_tol=1e-6)


def test_checkpoints_written_on_cadence(tmp_path):
    pretrain(_pretrain_cfg(ckpt_every=2), _cubes(), init_model(DESK, 0), out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.smae"))
    assert names == ["ckpt_000002.smae", "ckpt_000004.smae", "model.smae"]


def test_non_finite_aborts():
    cubes = _cubes()
    m = init_model(DESK, 0)
    m.params["head.b"][:] = np.nan
    with pytest.raises(NonFiniteLossError):
        pretrain(_pretrain_cfg(), cubes, m)


def _pairs(n=3, seed=0):
    hsi = [gen_synthetic(SynthSpec(16, 16, 24, n_endmembers=3, seed=seed + k)) for k in range(n)]
    return hsi


def test_finetune_empty_matches():
    hsi = _pairs()
    far = BandTable("far", (BandInfo(0, 5000.0, 10.0),))
    matches = match_bands(far, hsi[0].band_table)
    pairs = [(simulate_msi(h, far), h) for h in hsi]
    with pytest.raises(ValueError, match="no visible tokens"):
        finetune(TrainConfig(mode="finetune", steps=1), init_model(DESK, 0), pairs, matches, compute_stats(hsi))


def test_finetune_frozen_keeps_encoder(tmp_path):
    hsi = _pairs()
    msi_t = linear_band_table(6, sensor_name="coarse")
    matches = match_bands(msi_t, hsi[0].band_table, threshold=0.6, denominator="hsi")
    assert matches.matches
    pairs = [(simulate_msi(h, msi_t), h) for h in hsi]
    m = init_model(DESK, 0)
    cfg = TrainConfig(mode="finetune", freeze_encoder=True, steps=3, batch_size=2, lr=1e-2)
    res = finetune(cfg, m, pairs, matches, compute_stats(hsi), out_dir=tmp_path)
    for n in m.params:
        if is_encoder_param(n):
            assert res.model.params[n].tobytes() == m.params[n].tobytes()
    ck = load_checkpoint(tmp_path / "model.smae")
    assert ck.lineage[-1]["frozen"] is True


def test_grad_check_eps_range():
    m = init_model(DESK, 0, dtype=np.float64)
    x = np.zeros((8, 8, 4))
    plan = sample_mask("spectral", GridDims(1, 1, 1, 8, 4), 0.0, 0)
    for eps in (1e-8, 1e-2):
        with pytest.raises(ValueError):
            grad_check(m, (x,), plan, eps=eps)
    with pytest.raises(ValueError):
        grad_check(init_model(DESK, 0), (x,), plan)


def test_grad_check_multi_token_perturbed():
    cfg = ModelConfig(1, 1, 16, 16, 2, 2, patch=4, group=2, mlp_ratio=2)
    m = init_model(cfg, 0, dtype=np.float64)
    rng = np.random.default_rng(1)
    for k, v in m.params.items():
        m.params[k] = v + rng.normal(0, 0.2, v.shape)
    x = rng.standard_normal((8, 8, 4))
    plan = sample_mask("spatial-spectral", GridDims.for_shape(8, 8, 4, 4, 2), 0.5, 0)
    assert grad_check(m, (x,), plan, eps=1e-5, n_params=200) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_linear_head_is_near_exact(seed):
    # loss is quadratic in the head tensors, so central differences carry no
    # truncation error and only roundoff remains
    cfg = ModelConfig(0, 0, 64, 48, 4, 4, patch=8, group=4)
    m = init_model(cfg, seed, dtype=np.float64)
    x = np.random.default_rng(seed).standard_normal((8, 8, 4))
    plan = sample_mask("spatial-spectral", GridDims(1, 1, 1, 8, 4), 0.0, 0)
    err = grad_check(m, (x,), plan, eps=1e-5, n_params=200, only=("head.w", "head.b"))
    assert err < 1e-8


def test_grad_check_desk_multi_token():
    m = init_model(DESK, 0, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((16, 16, 8))
    plan = sample_mask("spatial-spectral", GridDims.for_shape(16, 16, 8, 8, 4), 0.5, 0)
    assert grad_check(m, (x,), plan, eps=1e-5, n_params=200) < 1e-4
