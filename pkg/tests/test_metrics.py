import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsmae.datacube import BandStats
from hsmae.metrics import evaluate, mse_report, read_csv_rows, ssim
from hsmae.model import IdentityModel
from hsmae.patching import GridDims, MaskPlan, sample_mask


def _scalar_ssim(x, y, L):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_ssim_scalar_oracle(rng):
    x, y = rng.random((5, 4, 3)), rng.random((5, 4, 3))
    want = np.mean([_scalar_ssim(x[..., c].ravel().tolist(), y[..., c].ravel().tolist(), 1.0) for c in range(3)])
    assert math.isclose(ssim(x, y), want, rel_tol=1e-12)


def test_ssim_constant_pair():
    a, b = np.full((4, 4), 0.2), np.full((4, 4), 0.6)
    c1 = 1e-4
    assert math.isclose(ssim(a, b), (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1), rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_ssim_properties(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((6, 6, 2)), rng.random((6, 6, 2))
    assert math.isclose(ssim(x, x), 1.0, rel_tol=1e-12)
    assert math.isclose(ssim(x, y), ssim(y, x), rel_tol=1e-12)
    assert ssim(x, y) <= 1.0
    assert ssim(x, x + 0.1) < 1.0


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 2)), np.zeros((2, 2)), L=0.0)


def test_mse_report_scalar_oracle(rng):
    d = GridDims(2, 2, 2, 2, 2)
    plan = sample_mask("spatial-spectral", d, 0.5, 1)
    a, b = rng.random(d.shape), rng.random(d.shape)
    pm = plan.pixel_mask()
    sq_m, sq_u = [], []
    for idx in np.ndindex(*d.shape):
        (sq_m if pm[idx] else sq_u).append((a[idx] - b[idx]) ** 2)
    r = mse_report(a, b, plan)
    assert math.isclose(r.masked_mse, sum(sq_m) / len(sq_m), rel_tol=1e-12)
    assert math.isclose(r.unmasked_mse, sum(sq_u) / len(sq_u), rel_tol=1e-12)
    assert math.isclose(r.total_mse, (sum(sq_m) + sum(sq_u)) / a.size, rel_tol=1e-12)
    empty = mse_report(a, b, MaskPlan(d, (), "spectral"))
    assert empty.masked_mse == 0.0


def test_evaluate_identity(rng):
    d = GridDims(2, 2, 2, 2, 2)
    stats = BandStats(np.full(4, 0.5), np.full(4, 0.2))
    xs = [rng.random(d.shape) for _ in range(3)]
    ds = [(x, x, sample_mask("spectral", d, 0.5, k)) for k, x in enumerate(xs)]
    mean, rows, text = evaluate(IdentityModel(), ds, stats, sample_ids=["a", "b", "c"])
    assert mean.total_mse < 1e-28 and math.isclose(mean.ssim, 1.0, rel_tol=1e-12)
    assert mean.n_samples == 3
    parsed = read_csv_rows(text)
    assert [r["sample_id"] for r in parsed] == ["a", "b", "c"]


def test_evaluate_mean_of_rows(rng):
    d = GridDims(2, 2, 2, 2, 2)
    stats = BandStats(np.zeros(4), np.ones(4))
    ds = [(rng.random(d.shape), rng.random(d.shape), sample_mask("spectral", d, 0.5, k)) for k in range(4)]
    mean, rows, text = evaluate(IdentityModel(), ds, stats)
    parsed = read_csv_rows(text)
    assert math.isclose(mean.masked_mse, np.mean([float(r["masked_mse"]) for r in parsed]), rel_tol=1e-12)
    # duplicating a sample leaves the mean unchanged when every sample is that sample
    one = [ds[0]]
    m1, _, _ = evaluate(IdentityModel(), one, stats)
    m2, _, _ = evaluate(IdentityModel(), one * 2, stats)
    assert m1.total_mse == m2.total_mse and m2.n_samples == 2


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(IdentityModel(), [], BandStats(np.zeros(1), np.ones(1)))
