from __future__ import annotations

import numpy as np
import pytest

from hsmae.datacube import Cube, SynthSpec, compute_stats, gen_synthetic, linear_band_table

_ACCEPTANCE: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    code = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE.setdefault(code, []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        outcomes = _ACCEPTANCE[code]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{code}: {verdict} ({len(outcomes)} check(s))")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cube():
    return gen_synthetic(SynthSpec(8, 8, 4, n_endmembers=3, seed=1))


@pytest.fixture
def desk_cubes():
    return [gen_synthetic(SynthSpec(32, 32, 24, n_endmembers=3, seed=s)) for s in range(4)]


def random_cube(rng, H, W, C, dtype=np.float32) -> Cube:
    return Cube(rng.random((H, W, C)).astype(dtype), linear_band_table(C))


def normalized(cube: Cube) -> np.ndarray:
    st = compute_stats([cube])
    return (cube.data.astype(np.float64) - st.mean) / st.std
