import numpy as np
import pytest

from scenediff import denoiser as den
from scenediff import diffusion as dif
from scenediff import harness as hs

from helpers import simple_scene, straight_lanes


@pytest.fixture
def lanes2():
    return straight_lanes()


@pytest.fixture
def scene3():
    return simple_scene([[10.0, 0.0, 5.0, 0.0], [25.0, 3.5, 6.0, 0.05], [40.0, 0.2, 4.0, -0.02]])


@pytest.fixture
def small_dims():
    return den.DenoiserDims(d_h=16, d_k=4, heads=4, layers=1, t_hist=4, T=8, lane_tokens=3, lane_points=4)


@pytest.fixture
def small_params(small_dims):
    return den.init_params(small_dims, seed=3)


@pytest.fixture(scope="session")
def gen_scenes():
    """A handful of expert scenes from the synthetic generator."""
    out = []
    for n, spec in enumerate([hs.MapSpec("straight", 2), hs.MapSpec("arc", 2), hs.MapSpec("merge", 1)] * 2):
        lanes = hs.gen_map(spec, seed=100 + n)
        scene, _ = hs.gen_scene(lanes, 3 + n % 3, duration=4.0, seed=n, name=f"fx-{n}")
        out.append(scene)
    return out


@pytest.fixture
def schedule20():
    return dif.cosine_schedule(20)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
