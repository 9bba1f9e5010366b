import numpy as np
import pytest

from voxelprompt import LabelVolume, Volume
from voxelprompt.volume import fresh_volume_id

# populated by the acceptance marker hook below, printed in the summary
_ACCEPTANCE_RESULTS = {}


def _make_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Volume:
    nz, ny, nx = data.shape
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return Volume(
        volume_id=fresh_volume_id(),
        dims=(nx, ny, nz),
        spacing=spacing,
        affine=affine,
        data=np.ascontiguousarray(data, dtype=np.float32),
    )


@pytest.fixture
def make_volume():
    return _make_volume


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def cylinder_volume():
    """Bright cylinder along z on a noisy background; same cross-section on
    every slice, so one prompt segments any z index."""
    nx, ny, nz = 32, 32, 40
    gen = np.random.default_rng(99)
    data = gen.normal(50.0, 4.0, size=(nz, ny, nx))
    yy, xx = np.mgrid[0:ny, 0:nx]
    disc = (yy - 16) ** 2 + (xx - 16) ** 2 <= 9**2
    data[:, disc] += 150.0
    return _make_volume(data)


@pytest.fixture
def sphere_labels():
    """(LabelVolume, parent Volume, radius) with a rasterized r=20 ball."""
    from oracles import sphere_mask

    size, radius = 48, 20
    mask = sphere_mask(radius, size)
    parent = _make_volume(mask.astype(np.float32) * 100.0)
    lv = LabelVolume.empty_like(parent)
    lv.labels[mask] = 1
    return lv, parent, radius


@pytest.fixture
def server_factory():
    """Starts servers on ephemeral ports and tears them all down."""
    from voxelprompt.config import ServerConfig
    from voxelprompt.server import VoxelPromptServer

    started = []

    def factory(config=None):
        server = VoxelPromptServer(config or ServerConfig(), port=0)
        server.start()
        started.append(server)
        return server

    yield factory
    for server in started:
        server.stop()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    num = marker.kwargs["num"]
    name = marker.kwargs["name"]
    if rep.when == "call":
        _ACCEPTANCE_RESULTS[num] = (name, "PASS" if rep.passed else "FAIL")
    elif rep.when == "setup" and (rep.failed or rep.skipped):
        _ACCEPTANCE_RESULTS[num] = (name, "SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE_RESULTS):
        name, verdict = _ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num} ({name}): {verdict}")
