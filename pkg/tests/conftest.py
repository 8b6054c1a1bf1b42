import numpy as np
import pytest

from panrefine import dataset_io
from panrefine.panoptic_tsdf import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def vga():
    return CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


@pytest.fixture(scope="session")
def small_cam():
    return CameraIntrinsics(120.0, 120.0, 79.5, 59.5, 160, 120)


def make_dataset(path, kind, intrinsics, frames, **noise):
    spec = dataset_io.SyntheticSceneSpec(kind, dataset_io.default_trajectory(kind, frames), intrinsics, **noise)
    dataset_io.generate_synthetic(spec, path)
    return path


@pytest.fixture(scope="session")
def boxes_dataset(tmp_path_factory, small_cam):
    path = tmp_path_factory.mktemp("boxes")
    return make_dataset(path, "boxes-room", small_cam, 3, depth_sigma=0.002, leak_probability=0.4, leak_radius=4, seed=3)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the collected lines print at the end of the run."""
    lines = request.config.stash[_CRITERIA]

    def record(number, ok, text):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
