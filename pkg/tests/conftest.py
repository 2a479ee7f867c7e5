import numpy as np
import pytest

from ggd.datakit import RawDataset, write_idx


@pytest.fixture(scope="session")
def mnist_raw():
    """5000 real 28x28 digits bundled with mlxtend (500 per class)."""
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    return RawDataset(X.reshape(-1, 1, 28, 28) / 255.0, y.astype(np.int64))


@pytest.fixture(scope="session")
def idx_files(tmp_path_factory, mnist_raw):
    d = tmp_path_factory.mktemp("idx")
    imgs = np.rint(mnist_raw.images[:, 0] * 255).astype(np.uint8)
    (d / "images.idx").write_bytes(write_idx(imgs))
    (d / "labels.idx").write_bytes(write_idx(mnist_raw.labels.astype(np.uint8)))
    return d / "images.idx", d / "labels.idx"


@pytest.fixture
def tiny_raw():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(20, 1, 4, 4))
    labels = np.arange(20) % 10
    return RawDataset(images, labels.astype(np.int64))


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, ok, detail)`` to record one acceptance line."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
