import numpy as np
import pytest
from PIL import Image

from fsr.synthetic import make_benchmark, write_mvtec_tree


def save_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@pytest.fixture
def tiny_tree(tmp_path):
    """One category: 2 train, 1 good test, 1 defect test with mask."""
    root = tmp_path / "data"
    rng = np.random.default_rng(0)
    img = lambda: rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)  # noqa: E731
    save_png(root / "widget/train/good/000.png", img())
    save_png(root / "widget/train/good/001.png", img())
    save_png(root / "widget/test/good/000.png", img())
    save_png(root / "widget/test/crack/000.png", img())
    mask = np.zeros((16, 16), np.uint8)
    mask[4:8, 4:8] = 255
    save_png(root / "widget/ground_truth/crack/000_mask.png", mask)
    return root


@pytest.fixture(scope="session")
def texture_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("textures")
    cats = make_benchmark(2, size=64, seed=3, n_train=8, n_test_normal=4, n_test_anomalous=4)
    return write_mvtec_tree(cats, root)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS, WEIGHTS, MVTEC
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in RESULTS:
        terminalreporter.write_line(f"{status} {name}: {detail}")
    if not (WEIGHTS and MVTEC):
        terminalreporter.write_line("SKIP extended MVTec bottle: pretrained weights and dataset not configured")
