import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaqat import tensor as T  # noqa: E402
from adaqat.config import load_config  # noqa: E402

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}

BLOBS_MLP = [
    "data.dataset=blobs", "model.arch=mlp", "model.widths=32,32", "data.blobs_train=400",
    "data.blobs_test=200", "train.batch_size=50", "train.epochs=2",
]


@pytest.fixture
def blobs_cfg(tmp_path):
    """Factory for a seconds-scale blobs/MLP experiment config rooted in tmp_path."""

    def make(*overrides, out="run"):
        return load_config(None, BLOBS_MLP + [f"experiment.out_dir={tmp_path / out}", *overrides])

    return make


@pytest.fixture(autouse=True)
def _clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
