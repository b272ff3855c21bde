import numpy as np
import pytest
import torch

from fedgca.classifier import ClassifierSpec
from fedgca.config import build_config
from fedgca.dataset_store import LabeledDataset

torch.set_num_threads(1)

TINY_SPEC = ClassifierSpec((3, 8, 8), (4, 8), 2)


def make_dataset(n=40, classes=10, shape=(1, 8, 8), seed=0, tag="toy"):
    rng = np.random.default_rng(seed)
    images = rng.random((n, *shape)).astype(np.float32)
    labels = np.arange(n) % classes
    return LabeledDataset(images, labels.astype(np.int64), tag, classes)


@pytest.fixture
def toy_dataset():
    return make_dataset()


def tiny_config(**overrides):
    """Config for the 2-class 8x8 classifier used by the fast federation tests."""
    values = dict(
        preset="fedgca", input_shape=[3, 8, 8], conv_channels=[4, 8], class_count=2, K=2, T=2, I=1,
        batch_size=8, kernel_sizes=[1, 3], corruption_scales=[1, 2], dtype="float64",
        source_domain="toy", target_domains=["toy-target"],
    )
    values.update(overrides)
    return build_config(values)


def tiny_source(n=24, seed=0):
    return make_dataset(n=n, classes=2, shape=(3, 8, 8), seed=seed, tag="tiny")


# One PASS/FAIL line per acceptance criterion in the terminal summary.

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    number, title = mark
    failed = report.failed or (report.when == "setup" and report.skipped)
    if failed or number not in _criteria:
        _criteria[number] = (title, "FAIL" if failed else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
