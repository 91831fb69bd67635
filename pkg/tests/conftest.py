import warnings

import numpy as np
import pytest
import torch

warnings.filterwarnings("ignore", message="Converting a tensor with requires_grad=True")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def central_diff_check(fn, inputs, eps=1e-5):
    """Max relative error between autograd and central differences.

    ``fn`` maps a list of float64 tensors to a scalar tensor. The relative
    error is measured per input as ||g_auto - g_fd|| / max(||g_fd||, 1e-8).
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for i, x in enumerate(inputs):
        auto = torch.zeros_like(x) if grads[i] is None else grads[i]
        fd = torch.zeros_like(x)
        flat = x.detach().reshape(-1)
        for j in range(flat.numel()):
            vals = []
            for sign in (1, -1):
                pert = [y.detach().clone() for y in inputs]
                pert[i].reshape(-1)[j] += sign * eps
                with torch.no_grad():
                    vals.append(float(fn(pert)))
            fd.reshape(-1)[j] = (vals[0] - vals[1]) / (2 * eps)
        err = float((auto - fd).norm() / max(float(fd.norm()), 1e-8))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# acceptance bookkeeping: one PASS/FAIL/SKIP line per criterion after the run

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test belongs to")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = entry["outcomes"]
        if any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif outcomes and all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")
