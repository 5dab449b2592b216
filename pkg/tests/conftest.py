import numpy as np
import pytest
import torch

from sctforge.phantom import PhantomParams, generate_phantom_patient


@pytest.fixture
def small_params():
    return PhantomParams(seed=3, depth_range=(8, 8), height_range=(32, 32), width_range=(40, 40))


@pytest.fixture
def small_pair(small_params):
    return generate_phantom_patient(small_params, "P000")


@pytest.fixture(autouse=True)
def _seed():
    np.random.seed(0)
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, taken from the test outcomes."""
    results: dict[int, tuple[bool, str]] = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if rep.when != "call" and not rep.failed:
                continue
            num = int(nodeid.split("test_criterion_")[1].split("_")[0])
            text = dict(rep.user_properties).get("detail", "")
            ok = rep.passed and results.get(num, (True, ""))[0]
            results[num] = (ok, text or results.get(num, (True, ""))[1])
    if results:
        terminalreporter.section("acceptance criteria")
        for num, (ok, text) in sorted(results.items()):
            terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {text}".rstrip())
