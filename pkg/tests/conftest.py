import re
import time
from dataclasses import replace

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results = {}


@pytest.fixture(scope="session")
def trained_models():
    """Default and boundary-ablated models trained once on 200 phantom pairs (64x64)."""
    from acmt.config import TrainConfig
    from acmt.objectives import LossWeights
    from acmt.phantom import generate_dataset
    from acmt.trainer import fit

    data = generate_dataset(200, (64, 64), base_seed=0)
    config = TrainConfig()
    out = {}
    for name, cfg in (("default", config),
                      ("no_boundary", replace(config, weights=replace(config.weights, boundary=0.0)))):
        start = time.perf_counter()
        ckpt, log = fit(data, cfg)
        out[name] = {"checkpoint": ckpt, "log": log, "seconds": time.perf_counter() - start}
    return out


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = _CRITERION.search(item.name)
    if not match:
        return
    n = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(item.user_properties).get("detail", "")
        _results[n] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        passed, detail = _results[n]
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
