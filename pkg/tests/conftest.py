import time
from contextlib import contextmanager

import pytest

from crossmodal.pipeline import PipelineSettings, run_pipeline
from crossmodal.synthbench import SynthConfig, generate

SEEDS = (0, 1, 2, 3, 4)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class Criterion:
    def __init__(self, number: int, budget_s: float):
        self.number = number
        self.budget_s = budget_s
        self.elapsed = 0.0
        self.details: list[str] = []

    @contextmanager
    def timed(self):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.elapsed += time.perf_counter() - t0

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion(request):
    """Records pass/fail for one numbered acceptance criterion, including its runtime budget."""
    marker = request.node.get_closest_marker("criterion")
    number, budget = marker.args
    c = Criterion(number, budget)
    yield c
    failed = request.node.stash.get(_FAILED, False)
    over = c.elapsed >= c.budget_s
    detail = "; ".join(c.details + [f"runtime {c.elapsed:.1f}s (budget {c.budget_s:g}s)"])
    ACCEPTANCE[number] = (not failed and not over, detail)
    if over and not failed:
        pytest.fail(f"criterion {number} exceeded its runtime budget: {c.elapsed:.1f}s >= {c.budget_s:g}s")


_FAILED = pytest.StashKey[bool]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and rep.failed:
        item.stash[_FAILED] = True


@pytest.fixture(scope="session")
def default_runs():
    """Test AUPRC per model on the default benchmark for each seed, plus the wall time taken."""
    out, t0 = [], time.perf_counter()
    for seed in SEEDS:
        settings = PipelineSettings(synth=SynthConfig(seed=seed))
        data = generate(settings.synth)
        data.pop("image_gold_pool")  # only the cross-over baseline uses it
        out.append(run_pipeline(settings, data).auprc)
    return out, time.perf_counter() - t0


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, budget_s): acceptance criterion with runtime budget")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
