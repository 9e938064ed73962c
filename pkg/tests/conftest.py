"""Shared sweep fixtures and the acceptance summary printed at the end of a run."""
import pytest

from mtfqi.harness import ExperimentConfig, run_sweep

SEEDS = list(range(30))

SWEEPS = {
    "T": ExperimentConfig("T", [1, 2, 4, 8, 16], SEEDS, n=200, H=5, name="sweep_T"),
    "n": ExperimentConfig("n", [50, 100, 200, 400, 800], SEEDS, T=5, H=5, name="sweep_n"),
    "H": ExperimentConfig("H", list(range(2, 11)), SEEDS, T=5, n=500, name="sweep_H"),
}

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def sweep_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("sweeps")


@pytest.fixture(scope="session")
def sweep_cache():
    return {}


@pytest.fixture(scope="session")
def run_named_sweep(sweep_dir, sweep_cache):
    """Run each full-size sweep once per session; returns (rows, seconds, csv path)."""
    import time

    def run(axis):
        if axis not in sweep_cache:
            start = time.perf_counter()
            rows = run_sweep(SWEEPS[axis], sweep_dir)
            sweep_cache[axis] = (rows, time.perf_counter() - start, sweep_dir / f"{SWEEPS[axis].name}.csv")
        return sweep_cache[axis]

    return run


@pytest.fixture
def record_criterion():
    def record(number, name, passed, detail):
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:>2} {name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
