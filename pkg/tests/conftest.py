import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("default")

# criterion id -> (passed, detail), filled in by test_acceptance
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"ACCEPTANCE {criterion} {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def acceptance_log():
    return record


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two default pipeline runs with the same config and seed."""
    from thzrecon import PipelineConfig, run_pipeline

    base = tmp_path_factory.mktemp("runs")
    results = []
    for name in ("a", "b"):
        cfg = PipelineConfig({"output_dir": str(base / name)})
        results.append(run_pipeline(cfg))
    return results


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"ACCEPTANCE {key} {'PASS' if passed else 'FAIL'} {detail}")
