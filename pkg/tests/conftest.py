import time

import pytest

from lfrl.harness import ci_plan, run_generalization, run_lifelong, run_transfer_comparison


@pytest.fixture(scope="session")
def ci_runs(tmp_path_factory):
    """The CI-scale curriculum, generalization study and transfer comparison, run once per session."""
    plan = ci_plan(out=str(tmp_path_factory.mktemp("ci")))
    t0 = time.perf_counter()
    lifelong = run_lifelong(plan)
    t1 = time.perf_counter()
    generalization = run_generalization(plan)
    t2 = time.perf_counter()
    transfer = run_transfer_comparison(plan)
    t3 = time.perf_counter()
    return {
        "plan": plan,
        "lifelong": lifelong,
        "generalization": generalization,
        "transfer": transfer,
        "seconds": {"lifelong": t1 - t0, "generalization": t2 - t1, "transfer": t3 - t2, "total": t3 - t0},
    }


@pytest.fixture
def announce(capsys):
    """Print one verdict line straight to the terminal, bypassing capture."""

    def emit(label: str, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n[{label}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit
