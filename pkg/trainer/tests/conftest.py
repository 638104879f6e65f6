import shutil
import subprocess

import pytest

_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].removeprefix("test_")
    _ACCEPTANCE_RESULTS.append((name, report.outcome.upper()))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[acceptance] {name}: {outcome}")


def run_pipeline(*args: str) -> subprocess.CompletedProcess:
    """Invoke the crop-pipeline CLI (the trainer's upstream interface)."""
    exe = shutil.which("hepacrop")
    if exe is None:
        pytest.skip("hepacrop CLI not installed")
    return subprocess.run([exe, *args], capture_output=True, text=True)


@pytest.fixture(scope="session")
def cohort(tmp_path_factory):
    """A small preprocessed cohort built through the upstream CLI."""
    root = tmp_path_factory.mktemp("cohort")
    vols = root / "vols"
    steps = [
        ("synth", "--seed", "7", "--n-patients", "8", "--out", str(vols)),
        ("preprocess", "--volumes", str(vols), "--studies",
         str(vols / "studies.jsonl"), "--out", str(root / "prep"),
         "--res", "32"),
        ("split", "--manifest", str(root / "prep" / "manifest_32.jsonl"),
         "--seeds", "17", "--out", str(root / "splits")),
        ("balance", "--manifest", str(root / "prep" / "manifest_32.jsonl"),
         "--plan", str(root / "splits" / "split_17.json"),
         "--out", str(root / "balanced.jsonl")),
    ]
    for step in steps:
        proc = run_pipeline(*step)
        assert proc.returncode == 0, f"{step[0]} failed: {proc.stderr}"
    return root
