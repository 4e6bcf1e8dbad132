from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
SCRIPT = ROOT / "scripts" / "run_pipeline.sh"
SINGLE_THREAD = {"OPENBLAS_NUM_THREADS": "1", "OMP_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}

# Verdict lines from the acceptance tests, repeated in the terminal summary
# so they show up without ``-s``.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def run_canonical(preset: str, out: Path) -> Path:
    """Run the canonical pipeline script in a single-threaded subprocess."""
    env = {**os.environ, **SINGLE_THREAD, "GDLB": f"{sys.executable} -m gdlb.cli"}
    proc = subprocess.run(["bash", str(SCRIPT), preset, str(out)], env=env, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"pipeline failed ({proc.returncode}):\n{proc.stderr[-4000:]}")
    return out


@pytest.fixture(scope="session")
def canonical_run(tmp_path_factory) -> Path:
    """Output root of a full acceptance-preset pipeline run.

    ``GDLB_CANONICAL_DIR`` may point at a finished run to reuse it; otherwise
    the pipeline runs from scratch (about half an hour on one core).
    """
    reuse = os.environ.get("GDLB_CANONICAL_DIR")
    if reuse and (Path(reuse) / "report" / "summary.json").exists():
        return Path(reuse)
    return run_canonical("acceptance", tmp_path_factory.mktemp("canonical") / "run")
