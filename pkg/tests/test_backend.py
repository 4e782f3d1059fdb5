import os
import subprocess
import sys

from nphkit import backend_name


def test_backend_reports_a_known_name():
    assert backend_name() in ("numba", "numpy")


def _backend_in_subprocess(value):
    env = dict(os.environ, NPHKIT_BACKEND=value)
    out = subprocess.run(
        [sys.executable, "-c", "import nphkit; print(nphkit.backend_name())"],
        capture_output=True, text=True, env=env,
    )
    return out


def test_numpy_backend_forced():
    out = _backend_in_subprocess("numpy")
    assert out.returncode == 0
    assert out.stdout.strip() == "numpy"


def test_invalid_backend_rejected():
    out = _backend_in_subprocess("gpu")
    assert out.returncode != 0
    assert "NPHKIT_BACKEND" in out.stderr
