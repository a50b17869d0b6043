"""Package version and code-version string used in run provenance."""

from __future__ import annotations

import subprocess
from pathlib import Path

__version__ = "0.1.0"


def code_version() -> str:
    """A stable identifier for the code that produced an artifact.

    Prefers ``git describe`` of the source tree when available, falling
    back to the package version. Stable across invocations for an
    unchanged tree, which keeps checkpoint bytes reproducible.
    """
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"mgkd-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"mgkd-{__version__}"
