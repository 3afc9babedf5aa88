import hashlib
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Store the one-line verdict printed at the end of the run."""
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


def source_digest(*extra: str) -> str:
    """Hash of the package source plus ``extra`` strings; cache key for trained models."""
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "reqdesc").glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    for e in extra:
        h.update(e.encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def model_cache(request) -> Path:
    return Path(request.config.cache.mkdir("reqdesc-models"))
