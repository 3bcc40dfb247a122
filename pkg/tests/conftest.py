import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sddekit.paths import LINEAR, STEP, CadlagPath, Segment

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

LATTICE = 40  # grid points per unit delay for generated segments


def random_segment(rng: np.random.Generator, kind: str, tau: float = 1.0, n: int = LATTICE,
                   n_breaks: int = 4, jumps: bool = True) -> Segment:
    """Few random breakpoints refined onto a uniform lattice of n cells.

    ``kind`` is "constant" (step mode) or "linear" (linear mode, optional jumps
    at lattice points)."""
    t = np.linspace(-tau, 0.0, n + 1)
    k = rng.integers(0, n_breaks + 1)
    idx = np.sort(rng.choice(np.arange(1, n), size=k, replace=False))
    if kind == "constant":
        levels = rng.normal(0.0, 2.0, k + 1)
        v = levels[np.searchsorted(idx, np.arange(n + 1), side="right")]
        return Segment(CadlagPath(t, v, mode=STEP), tau)
    knots = np.concatenate(([0], idx, [n]))
    kv = rng.normal(0.0, 2.0, knots.size)
    v = np.interp(np.arange(n + 1), knots, kv)
    jmp = {}
    if jumps:
        for j in rng.choice(np.arange(1, n + 1), size=rng.integers(0, 3), replace=False):
            jmp[int(j)] = float(v[j])
            v[j:] += rng.normal(0.0, 2.0)
    return Segment(CadlagPath(t, v, jmp, LINEAR), tau)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {k:>2}: {detail}"
        print(line)
        lines.append((k, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
