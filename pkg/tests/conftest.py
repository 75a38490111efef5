import numpy as np
import pytest

TABLE2_TOTALS = (327, 514, 1099, 115, 6705, 1113, 142)
TABLE2_TRAIN = (229, 360, 769, 81, 4694, 779, 99)
TABLE2_TEST = (98, 154, 330, 34, 2011, 334, 43)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def disk_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2


def blob_mask(rng, h=64, w=64, margin=14):
    """Random irregular lesion well inside the frame."""
    yy, xx = np.mgrid[:h, :w].astype(float)
    cy, cx = rng.uniform(margin + 6, h - margin - 6), rng.uniform(margin + 6, w - margin - 6)
    ang = np.arctan2(yy - cy, xx - cx)
    radius = rng.uniform(6, 10) * (1 + 0.25 * np.sin(rng.integers(2, 5) * ang + rng.uniform(0, 6)))
    radius *= 1 + 0.15 * np.cos(ang - rng.uniform(0, 6))
    return np.hypot(yy - cy, xx - cx) <= radius


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
