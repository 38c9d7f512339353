import numpy as np
import pytest


def naive_correlate(x, w, pad):
    """Direct loop reference for stride-1 zero-padded cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1))
    for b in range(n):
        for oc in range(o):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    acc = 0.0
                    for ci in range(c):
                        for m in range(kh):
                            for k in range(kw):
                                y, xx = i + m - pad, j + k - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[b, ci, y, xx] * w[oc, ci, m, k]
                    out[b, oc, i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {key}: {detail}")
