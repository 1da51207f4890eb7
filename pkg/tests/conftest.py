import numpy as np
import pytest

from stinflate.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def nested_conv(x, w, b, stride, pad):
    """Loop-by-loop cross-correlation, the oracle for the vectorised conv."""
    nd = w.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out_sp = [(xp.shape[2 + i] - w.shape[2 + i]) // stride[i] + 1 for i in range(nd)]
    out = np.zeros((x.shape[0], w.shape[0], *out_sp))
    for idx in np.ndindex(x.shape[0], w.shape[0], *out_sp):
        n, o, pos = idx[0], idx[1], idx[2:]
        acc = float(b[o])
        for c in range(w.shape[1]):
            for k in np.ndindex(*w.shape[2:]):
                src = tuple(pos[i] * stride[i] + k[i] for i in range(nd))
                acc += w[(o, c) + k] * xp[(n, c) + src]
        out[idx] = acc
    return out


# Acceptance results, printed as one line per criterion at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
