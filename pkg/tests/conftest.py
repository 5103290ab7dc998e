import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from stpredict import cells  # noqa: E402
from stpredict.autodiff import Tensor, backend  # noqa: E402
from stpredict.cells import LayerState  # noqa: E402


@pytest.fixture(params=backend.available())
def kernels(request):
    """Run a test once per available kernel backend."""
    prev = backend.kernels
    backend.use(request.param)
    yield backend.kernels
    backend.kernels = prev


def randomize(params, rng, scale=0.5):
    """Overwrite every leaf (including biases) with random values, in place."""
    for k, v in params.items():
        if isinstance(v, dict):
            randomize(v, rng, scale)
        else:
            v.data[...] = rng.uniform(-scale, scale, size=v.shape)
    return params


def zero(params):
    for v in params.values():
        if isinstance(v, dict):
            zero(v)
        else:
            v.data[...] = 0
    return params


def as_numpy(params):
    return {k: (as_numpy(v) if isinstance(v, dict) else v.data.copy()) for k, v in params.items()}


def leaves(params):
    out = []
    for v in params.values():
        out.extend(leaves(v) if isinstance(v, dict) else [v])
    return out


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def state64(h, c):
    return LayerState(t64(h), t64(c))


# PASS/FAIL lines from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)


def _criterion_key(line):
    num = line.split()[1]
    return (int(num.rstrip("ab")), num)


CELL_SHAPES = dict(B=1, x=2, hidden=3, mem=3, S=4)


def cell_params(kind, rng, dtype=np.float64, x=2, hidden=3, mem=3):
    if kind == "convlstm":
        return cells.init_convlstm(rng, x, hidden, 3, dtype)
    if kind == "causal":
        return cells.init_causal_lstm(rng, x, hidden, mem, 3, dtype)
    if kind == "st":
        return cells.init_st_lstm(rng, x, hidden, mem, 3, dtype)
    if kind == "ta":
        return cells.init_temporal_attention(rng, hidden, 3, dtype)
    if kind == "sta":
        return cells.init_sta(rng, mem, dtype)
    if kind == "ghu":
        return cells.init_ghu(rng, hidden, mem, 3, dtype)
    raise ValueError(kind)
