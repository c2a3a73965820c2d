import os

import numpy as np
import pytest

from avsdf.numerics import Tape, Tensor


def directional_gradcheck(fn, inputs, rng, eps=1e-6, directions=2, atol=1e-7):
    """Compare tape gradients with central differences along random directions.

    ``fn`` maps Tensors to a scalar Tensor. Returns the worst relative error.
    A direction that disagrees is re-probed with a 10x smaller step: a
    difference that straddles a ReLU or max-pool switch shrinks with the step,
    a wrong gradient does not.
    """
    inputs = [np.asarray(x, np.float64) for x in inputs]
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*ts)
    grads = tape.backward(out, ts)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(x.shape) for x in inputs]
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        err = np.inf
        for h in (eps, eps / 10):
            plus = float(fn(*[Tensor(x + h * v) for x, v in zip(inputs, vs)]).data)
            minus = float(fn(*[Tensor(x - h * v) for x, v in zip(inputs, vs)]).data)
            numeric = (plus - minus) / (2 * h)
            err = min(err, abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol))
            if err <= 1e-4:
                break
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def long_runs_enabled() -> bool:
    return os.environ.get("AVSDF_RUN_LONG", "") not in ("", "0")


CRITERIA: dict = {}


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    def record(number: int, title: str, passed, detail: str = ""):
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        line = f"[criterion {number}] {status}: {title}" + (f" ({detail})" if detail else "")
        CRITERIA[number] = line
        with capsys.disabled():
            print("\n" + line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
