import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gaitkit import tensor as tn  # noqa: E402
from oracles import central_difference, rel_error  # noqa: E402


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def accept(request, capsys):
    """Record one acceptance line, print it immediately, and assert the criterion."""
    def report(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(fn, inputs, rng, h=1e-5, floor=1e-4):
    """Max relative error between autodiff and central differences of ``sum(fn(*inputs) * R)``.

    ``inputs`` are float64 arrays; a fixed random projection R makes the loss scalar.
    """
    tensors = [tn.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    loss = tn.sum(tn.mul(out, proj))
    tn.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(arr, k=k):
            args = [tn.Tensor(a) for a in inputs]
            args[k] = tn.Tensor(arr)
            with tn.no_grad():
                return float((fn(*args).data * proj).sum())
        num = central_difference(f, x.copy(), h)
        worst = max(worst, rel_error(tensors[k].grad, num, floor))
    return worst
