import numpy as np
import pytest

from dsxformer.tensor import Tensor


def rand(shape, seed=0, scale=1.0, requires_grad=True):
    rng = np.random.default_rng(seed)
    return Tensor(scale * rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)


def perturb_params(params, seed=0, scale=0.3):
    """Replace every parameter with O(scale) random values so gradients are not tiny."""
    rng = np.random.default_rng(seed)
    for name, t in params.named_parameters():
        base = 1.0 if name.endswith("gamma") else 0.0
        t.data = (base + scale * rng.normal(size=t.shape)).astype(t.data.dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
