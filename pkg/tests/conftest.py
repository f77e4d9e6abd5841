import numpy as np
import pytest
import torch

from mrisynth import SEQUENCES
from mrisynth.phantom import generate_case, generate_cases, PhantomSpec
from mrisynth.preprocess import fit_landmarks, normalize_case

# filled by the acceptance module, printed once at the end of the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def case():
    return generate_case(PhantomSpec(seed=3), "PHANTOM-00003")


@pytest.fixture(scope="session")
def cases16():
    return generate_cases(16, seed=0)


@pytest.fixture(scope="session")
def scales16(cases16):
    return {s: fit_landmarks([c.sequences[s] for c in cases16], sequence_name=s) for s in SEQUENCES}


@pytest.fixture(scope="session")
def normalized16(cases16, scales16):
    return {t: [normalize_case(c, t, scales16) for c in cases16] for t in SEQUENCES}


def center_channel_stub(x):
    """Generator stand-in that returns the center slice of the first input."""
    return x[:, 1:2].clone()


def constant_stub(c):
    def run(x):
        return torch.full((x.shape[0], 1) + tuple(x.shape[-2:]), c, dtype=x.dtype)

    return run


def central_diff(fn, x, eps=1e-6):
    """Numerical gradient of a scalar function of a float64 tensor."""
    g = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = fn(flat.view_as(x)).item()
        flat[i] = old - eps
        lo = fn(flat.view_as(x)).item()
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


def grad_rel_error(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = central_diff(fn, x.detach())
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale
