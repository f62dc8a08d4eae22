import re

import numpy as np
import pytest

from gaitmap.tensor import Tensor

FD_STEP = 1e-6
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(loss_fn, param: Tensor, coords=None, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param`` at flat ``coords`` (all when None)."""
    flat = param.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(param.shape)


def grad_check(loss_fn, params, max_coords: int | None = None, seed: int = 0, h: float = FD_STEP) -> float:
    """Max relative error between backward() and central differences over ``params``.

    With ``max_coords`` only that many randomly chosen coordinates per
    parameter are probed.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        n = p.data.size
        coords = None if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        num = numeric_grad(loss_fn, p, coords, h)
        ana = np.zeros(p.shape) if p.grad is None else p.grad
        idx = np.arange(n) if coords is None else np.asarray(coords)
        err = relative_error(ana.reshape(-1)[idx], num.reshape(-1)[idx])
        worst = max(worst, float(err.max()))
    return worst


def projector(shape, seed: int = 99) -> np.ndarray:
    """Fixed random weights turning a tensor output into a scalar loss."""
    return np.random.default_rng(seed).normal(size=shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------
_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_acceptance: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _CRITERION.match(item.name)
    if m and (rep.when == "call" or rep.failed):
        key = int(m.group(1))
        prev_ok = _acceptance.get(key, ("", True))[1]
        _acceptance[key] = (m.group(2).replace("_", " "), prev_ok and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance):
        name, ok = _acceptance[key]
        terminalreporter.write_line(f"criterion {key:2d} {'PASS' if ok else 'FAIL'}  {name}")
