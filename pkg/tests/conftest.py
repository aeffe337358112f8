import numpy as np
import pytest

from lstmcaps import autodiff as ad

FD_EPS = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


def numeric_grad(f, arr, idx=None, eps=FD_EPS):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place
    and restored). ``idx`` limits the check to a list of flat indices."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)


def assert_grads_close(analytic, numeric, rel=REL_TOL, abs_tol=ABS_TOL):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    ok = (np.abs(analytic - numeric) <= abs_tol) | (rel_err(analytic, numeric) < rel)
    assert ok.all(), f"max rel err {rel_err(analytic, numeric).max():.3g}\n{analytic}\n{numeric}"


def check_tensor_grads(loss_fn, tensors, n_samples=None, rng=None):
    """Compare backward() against central differences for each tensor.

    ``loss_fn()`` must rebuild the graph from the tensors' current data.
    With ``n_samples`` only that many entries per tensor are perturbed.
    Returns the number of entries checked.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    checked = 0
    for t in tensors:
        size = t.data.size
        if n_samples is not None and size > n_samples:
            idx = list((rng or np.random.default_rng(0)).choice(size, n_samples, replace=False))
        else:
            idx = list(range(size))
        with ad.no_grad():
            num = numeric_grad(lambda: loss_fn().item(), t.data, idx)
        analytic = t.grad.reshape(-1)[idx]
        assert_grads_close(analytic, [num[i] for i in idx])
        checked += len(idx)
    return checked


_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _CRITERIA.append((mark.args[0], status, mark.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, status, title in sorted(_CRITERIA):
        terminalreporter.write_line(f"{status} {number}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
