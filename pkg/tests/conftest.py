import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def numeric_grad(f, x: torch.Tensor, h: float = 1e-4, idx=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.data.view(-1)
    idx = range(flat.numel()) if idx is None else idx
    out = []
    with torch.no_grad():
        for i in idx:
            old = flat[i].item()
            flat[i] = old + h
            hi = float(f())
            flat[i] = old - h
            lo = float(f())
            flat[i] = old
            out.append((hi - lo) / (2 * h))
    return np.array(out)


def assert_grad_close(analytic, numeric, rtol, atol=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    err = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(numeric), np.abs(analytic))
    worst = int(np.argmax(err - bound))
    assert np.all(err <= bound), (
        f"entry {worst}: analytic {analytic[worst]:.8g} vs numeric {numeric[worst]:.8g}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def report_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
