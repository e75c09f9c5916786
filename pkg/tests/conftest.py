import numpy as np
import pytest

from dicelab.models import Architecture, EnsembleModel


def fd_grad(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. the array ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = float(fn())
        flat[k] = old - h
        down = float(fn())
        flat[k] = old
        gf[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, M=2, K=3, d=2, input_dim=3, hidden=(4,), backward="class", discriminator="conditional",
               structure="independent"):
    r = np.random.default_rng(seed)
    arch = Architecture(input_dim=input_dim, d=d, K=K, M=M, hidden=hidden, backward=backward,
                        discriminator=discriminator, disc_hidden=(5, 4, 3), disc_embed=2, structure=structure)
    return EnsembleModel.init(arch, r, np.random.default_rng(seed + 1))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) == "call" and "test_acceptance" in rep.nodeid:
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("CRITERION")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines):
            terminalreporter.write_line(ln)
