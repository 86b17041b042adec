import itertools
import math

import numpy as np
import pytest

from serialgan import segmentation as S
from serialgan.model import ModelConfig, init_model


def numeric_grad(f, arr, idx, h):
    """Central difference of scalar ``f()`` w.r.t. ``arr[idx]`` (perturbed in place)."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def smooth_numeric_grad(f, arr, idx, h, tol=1e-3):
    """Central difference, or None when halving the step changes it (a kink lies in the stencil)."""
    g1 = numeric_grad(f, arr, idx, h)
    g2 = numeric_grad(f, arr, idx, h / 2)
    if abs(g1 - g2) > tol * max(abs(g1), abs(g2)) + 1e-7:
        return None
    return g2


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def sample_indices(rng, shape, k):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


# ---- shared oracles -----------------------------------------------------------------


def random_graph(rng, n_inner):
    n = n_inner + 2
    g = S.FlowGraph(n, 0, n - 1)
    m = int(rng.integers(1, 3 * n))
    tails = rng.integers(0, n, m)
    heads = rng.integers(0, n, m)
    keep = tails != heads
    caps = np.round(rng.uniform(0, 10, m), 3)
    g.add_edges(tails[keep], heads[keep], caps[keep], np.where(rng.random(m) < 0.3, caps, 0)[keep])
    return g


def brute_min_cut(g):
    inner = [v for v in range(g.n) if v not in (g.source, g.sink)]
    best = math.inf
    for bits in itertools.product((False, True), repeat=len(inner)):
        side = np.zeros(g.n, dtype=bool)
        side[g.source] = True
        side[inner] = bits
        best = min(best, S.cut_capacity(g, side))
    return best


def sweep_area(points, step_deg=0.5):
    best = math.inf
    for a in np.arange(0, 90, step_deg):
        t = math.radians(a)
        u = points @ [math.cos(t), math.sin(t)]
        v = points @ [-math.sin(t), math.cos(t)]
        best = min(best, np.ptp(u) * np.ptp(v))
    return best


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


def mann_whitney(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(side=8, latent=4, width=2, seed=3)


@pytest.fixture
def tiny_state(tiny_cfg):
    return init_model(tiny_cfg)


# ---- acceptance summary ---------------------------------------------------------------

ACCEPTANCE = []


def record_criterion(name, ok, detail=""):
    """Remember one acceptance verdict; printed now and again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
