import itertools

import numpy as np
import pytest
from hypothesis import settings

from metricuq.mesh import SimplexMesh, orient_positive

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def structured_mesh(n, box=((0.0, 1.0), (0.0, 1.0))):
    """Right-triangle (2D) or Kuhn (3D) mesh with n cells per axis."""
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in box]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)

    def vid(idx):
        out = 0
        for k in idx:
            out = out * (n + 1) + k
        return out

    simp = []
    for cell in itertools.product(range(n), repeat=d):
        for perm in itertools.permutations(range(d)):
            cur = list(cell)
            chain = [vid(cur)]
            for ax in perm:
                cur[ax] += 1
                chain.append(vid(cur))
            simp.append(chain)
    simp = orient_positive(grid, np.array(simp, dtype=np.int64))
    return SimplexMesh(grid, simp, np.zeros(len(grid), bool), box)


@pytest.fixture
def unit_square_mesh():
    return structured_mesh(8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
