import numpy as np
import pytest

from yolo26desk import tensor as T

# Smallest network that still has every block kind on the path to a
# three-level head (strides 8/16/32 at a 64 px input). About 3k parameters.
TINY_SPEC = """\
nc: 2
scales: [1.0, 1.0, 1024]
backbone:
  - [-1, 1, Conv, [4, 3, 2]]            # 0  /2
  - [-1, 1, Conv, [4, 3, 2]]            # 1  /4
  - [-1, 1, Conv, [4, 3, 2]]            # 2  /8
  - [-1, 1, C3k2, [4, False, 0.5, True]] # 3  /8 with attention
  - [-1, 1, Conv, [4, 3, 2]]            # 4  /16
  - [-1, 1, SPPF, [4, 5]]               # 5
  - [-1, 1, Conv, [4, 3, 2]]            # 6  /32
  - [-1, 1, C2PSA, [4]]                 # 7
head:
  - [-1, 1, Upsample, [2]]              # 8  /16
  - [[-1, 5], 1, Concat, [1]]           # 9
  - [-1, 1, C3k2, [4, True]]            # 10
  - [[3, 10, 7], 1, Detect, [4]]        # 11
"""

MINIMAL_SPEC = """\
nc: 5
scales: [1.0, 1.0, 1024]
backbone:
  - [-1, 1, Conv, [16, 3, 2]]
  - [-1, 1, Conv, [16, 3, 1]]
head:
  - [[-1, -1, -1], 1, Detect, []]
"""


def fd_gradient(f, arrays, coords, h=1e-5):
    """Central differences of scalar ``f()`` at ``(array_index, flat_index)`` coordinates."""
    out = []
    for ai, j in coords:
        a = arrays[ai]
        old = a.flat[j]
        a.flat[j] = old + h
        fp = f()
        a.flat[j] = old - h
        fm = f()
        a.flat[j] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_error(num, ana):
    """Relative error of two gradient vectors, ||num - ana|| / max(||num||, ||ana||)."""
    num, ana = np.ravel(num), np.ravel(ana)
    scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-300)
    return float(np.linalg.norm(num - ana) / scale)


def check_op_gradient(build, inputs, rng, n_coords=24, h=1e-5):
    """Compare backward() against central differences for ``sum(build(*tensors) * w)``.

    ``w`` is a fixed random weighting so every output element matters.
    """
    tensors = [T.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*tensors)
    w = rng.standard_normal(out.shape)

    def value():
        with T.no_grad():
            return float(np.sum(build(*[T.Tensor(t.data) for t in tensors]).data * w))

    loss = (build(*tensors) * w).sum()
    T.backward(loss)
    coords = []
    for ai, t in enumerate(tensors):
        picks = rng.choice(t.size, min(n_coords, t.size), replace=False)
        coords += [(ai, int(j)) for j in picks]
    num = fd_gradient(value, [t.data for t in tensors], coords, h)
    ana = np.array([tensors[ai].grad.flat[j] for ai, j in coords])
    return rel_error(num, ana)


def polar_factor(m):
    """U V^T of the SVD, computed from an eigendecomposition of M^T M (not from svd)."""
    vals, vecs = np.linalg.eigh(m.T @ m)
    return m @ (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
