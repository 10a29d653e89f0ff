import itertools

import numpy as np
import pytest

from censnet import autodiff as ad
from censnet.autodiff import Tape, Variable
from censnet.graph import Graph


def random_graph(rng, n_min=2, n_max=8, p=0.4, d_v=3, d_e=2, labels=None):
    """Erdos-Renyi graph with at least one edge and Gaussian features."""
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        pairs = [(i, j) for i, j in itertools.combinations(range(n), 2) if rng.random() < p]
        if pairs:
            break
    edges = np.array(pairs, dtype=np.int64)
    X = rng.standard_normal((n, d_v))
    Z = rng.standard_normal((len(edges), d_e))
    lab = None if labels is None else rng.integers(0, labels, size=n)
    return Graph(n, edges, X, Z, labels=lab, num_classes=labels)


def path3():
    # a - b - c with e1 = (a, b), e2 = (b, c)
    return Graph(3, np.array([[0, 1], [1, 2]]), np.eye(3), np.ones((2, 1)))


def k3():
    return Graph(3, np.array([[0, 1], [0, 2], [1, 2]]), np.eye(3), np.ones((3, 1)))


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_check(loss_fn, params, h=1e-6, rtol=1e-4, roundoff_floor=False):
    """Compare tape gradients of ``loss_fn() -> 1x1 Variable`` with central differences.

    Elementwise ``|a - n| / (|a| + 1e-8) <= rtol``. With ``roundoff_floor``
    an entry also passes when ``|a - n|`` is below the rounding error of the
    difference quotient itself, ``4 eps max(|f|, 1) / h``.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = loss_fn()
    ad.backward(loss)
    for p in params:
        analytic = p.grad.copy()

        def f():
            return float(loss_fn().value[0, 0])

        num = numeric_grad(f, p.value, h)
        rel = np.abs(analytic - num) / (np.abs(analytic) + 1e-8)
        if roundoff_floor:
            noise = 4 * np.finfo(float).eps * max(abs(f()), 1.0) / h
            rel = np.where(np.abs(analytic - num) <= noise, 0.0, rel)
        assert rel.size == 0 or rel.max() <= rtol, f"{p.name}: worst relative error {rel.max():.3e}"
    return True


def var(a, name=None):
    return Variable(np.array(a, dtype=np.float64), requires_grad=True, name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
