import os
import subprocess
import sys

import numpy as np
import pytest

from rvar import kernels


def _case(rng, nb, d, u):
    return (rng.normal(size=(nb, d)), rng.normal(size=(nb, u)), rng.normal(size=(nb, u)),
            rng.normal(scale=0.4, size=(4 * u, d + u)), rng.normal(size=4 * u))


@pytest.mark.skipif("cython" not in kernels.backends(), reason="extension not built")
@pytest.mark.parametrize("shape", [(1, 5, 20), (64, 20, 20), (3, 1, 1), (7, 2, 9)])
def test_backends_agree(shape):
    rng = np.random.default_rng(sum(shape))
    py, cy = kernels.backends()["python"], kernels.backends()["cython"]
    x, h, c, w, b = _case(rng, *shape)
    fp, fc = py.lstm_forward(x, h, c, w, b), cy.lstm_forward(x, h, c, w, b)
    for a, e in zip(fc, fp):
        np.testing.assert_allclose(a, e, rtol=0, atol=1e-12)
    dh, dc = rng.normal(size=h.shape), rng.normal(size=c.shape)
    bp = py.lstm_backward(dh, dc, x, h, c, w, *fp[2:])
    bc = cy.lstm_backward(dh, dc, x, h, c, w, *fc[2:])
    for a, e in zip(bc, bp):
        np.testing.assert_allclose(a, e, rtol=0, atol=1e-12)


def test_fallback_forced_by_environment():
    env = dict(os.environ, RVAR_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import rvar.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_backend_is_reported():
    assert kernels.BACKEND in kernels.backends()
