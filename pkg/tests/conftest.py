import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def brute_force_conv3d(x, w, b):
    """Direct-summation oracle for valid 3-D cross-correlation."""
    cout, cin, kd, kh, kw = w.shape
    _, dz, dy, dx = x.shape
    oz, oy, ox = dz - kd + 1, dy - kh + 1, dx - kw + 1
    out = np.zeros((cout, oz, oy, ox))
    for o in range(cout):
        for z in range(oz):
            for y in range(oy):
                for xx in range(ox):
                    acc = b[o]
                    for c in range(cin):
                        for a in range(kd):
                            for bb in range(kh):
                                for d in range(kw):
                                    acc += x[c, z + a, y + bb, xx + d] * w[o, c, a, bb, d]
                    out[o, z, y, xx] = acc
    return out
