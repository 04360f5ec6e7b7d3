"""Shared test oracles: independent implementations used to check the package.

These deliberately avoid the package's own fast paths: convolution is a
naive seven-loop sum, gradients come from central finite differences.
"""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation oracle."""
    n, c_in, h, w_in = x.shape
    c_out, _, k, _ = w.shape
    hp, wp = h + 2 * padding, w_in + 2 * padding
    xp = np.zeros((n, c_in, hp, wp))
    xp[:, :, padding : padding + h, padding : padding + w_in] = x
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for nn in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[nn, ci, i * stride + ki, j * stride + kj] * w[co, ci, ki, kj]
                    out[nn, co, i, j] = acc + b[co]
    return out


def fd_grad(f, x, step=1e-5):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a, b):
    """Relative error between two gradient arrays, norm-based."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return np.linalg.norm((a - b).ravel()) / denom


def random_orthonormal(n, r, seed=0):
    """Haar-ish orthonormal-column matrix via QR with sign fixing."""
    rng = np.random.default_rng(seed)
    q, rr = np.linalg.qr(rng.normal(size=(n, r)))
    return q * np.sign(np.where(np.diag(rr) == 0, 1.0, np.diag(rr)))
