"""Trainable proxy matrices and the orthonormal projection map.

A proxy X of shape [c_out, r] is an unconstrained parameter. Its projection
P = phi(X) = U V^T (from the thin SVD of X) always has orthonormal columns,
so plain SGD on X walks the iterate along the manifold of orthonormal-column
matrices without any explicit retraction.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, record, tape_active
from .errors import DegenerateSpectrumError, NumericError, ShapeError
from .svd import grad_context, svd_backward, thin_svd

__all__ = ["ProjectionProxy", "phi", "phi_matrix", "init_proxy", "reperturb"]


class ProjectionProxy:
    """Unconstrained matrix X plus bookkeeping for its projection."""

    __slots__ = ("x", "rank", "cached_factors")

    def __init__(self, x, rank):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"proxy matrix must be 2-D, got shape {x.shape}")
        c_out = x.shape[0]
        if not 1 <= rank <= c_out:
            raise ValueError(f"rank {rank} out of range [1, {c_out}]")
        if x.shape[1] != rank:
            raise ShapeError(f"proxy shape {x.shape} does not match rank {rank}")
        self.x = Tensor(x, requires_grad=True, name="proxy_x")
        self.rank = int(rank)
        self.cached_factors = None

    @property
    def c_out(self):
        return self.x.data.shape[0]


def phi_matrix(x):
    """Nearest orthonormal-column matrix to x, as a plain array."""
    f = thin_svd(np.asarray(x, dtype=np.float64))
    return f.u @ f.v.T


def phi(proxy):
    """Differentiable projection P = U V^T of the proxy's current X.

    Factors are recomputed from the live X on every call; the degenerate
    spectrum guard fires here (not at backward time) whenever a gradient
    will be requested, so training loops can catch it and reperturb.
    """
    factors = thin_svd(proxy.x.data)
    proxy.cached_factors = factors
    out = Tensor(factors.u @ factors.v.T)
    if proxy.x.requires_grad and tape_active():
        ctx = grad_context(factors)
        u, v = factors.u, factors.v

        def backward(g):
            return (svd_backward(ctx, g @ v, g.T @ u),)

        record(out, (proxy.x,), backward)
    return out


def init_proxy(c_out, r, seed, warm_start=None):
    """Build a proxy: warm_start verbatim if given, else Gaussian entries.

    Random entries are iid normal with variance 1/c_out so that random
    columns start near unit norm regardless of width.
    """
    if not 1 <= r <= c_out:
        raise ValueError(f"rank {r} out of range [1, {c_out}]")
    if warm_start is not None:
        x = np.asarray(warm_start, dtype=np.float64)
        if x.shape != (c_out, r):
            raise ShapeError(
                f"warm_start shape {x.shape} does not match ({c_out}, {r})"
            )
        return ProjectionProxy(x.copy(), r)
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, c_out ** -0.5, size=(c_out, r))
    return ProjectionProxy(x, r)


def reperturb(proxy, magnitude=None, seed=0):
    """Nudge X with seeded Gaussian noise until its spectrum is gradable.

    Each attempt draws fresh noise of the same magnitude on top of the
    original X (default magnitude 1e-6 * ||X||_F). At most 5 attempts;
    persistent degeneracy raises with the last offending pair.
    """
    base = proxy.x.data.copy()
    if magnitude is None:
        magnitude = 1e-6 * float(np.linalg.norm(base))
    if magnitude < 0:
        raise ValueError(f"magnitude must be nonnegative, got {magnitude}")
    rng = np.random.default_rng(seed)
    last = None
    for _ in range(5):
        candidate = base + magnitude * rng.normal(size=base.shape)
        try:
            grad_context(thin_svd(candidate))
        except DegenerateSpectrumError as exc:
            last = exc
            continue
        proxy.x.data = candidate
        proxy.cached_factors = None
        return proxy
    raise NumericError(
        f"spectrum still degenerate after 5 reperturb attempts "
        f"(magnitude {magnitude:.3e}): {last}"
    )
