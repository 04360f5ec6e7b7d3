"""Thin SVD with a deterministic sign convention and a structured backward.

``thin_svd`` factors X (n x m, n >= m) as U diag(sigma) V^T with
orthonormal U (n x m), descending sigma, and square orthogonal V.
``svd_backward`` maps loss gradients w.r.t. U and V to the gradient
w.r.t. X, treating sigma as loss-free. It requires well-separated
squared singular values; closer pairs raise
:class:`~caproj.errors.DegenerateSpectrumError` so the caller can
reperturb rather than silently clamp.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSpectrumError, NumericError, ShapeError

# Relative guard on squared singular-value gaps: pairs with
# |sigma_i^2 - sigma_j^2| <= GUARD_EPS_REL * sigma_0^2 are degenerate.
GUARD_EPS_REL = 1e-8


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD factors: u (n, m), sigma (m,) descending, v (m, m)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class SvdGradContext:
    """Precomputed pieces for the backward pass.

    k[i, j] = 1 / (sigma[j]^2 - sigma[i]^2) off the diagonal, 0 on it.
    """

    factors: SvdFactors
    k: np.ndarray
    guard: float


def thin_svd(x):
    """Thin SVD of a tall-or-square matrix with deterministic signs.

    Sign convention: in each column of U the entry of largest absolute
    value is nonnegative (ties broken by lowest row index); the matching
    column of V is negated to compensate, so U diag(sigma) V^T == X.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"thin_svd: expected a matrix, got shape {x.shape}")
    n, m = x.shape
    if n < m:
        raise ShapeError(
            f"thin_svd: expected n >= m, got shape {x.shape}; transpose the input"
        )
    if not np.all(np.isfinite(x)):
        raise NumericError("thin_svd: input contains non-finite values")
    u, sigma, vt = np.linalg.svd(x, full_matrices=False)
    v = vt.T.copy()
    # Deterministic signs: dominant entry of each U column made nonnegative.
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(m)] < 0.0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdFactors(u=u, sigma=sigma, v=v)


def grad_context(factors):
    """Build the gap-inverse matrix K, checking the degeneracy guard."""
    sigma = factors.sigma
    m = sigma.shape[0]
    s2 = sigma * sigma
    guard = GUARD_EPS_REL * (s2[0] if m else 0.0)
    diff = s2[None, :] - s2[:, None]
    if m > 1:
        gaps = np.abs(diff[~np.eye(m, dtype=bool)])
        worst = int(np.argmin(gaps))
        min_gap = float(gaps[worst])
        if min_gap <= guard:
            # Recover the offending (i, j) from the flattened off-diagonal index.
            pairs = np.argwhere(~np.eye(m, dtype=bool))
            i, j = (int(a) for a in pairs[worst])
            raise DegenerateSpectrumError(
                f"singular values {i} and {j} are too close: "
                f"|sigma[{i}]^2 - sigma[{j}]^2| = {min_gap:.3e} <= guard {guard:.3e}",
                pair=(i, j),
                gap=min_gap,
                guard=guard,
            )
    # A near-zero singular value is as hostile as a near-equal pair: the
    # perpendicular term of the backward pass divides by sigma. Treat it as
    # a vanishing gap between sigma[m-1]^2 and zero.
    if m and s2[-1] <= guard:
        raise DegenerateSpectrumError(
            f"smallest singular value is too close to zero: "
            f"sigma[{m - 1}]^2 = {s2[-1]:.3e} <= guard {guard:.3e}",
            pair=(m - 1, m - 1),
            gap=float(s2[-1]),
            guard=guard,
        )
    k = np.zeros((m, m), dtype=np.float64)
    off = ~np.eye(m, dtype=bool)
    k[off] = 1.0 / diff[off]
    return SvdGradContext(factors=factors, k=k, guard=guard)


def svd_backward(ctx, dl_du, dl_dv, v_term_only=False):
    """Gradient of a loss through (U, V) back to X.

    Full two-term form (the default):

        dX = U [ (K o (M - M^T)) S + S (K o (N - N^T)) ] V^T
             + (I - U U^T) dL/dU S^{-1} V^T

    with M = U^T dL/dU, N = V^T dL/dV, S = diag(sigma) and K from
    :func:`grad_context`. ``v_term_only=True`` keeps only the
    S (K o (N - N^T)) term, the published single-term approximation.
    """
    f = ctx.factors
    u, sigma, v = f.u, f.sigma, f.v
    n, m = u.shape
    dl_du = np.asarray(dl_du, dtype=np.float64)
    dl_dv = np.asarray(dl_dv, dtype=np.float64)
    if dl_du.shape != u.shape:
        raise ShapeError(f"svd_backward: dL/dU shape {dl_du.shape} != U shape {u.shape}")
    if dl_dv.shape != v.shape:
        raise ShapeError(f"svd_backward: dL/dV shape {dl_dv.shape} != V shape {v.shape}")

    nmat = v.T @ dl_dv
    inner = sigma[:, None] * (ctx.k * (nmat - nmat.T))
    if not v_term_only:
        mmat = u.T @ dl_du
        inner = inner + (ctx.k * (mmat - mmat.T)) * sigma[None, :]
    dx = u @ inner @ v.T
    if not v_term_only and n > m:
        # Component of dL/dU orthogonal to the column space of U.
        perp = dl_du - u @ mmat
        dx = dx + (perp / sigma[None, :]) @ v.T
    return dx
