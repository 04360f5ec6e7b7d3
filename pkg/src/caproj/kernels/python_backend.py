"""Pure-numpy conv patch kernels.

Reference implementation of the patch gather/scatter used by conv2d.
The compiled backend in ``_core.pyx`` produces bit-identical results:
both accumulate each output slot of col2im in the same (ki, kj) order.
"""

import numpy as np

BACKEND = "python"


def im2col(x_padded, k, stride, oh, ow):
    """Gather k*k patches into a (n*oh*ow, c*k*k) matrix.

    x_padded: (n, c, hp, wp) float64, already zero-padded.
    Column order within a row is (c, ki, kj), matching a row-major
    reshape of a (c_out, c, k, k) weight tensor.
    """
    n, c = x_padded.shape[0], x_padded.shape[1]
    cols = np.empty((n, oh, ow, c, k, k), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            patch = x_padded[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            cols[:, :, :, :, ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * k * k)


def col2im(cols, n, c, hp, wp, k, stride, oh, ow):
    """Scatter-add patch columns back onto a zeroed (n, c, hp, wp) canvas.

    Each output slot accumulates its overlapping contributions in
    increasing (ki, kj) order; the compiled backend mirrors this order.
    """
    cols6 = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols6[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)
    return out
