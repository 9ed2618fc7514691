"""
Tucker factors, HOSVD and slices
================================

A Tucker tensor is a small core multiplied along each mode by a factor
matrix.  Adapters only ever need one slice of it per projection.
"""

import numpy as np

from tenslora.tensor import hosvd, relative_error, tucker_reconstruct, tucker_slice, unfold

rng = np.random.default_rng(0)
t = rng.standard_normal((6, 5, 4))

###############################################################################
# Mode-1 unfolding puts mode 1 on the rows; the other modes are flattened
# in increasing order with the last one varying fastest.
print(unfold(t, 1).shape)

###############################################################################
# Full-rank HOSVD reproduces the tensor to rounding error.  Truncating the
# ranks trades accuracy for size.
for ranks in [(6, 5, 4), (4, 4, 3), (2, 2, 2)]:
    f = hosvd(t, ranks)
    print(ranks, f.size, f"{relative_error(tucker_reconstruct(f), t):.2e}")

###############################################################################
# Fixing a mode contracts the core with one factor row first, so the full
# tensor is never built.
f = hosvd(t, (3, 3, 2))
s = tucker_slice(f, {2: 1})
print(s.shape, np.max(np.abs(s - tucker_reconstruct(f)[:, :, 1])))
