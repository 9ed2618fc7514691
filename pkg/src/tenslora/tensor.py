r"""Dense multilinear algebra for Tucker-format tensors.

A dense tensor is simply a :class:`numpy.ndarray` of ``float64`` in C order
(last mode varying fastest).  Tucker-format tensors are held by
:class:`TuckerFactors`, a core plus one factor matrix per mode::

    X = G x_0 U_0 x_1 U_1 ... x_{N-1} U_{N-1}

Unfolding follows the usual convention: the chosen mode becomes the rows and
the remaining modes, in increasing order, are flattened with the last one
varying fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "TuckerFactors",
    "as_dense",
    "unfold",
    "fold",
    "mode_n_product",
    "multi_mode_product",
    "tucker_reconstruct",
    "tucker_slice",
    "orthonormal_init",
    "hosvd",
    "relative_error",
]


def as_dense(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate and convert ``data`` to a dense float64 tensor.

    ``shape`` may be given when ``data`` is a flat buffer.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim < 1:
        raise ValueError("a dense tensor needs at least one mode")
    if any(s < 1 for s in arr.shape):
        raise ValueError(f"every mode size must be >= 1, got {arr.shape}")
    return arr


def _check_mode(ndim: int, mode: int) -> int:
    if not 0 <= mode < ndim:
        raise IndexError(f"mode {mode} out of range for an order-{ndim} tensor")
    return mode


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding of ``t`` into a ``(t.shape[mode], -1)`` matrix."""
    t = np.asarray(t)
    _check_mode(t.ndim, mode)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given full ``shape``."""
    shape = tuple(shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1 :]
    return np.moveaxis(np.asarray(m).reshape((shape[mode],) + rest), 0, mode)


def mode_n_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` product ``t x_mode m``.

    ``m`` has shape ``(k, t.shape[mode])``; the result has mode ``mode``
    resized to ``k`` and is equal to ``fold(m @ unfold(t, mode))``.
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix of shape {m.shape} cannot act on mode {mode} of size {t.shape[mode]}"
        )
    out = np.tensordot(m, t, axes=([1], [mode]))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def multi_mode_product(t: np.ndarray, mats: Mapping[int, np.ndarray]) -> np.ndarray:
    """Apply several mode products; ``mats`` maps mode -> matrix."""
    for mode, m in mats.items():
        t = mode_n_product(t, m, mode)
    return t


@dataclass
class TuckerFactors:
    """A Tucker-format tensor: ``core`` of shape ``ranks`` and ``factors[i]`` of
    shape ``(dims[i], ranks[i])``.

    Ranks may exceed the mode sizes (over-complete factors).
    """

    core: np.ndarray
    factors: list

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=np.float64)
        self.factors = [np.asarray(f, dtype=np.float64) for f in self.factors]
        self.validate()

    def validate(self) -> None:
        if self.core.ndim != len(self.factors):
            raise ValueError(
                f"core has order {self.core.ndim} but {len(self.factors)} factors were given"
            )
        for i, f in enumerate(self.factors):
            if f.ndim != 2 or f.shape[1] != self.core.shape[i]:
                raise ValueError(
                    f"factor {i} has shape {f.shape}, expected (dim, {self.core.shape[i]})"
                )

    @property
    def order(self) -> int:
        return self.core.ndim

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ranks(self) -> tuple:
        return self.core.shape

    @property
    def size(self) -> int:
        """Number of stored scalars (core plus factors)."""
        return self.core.size + sum(f.size for f in self.factors)

    def copy(self) -> "TuckerFactors":
        return TuckerFactors(self.core.copy(), [f.copy() for f in self.factors])


def tucker_reconstruct(f: TuckerFactors) -> np.ndarray:
    """Full dense tensor ``core x_0 U_0 ... x_{N-1} U_{N-1}``."""
    f.validate()
    return multi_mode_product(f.core, dict(enumerate(f.factors)))


def tucker_slice(f: TuckerFactors, fixed: Mapping[int, int]) -> np.ndarray:
    """Entries of the reconstructed tensor with some modes held at fixed indices.

    Each fixed mode is contracted with the matching single factor row before
    the free modes are expanded, so the full tensor is never formed.  The
    result has the free modes in their original order; fixing every mode
    returns a 0-d array.
    """
    f.validate()
    shape = f.shape
    for mode, idx in fixed.items():
        _check_mode(f.order, mode)
        if not 0 <= idx < shape[mode]:
            raise IndexError(f"index {idx} out of range for mode {mode} of size {shape[mode]}")
    g = f.core
    # contract from the highest mode down so the remaining axis numbers stay valid
    for mode in sorted(fixed, reverse=True):
        g = np.tensordot(g, f.factors[mode][fixed[mode]], axes=([mode], [0]))
    free = [m for m in range(f.order) if m not in fixed]
    for axis, mode in enumerate(free):
        g = mode_n_product(g, f.factors[mode], axis)
    return g


def orthonormal_init(rows: int, cols: int, seed) -> np.ndarray:
    """Random matrix with orthonormal columns (``rows >= cols``) or rows.

    Deterministic in ``seed``, which may be anything accepted by
    :func:`numpy.random.default_rng` (including a tuple of ints).
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = np.random.default_rng(seed)
    tall, short = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((tall, short)))
    # QR is unique once diag(R) is made positive
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    return np.ascontiguousarray(q if rows >= cols else q.T)


def _fix_signs(u: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def hosvd(t: np.ndarray, ranks: Sequence[int] | None = None) -> TuckerFactors:
    """Truncated higher-order SVD.

    Parameters
    ----------
    t:
        Dense tensor to factor.
    ranks:
        Per-mode ranks, each at most the matching mode size.  Defaults to the
        full mode sizes, in which case the reconstruction is exact.

    Returns
    -------
    TuckerFactors
        Factor ``i`` holds the leading left singular vectors of the mode-``i``
        unfolding, each signed so its largest-magnitude entry is positive.
    """
    t = as_dense(t)
    ranks = tuple(t.shape) if ranks is None else tuple(int(r) for r in ranks)
    if len(ranks) != t.ndim:
        raise ValueError(f"need {t.ndim} ranks, got {len(ranks)}")
    for i, (r, n) in enumerate(zip(ranks, t.shape)):
        if not 1 <= r <= n:
            raise ValueError(f"rank {r} for mode {i} must lie in [1, {n}]")
    factors = []
    for mode, r in enumerate(ranks):
        u, _, _ = np.linalg.svd(unfold(t, mode), full_matrices=False)
        factors.append(_fix_signs(u[:, :r]))
    core = multi_mode_product(t, {m: u.T for m, u in enumerate(factors)})
    return TuckerFactors(core, factors)


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Relative Frobenius error ``||approx - exact|| / ||exact||``."""
    denom = np.linalg.norm(exact)
    diff = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    return float(diff / denom) if denom > 0 else float(diff)
