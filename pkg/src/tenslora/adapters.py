"""Tensor-structured low-rank adapters for the Q/K/V projections.

The 3·L update matrices of a model (three projections in each of L layers)
are grouped into one or more higher-order tensors, and each tensor is held in
Tucker form.  The grouping axes are

* ``Att``   -- split the output dimension into heads: ``(d, d_h, h)``;
* ``QKV``   -- stack the three projections of a layer: an extra mode of size 3;
* ``Depth`` -- stack the same projection over layers: an extra mode of size L;

and any combination of them.  ``LoRA`` is the plain matrix baseline
``A @ B`` per projection and layer.

Weights act as ``out = in @ W`` with ``W`` of shape ``(d, d)``.  Tensor mode 0
is the input dimension; mode 1 is the output dimension (or the per-head
output dimension), and head ``j`` owns output columns
``[j*d_h, (j+1)*d_h)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autograd as ag
from .tensor import TuckerFactors, orthonormal_init, tucker_reconstruct, tucker_slice

__all__ = [
    "VARIANTS",
    "TENSOR_VARIANTS",
    "PROJECTIONS",
    "ModelDims",
    "VIT_BASE",
    "CatalogEntry",
    "TensLoRAAdapter",
    "parse_variant",
    "mode_labels",
    "mode_sizes",
    "tensor_catalog",
    "validate_ranks",
    "init_adapter",
    "param_count",
    "delta",
    "delta_graph",
    "apply",
    "merge",
    "rank_label",
]

VARIANTS = ("LoRA", "Att", "QKV", "Depth", "Att_QKV", "Att_Depth", "QKV_Depth", "Att_QKV_Depth")
TENSOR_VARIANTS = VARIANTS[1:]
PROJECTIONS = ("Q", "K", "V")

_SHORT = {"d_in": "d", "d_out": "d", "d_h": "d_h", "h": "h", "qkv": "n", "depth": "L", "r": "r"}


def parse_variant(name: str) -> str:
    """Canonical variant name, accepting any case and ``-`` for ``_``."""
    key = str(name).replace("-", "_").lower()
    for v in VARIANTS:
        if v.lower() == key:
            return v
    raise ValueError(f"unknown adapter variant {name!r}; choose from {', '.join(VARIANTS)}")


def _projection_index(p) -> int:
    if isinstance(p, str):
        try:
            return PROJECTIONS.index(p.upper())
        except ValueError:
            raise ValueError(f"unknown projection {p!r}") from None
    p = int(p)
    if not 0 <= p < 3:
        raise IndexError(f"projection index {p} out of range")
    return p


@dataclass(frozen=True)
class ModelDims:
    """Geometry of the adapted model: width ``d``, ``h`` heads, ``L`` layers.

    Only Query, Key and Value are adapted, so ``n`` is always 3.
    """

    d: int
    h: int
    L: int
    n: int = 3

    def __post_init__(self):
        if min(self.d, self.h, self.L) < 1:
            raise ValueError("d, h and L must be positive")
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")
        if self.n != 3:
            raise ValueError("only the Q, K and V projections are adapted (n must be 3)")

    @property
    def d_h(self) -> int:
        return self.d // self.h


VIT_BASE = ModelDims(d=768, h=12, L=12)


def mode_labels(variant: str) -> tuple:
    variant = parse_variant(variant)
    if variant == "LoRA":
        return ("d_in", "d_out")
    parts = variant.split("_")
    labels = ["d_in"] + (["d_h", "h"] if "Att" in parts else ["d_out"])
    if "QKV" in parts:
        labels.append("qkv")
    if "Depth" in parts:
        labels.append("depth")
    return tuple(labels)


def mode_sizes(variant: str, dims: ModelDims) -> tuple:
    size = {"d_in": dims.d, "d_out": dims.d, "d_h": dims.d_h, "h": dims.h, "qkv": 3, "depth": dims.L}
    return tuple(size[lab] for lab in mode_labels(variant))


@dataclass(frozen=True)
class CatalogEntry:
    shape: tuple
    multiplicity: int
    labels: tuple


def tensor_catalog(variant: str, dims: ModelDims) -> list:
    """Shapes and multiplicities of the tensors a variant trains.

    For ``LoRA`` the single entry describes the ``(d, d)`` update matrix
    formed by each of the ``3L`` ``(A, B)`` pairs.
    """
    variant = parse_variant(variant)
    labels = mode_labels(variant)
    if variant == "LoRA":
        mult = 3 * dims.L
    else:
        mult = (1 if "qkv" in labels else 3) * (1 if "depth" in labels else dims.L)
    return [CatalogEntry(mode_sizes(variant, dims), mult, labels)]


def validate_ranks(variant: str, ranks: Mapping[str, int]) -> dict:
    variant = parse_variant(variant)
    expected = ("r",) if variant == "LoRA" else mode_labels(variant)
    if set(ranks) != set(expected):
        raise ValueError(
            f"{variant} needs ranks for exactly {list(expected)}, got {sorted(ranks)}"
        )
    out = {lab: int(ranks[lab]) for lab in expected}
    if any(r < 1 for r in out.values()):
        raise ValueError(f"ranks must be >= 1, got {out}")
    return out


def rank_label(variant: str, ranks: Mapping[str, int]) -> str:
    """Compact display such as ``d:7, d_h:4, h:12``."""
    variant = parse_variant(variant)
    keys = ("r",) if variant == "LoRA" else mode_labels(variant)
    return ", ".join(f"{_SHORT[k]}:{ranks[k]}" for k in keys)


def param_count(variant: str, dims: ModelDims, ranks: Mapping[str, int]) -> int:
    """Trainable scalars: ``2*d*r*n*L`` for LoRA, otherwise
    ``multiplicity * (prod(r_i) + sum(dim_i * r_i))``."""
    variant = parse_variant(variant)
    ranks = validate_ranks(variant, ranks)
    if variant == "LoRA":
        return 2 * dims.d * ranks["r"] * dims.n * dims.L
    (entry,) = tensor_catalog(variant, dims)
    rs = [ranks[lab] for lab in entry.labels]
    per_tensor = int(np.prod(rs, dtype=np.int64)) + sum(n * r for n, r in zip(entry.shape, rs))
    return entry.multiplicity * per_tensor


@dataclass
class TensLoRAAdapter:
    """Trainable adapter state.

    ``params`` maps names to arrays and is the single source of truth:
    ``t{i}.core`` / ``t{i}.u{m}`` for tensor variants, ``A.{p}.{l}`` /
    ``B.{p}.{l}`` for LoRA.
    """

    variant: str
    dims: ModelDims
    ranks: dict
    alpha: float = 4.0
    params: dict = field(default_factory=dict)

    @property
    def labels(self) -> tuple:
        return mode_labels(self.variant)

    @property
    def head_split(self) -> bool:
        return "h" in self.labels and self.variant != "LoRA"

    @property
    def num_tensors(self) -> int:
        return tensor_catalog(self.variant, self.dims)[0].multiplicity

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def tucker(self, i: int) -> TuckerFactors:
        """Tucker view of tensor ``i``; arrays are shared with ``params``."""
        core = self.params[f"t{i}.core"]
        return TuckerFactors(core, [self.params[f"t{i}.u{m}"] for m in range(core.ndim)])

    @property
    def tensors(self) -> list:
        if self.variant == "LoRA":
            return [(self.params[f"A.{p}.{l}"], self.params[f"B.{p}.{l}"]) for p, l in self.slots()]
        return [self.tucker(i) for i in range(self.num_tensors)]

    def slots(self):
        return [(p, l) for p in range(3) for l in range(self.dims.L)]

    def slot(self, p, l: int) -> tuple:
        """``(tensor id, {mode: coordinate})`` locating projection ``p`` of layer ``l``."""
        p = _projection_index(p)
        if not 0 <= l < self.dims.L:
            raise IndexError(f"layer {l} out of range for L={self.dims.L}")
        labels = self.labels
        if self.variant == "LoRA":
            return p * self.dims.L + l, {}
        fixed = {}
        tid_p, tid_l, stride = p, l, self.dims.L
        if "qkv" in labels:
            fixed[labels.index("qkv")] = p
            tid_p = 0
        if "depth" in labels:
            fixed[labels.index("depth")] = l
            tid_l, stride = 0, 1
        return tid_p * stride + tid_l, fixed

    def copy(self) -> "TensLoRAAdapter":
        return replace(self, ranks=dict(self.ranks), params={k: v.copy() for k, v in self.params.items()})

    def zeroed(self) -> "TensLoRAAdapter":
        """Copy whose update is exactly zero (cores / ``B`` cleared)."""
        out = self.copy()
        for k, v in out.params.items():
            if k.endswith(".core") or k.startswith("B."):
                v[...] = 0.0
        return out

    def randomized(self, scale: float = 0.1, seed: int = 0) -> "TensLoRAAdapter":
        """Copy with Gaussian cores (``B`` for LoRA) so the update is non-trivial."""
        out = self.copy()
        rng = np.random.default_rng(seed)
        for k in sorted(out.params):
            if k.endswith(".core") or k.startswith("B."):
                out.params[k] = scale * rng.standard_normal(out.params[k].shape)
        return out


def init_adapter(variant: str, dims: ModelDims, ranks: Mapping[str, int], alpha: float = 4.0, seed: int = 0) -> TensLoRAAdapter:
    """Fresh adapter with orthonormal factors and zero cores.

    Every factor is seeded from ``(seed, tensor id, mode)``, so two calls with
    the same arguments give bit-identical state.  LoRA uses an
    orthonormal-column ``A`` and a zero ``B``.  The update is exactly zero.
    """
    variant = parse_variant(variant)
    ranks = validate_ranks(variant, ranks)
    params = {}
    if variant == "LoRA":
        r = ranks["r"]
        for p in range(3):
            for l in range(dims.L):
                tid = p * dims.L + l
                params[f"A.{p}.{l}"] = orthonormal_init(dims.d, r, (seed, tid, 0))
                params[f"B.{p}.{l}"] = np.zeros((r, dims.d))
    else:
        (entry,) = tensor_catalog(variant, dims)
        rs = tuple(ranks[lab] for lab in entry.labels)
        for i in range(entry.multiplicity):
            params[f"t{i}.core"] = np.zeros(rs)
            for m, (n, r) in enumerate(zip(entry.shape, rs)):
                params[f"t{i}.u{m}"] = orthonormal_init(n, r, (seed, i, m))
    return TensLoRAAdapter(variant, dims, ranks, float(alpha), params)


def _to_matrix(adapter: TensLoRAAdapter, s: np.ndarray) -> np.ndarray:
    if adapter.head_split:
        # (d, d_h, h) -> (d, h, d_h) -> (d, d): head j fills columns j*d_h..
        return np.ascontiguousarray(s.transpose(0, 2, 1)).reshape(adapter.dims.d, adapter.dims.d)
    return s


def delta(adapter: TensLoRAAdapter, p, l: int) -> np.ndarray:
    """Unscaled ``(d, d)`` update for projection ``p`` (``'Q'``/0, ...) of layer ``l``."""
    tid, fixed = adapter.slot(p, l)
    if adapter.variant == "LoRA":
        p = _projection_index(p)
        return adapter.params[f"A.{p}.{l}"] @ adapter.params[f"B.{p}.{l}"]
    return _to_matrix(adapter, tucker_slice(adapter.tucker(tid), fixed))


def delta_full(adapter: TensLoRAAdapter, p, l: int) -> np.ndarray:
    """Same as :func:`delta` but by indexing the fully reconstructed tensor."""
    tid, fixed = adapter.slot(p, l)
    if adapter.variant == "LoRA":
        return delta(adapter, p, l)
    full = tucker_reconstruct(adapter.tucker(tid))
    key = tuple(fixed.get(m, slice(None)) for m in range(full.ndim))
    return _to_matrix(adapter, full[key])


def delta_graph(adapter: TensLoRAAdapter, leaves: Mapping[str, ag.Variable]) -> dict:
    """All ``3L`` updates as graph nodes built from ``leaves`` (name -> Variable).

    The stacking modes (projection, layer) are contracted once per tensor;
    each slot then picks its entry and expands the free modes.
    """
    dims = adapter.dims
    out = {}
    if adapter.variant == "LoRA":
        for p, l in adapter.slots():
            out[(p, l)] = ag.matmul(leaves[f"A.{p}.{l}"], leaves[f"B.{p}.{l}"])
        return out
    labels = adapter.labels
    stacking = [m for m, lab in enumerate(labels) if lab in ("qkv", "depth")]
    free = [m for m in range(len(labels)) if m not in stacking]
    partial = {}
    for p, l in adapter.slots():
        tid, fixed = adapter.slot(p, l)
        if tid not in partial:
            g = leaves[f"t{tid}.core"]
            for m in stacking:
                g = ag.mode_n_product(g, leaves[f"t{tid}.u{m}"], m)
            partial[tid] = g
        g = partial[tid]
        if fixed:
            g = ag.index(g, tuple(fixed.get(m, slice(None)) for m in range(len(labels))))
        for axis, m in enumerate(free):
            g = ag.mode_n_product(g, leaves[f"t{tid}.u{m}"], axis)
        if adapter.head_split:
            g = ag.reshape(ag.transpose(g, (0, 2, 1)), (dims.d, dims.d))
        out[(p, l)] = g
    return out


def apply(adapter: TensLoRAAdapter, weights: Mapping[tuple, np.ndarray]) -> dict:
    """Effective weights ``W0 + alpha * delta`` for every ``(p, l)`` in ``weights``."""
    out = {}
    d = adapter.dims.d
    for (p, l), w0 in weights.items():
        w0 = np.asarray(w0, dtype=np.float64)
        if w0.shape != (d, d):
            raise ValueError(f"weight for slot {(p, l)} has shape {w0.shape}, expected {(d, d)}")
        out[(p, l)] = w0 + adapter.alpha * delta(adapter, p, l)
    return out


def merge(adapter: TensLoRAAdapter, backbone):
    """New backbone with ``alpha * delta`` folded into its Q/K/V weights.

    ``backbone`` must provide ``dims``, ``projection(p, l)`` and
    ``with_projections(mapping)``.
    """
    if backbone.dims != adapter.dims:
        raise ValueError(f"backbone dims {backbone.dims} do not match adapter dims {adapter.dims}")
    w0 = {(p, l): backbone.projection(p, l) for p, l in adapter.slots()}
    return backbone.with_projections(apply(adapter, w0))
