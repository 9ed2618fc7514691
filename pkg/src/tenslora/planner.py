"""Rank selection: isorank, budget-matched ("isoparameters") search, and the
pinned ViT-Base configurations.

The isoparameters search fixes the head, projection and depth modes at their
full sizes (12, 3 and 12 for ViT-Base) and searches the remaining ranks so
that modes of equal size share a rank and a larger mode never gets a smaller
rank than a smaller one.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Mapping

from .adapters import (
    TENSOR_VARIANTS,
    ModelDims,
    mode_labels,
    mode_sizes,
    param_count,
    parse_variant,
    validate_ranks,
)

__all__ = [
    "POLICIES",
    "PlanResult",
    "lora_budget",
    "percent_of",
    "round_k",
    "plan_isorank",
    "plan_isoparameters",
    "preset_table2",
    "plan_from_ranks",
    "isoparameter_candidates",
    "satisfies_constraints",
]

POLICIES = ("closest", "not_exceeding")

# Ranks of the budget-matched configurations at d=768, h=12, L=12, LoRA rank 4.
_PRESETS = {
    "Att": (7, 4, 12),
    "QKV": (11, 11, 3),
    "Depth": (37, 37, 12),
    "Att_QKV": (16, 9, 12, 3),
    "Att_Depth": (23, 16, 12, 12),
    "QKV_Depth": (60, 60, 3, 12),
    "Att_QKV_Depth": (28, 16, 12, 3, 12),
}


def lora_budget(dims: ModelDims, lora_rank: int) -> int:
    return 2 * dims.d * lora_rank * dims.n * dims.L


def _round_half_up(x: Fraction, places: int) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return (Decimal(x.numerator) / Decimal(x.denominator)).quantize(q, rounding=ROUND_HALF_UP)


def percent_of(count: int, budget: int) -> Decimal:
    """``100 * count / budget`` rounded half away from zero to one decimal."""
    return _round_half_up(Fraction(100 * count, budget), 1)


def round_k(count: int) -> int:
    """Thousands, rounded half away from zero."""
    return int(_round_half_up(Fraction(count, 1000), 0))


@dataclass(frozen=True)
class PlanResult:
    variant: str
    ranks: dict
    count: int
    budget: int

    @property
    def percent_of_lora(self) -> Decimal:
        return percent_of(self.count, self.budget)

    def as_dict(self) -> dict:
        from .adapters import rank_label

        return {
            "variant": self.variant,
            "ranks": dict(self.ranks),
            "label": rank_label(self.variant, self.ranks),
            "count": self.count,
            "budget": self.budget,
            "percent_of_lora": float(self.percent_of_lora),
        }


def plan_from_ranks(variant: str, dims: ModelDims, ranks: Mapping[str, int], lora_rank: int = 4) -> PlanResult:
    variant = parse_variant(variant)
    ranks = validate_ranks(variant, ranks)
    return PlanResult(variant, ranks, param_count(variant, dims, ranks), lora_budget(dims, lora_rank))


def plan_isorank(variant: str, dims: ModelDims, r: int) -> PlanResult:
    """Every mode gets rank ``r`` (not capped at the mode size)."""
    variant = parse_variant(variant)
    if r < 1:
        raise ValueError("rank must be >= 1")
    labels = ("r",) if variant == "LoRA" else mode_labels(variant)
    return plan_from_ranks(variant, dims, {lab: r for lab in labels}, lora_rank=r)


def preset_table2(variant: str) -> dict:
    """Pinned budget-matched ranks for ViT-Base geometry and LoRA rank 4."""
    variant = parse_variant(variant)
    if variant == "LoRA":
        raise ValueError("LoRA has no preset; it takes a single rank")
    return dict(zip(mode_labels(variant), _PRESETS[variant]))


_FIXED = ("h", "qkv", "depth")


def _free_groups(variant: str, dims: ModelDims):
    """Free mode labels grouped by size, smallest size first."""
    labels, sizes = mode_labels(variant), mode_sizes(variant, dims)
    by_size = {}
    for lab, n in zip(labels, sizes):
        if lab not in _FIXED:
            by_size.setdefault(n, []).append(lab)
    return [(n, by_size[n]) for n in sorted(by_size)]


def _fixed_ranks(variant: str, dims: ModelDims) -> dict:
    labels, sizes = mode_labels(variant), mode_sizes(variant, dims)
    return {lab: n for lab, n in zip(labels, sizes) if lab in _FIXED}


def _max_rank(dims: ModelDims) -> int:
    return 2 * max(dims.d, dims.h, dims.L, 3)


def satisfies_constraints(variant: str, dims: ModelDims, ranks: Mapping[str, int]) -> bool:
    """Fixed modes at full size; equal-size free modes share a rank; ranks of
    free modes do not decrease with mode size."""
    variant = parse_variant(variant)
    if any(ranks.get(lab) != r for lab, r in _fixed_ranks(variant, dims).items()):
        return False
    prev = 0
    for _, group in _free_groups(variant, dims):
        rs = {ranks[lab] for lab in group}
        if len(rs) != 1:
            return False
        (r,) = rs
        if not 1 <= r <= _max_rank(dims) or r < prev:
            return False
        prev = r
    return True


def isoparameter_candidates(variant: str, dims: ModelDims):
    """Every rank plan allowed by :func:`satisfies_constraints` (brute force)."""
    variant = parse_variant(variant)
    groups = _free_groups(variant, dims)
    fixed = _fixed_ranks(variant, dims)
    top = _max_rank(dims)
    for combo in itertools.product(range(1, top + 1), repeat=len(groups)):
        if any(b < a for a, b in zip(combo, combo[1:])):
            continue
        ranks = dict(fixed)
        for (_, group), r in zip(groups, combo):
            ranks.update({lab: r for lab in group})
        yield {lab: ranks[lab] for lab in mode_labels(variant)}


def _policy_key(policy: str, budget: int):
    if policy == "closest":
        return lambda count, rs: (abs(count - budget), rs)
    return lambda count, rs: (-count, rs)


def plan_isoparameters(variant: str, dims: ModelDims, lora_rank: int = 4, policy: str = "closest") -> PlanResult:
    """Budget-matched ranks under the size-ordering constraints.

    ``policy`` is ``"closest"`` (minimise ``|count - budget|``) or
    ``"not_exceeding"`` (largest count within budget).  Ties go to the
    lexicographically smaller rank tuple, in mode order.

    The count grows monotonically with the rank of the largest free group
    once the smaller groups are fixed, so that rank is found by bisection and
    only its two neighbours around the budget are compared.
    """
    variant = parse_variant(variant)
    policy = policy.replace("-", "_")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    if variant not in TENSOR_VARIANTS:
        raise ValueError("LoRA takes a single rank; budget matching applies to tensor variants")
    budget = lora_budget(dims, lora_rank)
    labels = mode_labels(variant)
    groups = _free_groups(variant, dims)
    fixed = _fixed_ranks(variant, dims)
    top = _max_rank(dims)
    key = _policy_key(policy, budget)

    best = None
    *lower, (_, last_group) = groups
    for combo in itertools.product(range(1, top + 1), repeat=len(lower)):
        if any(b < a for a, b in zip(combo, combo[1:])):
            continue
        ranks = dict(fixed)
        for (_, group), r in zip(lower, combo):
            ranks.update({lab: r for lab in group})
        floor_r = max(combo, default=1)

        def count_at(x):
            ranks.update({lab: x for lab in last_group})
            return param_count(variant, dims, {lab: ranks[lab] for lab in labels})

        lo, hi = floor_r, top
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if count_at(mid) <= budget:
                lo = mid
            else:
                hi = mid - 1
        xs = {lo, lo + 1}
        for x in sorted(xs):
            if not floor_r <= x <= top:
                continue
            ranks.update({lab: x for lab in last_group})
            plan = {lab: ranks[lab] for lab in labels}
            count = param_count(variant, dims, plan)
            if policy == "not_exceeding" and count > budget:
                continue
            k = key(count, tuple(plan[lab] for lab in labels))
            if best is None or k < best[0]:
                best = (k, plan, count)
    if best is None:
        raise ValueError(f"no rank plan for {variant} fits a budget of {budget}")
    return PlanResult(variant, best[1], best[2], budget)
