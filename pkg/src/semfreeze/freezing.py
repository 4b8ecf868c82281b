"""Freeze-boundary selection policies and backprop cost accounting.

Boundary b means blocks 0..b-1 are frozen, so a larger boundary is cheaper.
The deviation-driven policies pick the interior layer with the least
deviation; the cursor policies cycle boundaries; the naive policies are
fixed. Policy state belongs to exactly one scheduler thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import FreezeDecision
from .semantics import (
    CE_TO_LABEL,
    COSINE_TO_ANCHOR,
    COSINE_TO_OUTPUT_BASE,
    DeviationProfile,
)

POLICIES = (
    "naive_full",
    "naive_half",
    "lift_front",
    "lift_reverse",
    "lift_vanilla",
    "seft",
    "seft_half",
    "seft_base_variant",
    "seft_celoss_variant",
)

_PROFILE_POLICIES = frozenset(
    {"seft", "seft_half", "seft_base_variant", "seft_celoss_variant"}
)

_POLICY_MEASURE = {
    "seft": COSINE_TO_ANCHOR,
    "seft_half": COSINE_TO_ANCHOR,
    "seft_base_variant": COSINE_TO_OUTPUT_BASE,
    "seft_celoss_variant": CE_TO_LABEL,
}


def needs_profile(policy: str) -> bool:
    return policy in _PROFILE_POLICIES


def measure_for_policy(policy: str) -> str | None:
    """Deviation measure a policy selects boundaries with, if any."""
    return _POLICY_MEASURE.get(policy)


@dataclass
class PolicyState:
    """Mutable per-run bookkeeping: cursor for the cycling policies, open
    per-boundary quotas for the cost-matched deviation policy."""

    m: int
    cursor: int = 0
    quotas: list[int] | None = None

    @classmethod
    def initial(cls, policy: str, m: int, total_batches: int | None = None):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        if m < 2:
            raise ValueError("need at least 2 layers")
        cursor = m - 1 if policy == "lift_reverse" else 0
        quotas = None
        if policy == "seft_half":
            if total_batches is None or total_batches < 1:
                raise ValueError("seft_half needs the total batch count up front")
            quotas = uniform_quotas(m, total_batches)
        return cls(m=m, cursor=cursor, quotas=quotas)


def uniform_quotas(m: int, total: int) -> list[int]:
    """Equal per-boundary quotas; the division residue goes to the largest
    boundaries so the plan total matches exactly."""
    base = total // m
    residue = total - base * m
    return [base + (1 if b >= m - residue else 0) for b in range(m)]


def seft_select_eof(profile: DeviationProfile | np.ndarray, m: int) -> int:
    """Interior argmin of the deviation profile, ties toward more freezing.

    Layer 0 is excluded (zero by construction) and layer m is excluded as
    terminal, so the result lies in [1, m-1].
    """
    if m < 2:
        raise ValueError("need at least 2 layers")
    d = profile.deviations if isinstance(profile, DeviationProfile) else np.asarray(profile)
    if d.shape[0] != m + 1:
        raise ValueError(f"profile has {d.shape[0]} entries, expected {m + 1}")
    best = 1
    for k in range(2, m):
        if d[k] <= d[best]:
            best = k
    return best


def select_boundary(
    policy: str,
    state: PolicyState,
    profile: DeviationProfile | None,
    m: int,
    module_mask: str = "both",
) -> FreezeDecision:
    """Next freeze decision under a policy; advances the state in place."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if state.m != m:
        raise ValueError("policy state built for a different layer count")
    if needs_profile(policy) and profile is None:
        raise ValueError(f"policy {policy!r} needs a deviation profile")

    if policy == "naive_full":
        return FreezeDecision(0, module_mask)
    if policy == "naive_half":
        return FreezeDecision(m // 2, module_mask)
    if policy in ("lift_front", "lift_vanilla"):
        eof = state.cursor
        state.cursor = (state.cursor + 1) % m
        return FreezeDecision(eof, module_mask, single_block=(policy == "lift_vanilla"))
    if policy == "lift_reverse":
        eof = state.cursor
        state.cursor = (state.cursor - 1) % m
        return FreezeDecision(eof, module_mask)

    natural = seft_select_eof(profile, m)
    if policy != "seft_half":
        return FreezeDecision(natural, module_mask)

    # cost-matched variant: route into the nearest still-open uniform quota,
    # ties toward the larger (cheaper) boundary
    quotas = state.quotas
    if quotas is None:
        raise ValueError("seft_half state missing quotas")
    best = None
    for b in range(m):
        if quotas[b] <= 0:
            continue
        if (
            best is None
            or abs(b - natural) < abs(best - natural)
            or (abs(b - natural) == abs(best - natural) and b > best)
        ):
            best = b
    if best is None:
        return FreezeDecision(natural, module_mask)
    quotas[best] -= 1
    return FreezeDecision(best, module_mask)


def cost_saving(decisions, m: int) -> float:
    """Mean saved backprop fraction, eof/m, over a run's decisions."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("no freeze decisions to average")
    return float(np.mean([d.eof for d in decisions])) / m
