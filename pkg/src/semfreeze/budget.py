"""Budget plans, infill schedules, and the budgeted training scheduler.

A plan gives each freeze boundary a data quota following geometric (ratio 2)
or arithmetic growth. An infill schedule orders the slots: breadth-first
drains one boundary completely before the next, depth-first hands out one
share per boundary per round. The scheduler walks the slots, matching each
one to the first not-yet-consumed batch whose natural boundary is compatible,
then force-trains the leftovers.

The scheduler is single-threaded over its ledger; deviation profiling of
candidate batches may happen upstream in parallel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .freezing import seft_select_eof
from .model import (
    AdamState,
    FreezeDecision,
    ModelParams,
    apply_update,
    loss_and_gradients,
)

GROWTHS = ("geometric", "arithmetic")
ORDERS = ("breadth_first", "depth_first")


@dataclass(frozen=True)
class BudgetPlan:
    growth: str
    quotas: tuple[int, ...]  # per boundary 0..m-1
    total: int

    def __post_init__(self):
        if self.growth not in GROWTHS:
            raise ValueError(f"unknown growth {self.growth!r}")
        if sum(self.quotas) != self.total:
            raise ValueError("quotas do not add up to the plan total")

    @property
    def layers(self) -> int:
        return len(self.quotas)


@dataclass(frozen=True)
class InfillSchedule:
    order: str
    slots: tuple[int, ...]  # boundary index per slot, in consumption order

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"unknown order {self.order!r}")


@dataclass
class LedgerEntry:
    batch_id: int
    natural_eof: int
    boundary: int
    phase: str  # "slot" or "forced"


@dataclass
class SchedulerLedger:
    """Who trained where: slot assignments, forced leftovers, unfilled slots."""

    m: int
    entries: list[LedgerEntry] = field(default_factory=list)
    unfilled: dict[int, int] = field(default_factory=dict)

    def realized_saving(self) -> float:
        if not self.entries:
            raise ValueError("empty ledger")
        return float(np.mean([e.boundary for e in self.entries])) / self.m

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch_id", "natural_eof", "assigned_boundary", "phase", "cost_units"])
            for e in self.entries:
                w.writerow(
                    [e.batch_id, e.natural_eof, e.boundary, e.phase, (self.m - e.boundary) / self.m]
                )


def make_plan(growth: str, m: int, total: int) -> BudgetPlan:
    """Quotas proportional to the growth sequence over boundaries 0..m-1.

    Geometric weights are 2^k, arithmetic weights k+1. Floor-rounded with the
    residue pushed onto the largest boundaries; the quotas add up exactly.
    Weights use exact integer arithmetic (2^k exceeds machine words fast).
    """
    if growth not in GROWTHS:
        raise ValueError(f"unknown growth {growth!r}")
    if m < 2:
        raise ValueError("need at least 2 layers")
    if total < 1:
        raise ValueError("plan total must be positive")
    weights = [2**k for k in range(m)] if growth == "geometric" else [k + 1 for k in range(m)]
    wsum = sum(weights)
    quotas = [total * w // wsum for w in weights]
    residue = total - sum(quotas)
    for i in range(residue):
        quotas[m - 1 - i] += 1
    return BudgetPlan(growth=growth, quotas=tuple(quotas), total=total)


def expected_saving(plan: BudgetPlan) -> float:
    """Cost saving if every slot fills: sum of quota_k * k/m over the total."""
    m = plan.layers
    return float(sum(q * k for k, q in enumerate(plan.quotas))) / (m * plan.total)


def infill_order(plan: BudgetPlan, order: str) -> InfillSchedule:
    """Slot sequence draining the plan breadth-first or depth-first."""
    if order not in ORDERS:
        raise ValueError(f"unknown order {order!r}")
    m = plan.layers
    slots: list[int] = []
    if order == "breadth_first":
        for b in range(m):
            slots.extend([b] * plan.quotas[b])
    else:
        rounds = max(plan.quotas) if plan.quotas else 0
        for r in range(rounds):
            for b in range(m):
                if plan.quotas[b] > r:
                    slots.append(b)
    return InfillSchedule(order=order, slots=tuple(slots))


def budgeted_training_run(
    params: ModelParams,
    batches,
    plan: BudgetPlan,
    schedule: InfillSchedule,
    profile_fn,
    *,
    loss_kind: str = "standard_ce",
    module_mask: str = "both",
    lr: float = 1e-3,
    bases=None,
    opt_state: AdamState | None = None,
):
    """Walk the slot sequence against an ordered batch list, then force-train
    the leftovers at the last boundary the walk processed.

    batches is a list of (tokens, labels) pairs; profile_fn(params, batch)
    returns the DeviationProfile used for the batch's natural boundary. That
    boundary is computed lazily on first contact and cached, so identical
    loader order and seeds give identical ledgers. A slot with no compatible
    batch (natural boundary above the slot's) is recorded as unfilled and
    skipped, never retried.

    Returns (params, SchedulerLedger, metrics dict).
    """
    m = params.config.layers
    if plan.layers != m:
        raise ValueError("plan built for a different layer count")
    if plan.total > len(batches):
        raise ValueError("plan total exceeds the available batches")
    state = opt_state if opt_state is not None else AdamState()
    ledger = SchedulerLedger(m=m)
    tabu: set[int] = set()
    natural: dict[int, int] = {}

    def natural_eof(batch_id: int) -> int:
        if batch_id not in natural:
            profile = profile_fn(params, batches[batch_id])
            natural[batch_id] = seft_select_eof(profile, m)
        return natural[batch_id]

    def train(batch_id: int, boundary: int, phase: str) -> None:
        tokens, labels = batches[batch_id]
        decision = FreezeDecision(boundary, module_mask)
        _, grads, _ = loss_and_gradients(params, tokens, labels, loss_kind, decision, bases)
        apply_update(params, grads, state, lr)
        tabu.add(batch_id)
        ledger.entries.append(LedgerEntry(batch_id, natural_eof(batch_id), boundary, phase))

    last_boundary = 0
    for b in schedule.slots:
        last_boundary = b
        chosen = None
        for batch_id in range(len(batches)):
            if batch_id in tabu:
                continue
            if natural_eof(batch_id) <= b:
                chosen = batch_id
                break
        if chosen is None:
            ledger.unfilled[b] = ledger.unfilled.get(b, 0) + 1
            continue
        train(chosen, b, "slot")

    forced = 0
    for batch_id in range(len(batches)):
        if batch_id not in tabu:
            train(batch_id, last_boundary, "forced")
            forced += 1

    metrics = {
        "realized_saving": ledger.realized_saving(),
        "slots_filled": len(ledger.entries) - forced,
        "slots_unfilled": sum(ledger.unfilled.values()),
        "forced": forced,
    }
    return params, ledger, metrics
