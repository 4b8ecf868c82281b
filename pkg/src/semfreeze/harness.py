"""Experiment execution: train a toy model under a freeze policy or a budget
plan, measure held-out accuracy and realized cost saving, and emit per-layer
deviation-distribution data.

Accuracy is greedy argmax next-token equality against the full vocabulary.
Deviation snapshots are taken with the cosine-to-anchor measure before and
after finetuning, so every emitted value lies in [0, 2]. Independent runs may
execute concurrently; each owns its model instance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import budget as budget_mod
from . import freezing
from .model import (
    AdamState,
    DivergenceError,
    ModelConfig,
    ModelParams,
    apply_update,
    batch_traces,
    init_model,
    loss_and_gradients,
    predict_next,
)
from .semantics import COSINE_TO_ANCHOR, DeviationProfile, build_bases, deviation_profile
from .tasks import TaskSpec, generate_dataset, make_batches

DECILES = tuple(range(10, 100, 10))


@dataclass
class RunConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    loss_kind: str = "standard_ce"
    module_mask: str = "both"
    snapshot_items: int = 200


@dataclass
class LayerStat:
    layer: int
    phase: str
    mean: float
    minimum: float
    maximum: float
    deciles: tuple[float, ...]  # p10..p90


@dataclass
class RunReport:
    policy: str
    task: str
    accuracy: float | None
    cost_saving: float
    decisions: int
    diverged: bool = False
    layer_stats: list[LayerStat] = field(default_factory=list)
    scheduler_metrics: dict | None = None
    scheduler_ledger: "budget_mod.SchedulerLedger | None" = None

    def to_json_dict(self) -> dict:
        return {
            "policy": self.policy,
            "task": self.task,
            "accuracy": self.accuracy,
            "cost_saving": self.cost_saving,
            "decisions": self.decisions,
            "diverged": self.diverged,
            "scheduler": self.scheduler_metrics,
            "layer_stats": [
                {
                    "layer": s.layer,
                    "phase": s.phase,
                    "mean": s.mean,
                    "min": s.minimum,
                    "max": s.maximum,
                    **{f"p{q}": v for q, v in zip(DECILES, s.deciles)},
                }
                for s in self.layer_stats
            ],
        }


def layer_statistics(deviations: np.ndarray, phase: str) -> list[LayerStat]:
    """Per-layer mean/min/max/deciles of an (n, m+1) deviation matrix."""
    dev = np.asarray(deviations, dtype=np.float64)
    if dev.ndim != 2 or dev.size == 0:
        raise ValueError("expected a non-empty (records, layers) deviation matrix")
    stats = []
    for k in range(dev.shape[1]):
        col = dev[:, k]
        qs = np.quantile(col, [q / 100 for q in DECILES])
        stats.append(
            LayerStat(
                layer=k,
                phase=phase,
                mean=float(col.mean()),
                minimum=float(col.min()),
                maximum=float(col.max()),
                deciles=tuple(float(x) for x in qs),
            )
        )
    return stats


def emit_violin_data(stats: list[LayerStat], path) -> None:
    """Write per-layer distribution rows as CSV (the violin-plot table)."""
    if not stats:
        raise ValueError("no layer statistics to emit")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "phase", "mean", "min", "max"] + [f"p{q}" for q in DECILES])
        for s in stats:
            w.writerow(
                [s.layer, s.phase, repr(s.mean), repr(s.minimum), repr(s.maximum)]
                + [repr(v) for v in s.deciles]
            )


def _snapshot_deviations(params, bases, tokens, labels, count) -> np.ndarray:
    n = min(count, tokens.shape[0])
    traces = batch_traces(params, tokens[:n], labels[:n])
    return np.stack(
        [deviation_profile(bases, tr, COSINE_TO_ANCHOR).deviations for tr in traces]
    )


def batch_profile(params, bases, tokens, labels, measure) -> DeviationProfile:
    """Batch-level profile: the per-item deviation profiles averaged."""
    traces = batch_traces(params, tokens, labels)
    devs = np.stack([deviation_profile(bases, tr, measure).deviations for tr in traces])
    return DeviationProfile(deviations=devs.mean(axis=0), measure=measure)


def evaluate_accuracy(params, tokens, labels, batch_size: int = 64) -> float:
    hits = 0
    for tb, lb in make_batches(tokens, labels, batch_size):
        hits += int(np.sum(predict_next(params, tb) == lb))
    return hits / tokens.shape[0]


def run_experiment(
    model_config: ModelConfig,
    task: TaskSpec,
    policy: str,
    run: RunConfig | None = None,
    *,
    growth: str | None = None,
    infill: str | None = None,
) -> RunReport:
    """Train under one policy (or one budget plan) and report the outcome.

    With growth set, training goes through the budgeted scheduler using the
    policy's deviation measure for natural boundaries (plan and consumption
    ledger reset every epoch); otherwise select_boundary drives each batch.
    """
    run = run or RunConfig()
    if model_config.vocab < task.vocab:
        raise ValueError("model vocabulary smaller than the task's")
    data = generate_dataset(task)
    batches = make_batches(data.train_tokens, data.train_labels, run.batch_size)
    params = init_model(model_config)
    bases = build_bases(params["embed"], params["head"])
    m = model_config.layers

    before = _snapshot_deviations(
        params, bases, data.test_tokens, data.test_labels, run.snapshot_items
    )

    measure = freezing.measure_for_policy(policy) or COSINE_TO_ANCHOR
    decisions = []
    scheduler_metrics = None
    combined_ledger = None
    diverged = False
    try:
        if growth is not None:
            order = infill or "depth_first"
            combined_ledger = budget_mod.SchedulerLedger(m=m)
            opt = AdamState()
            for _ in range(run.epochs):
                plan = budget_mod.make_plan(growth, m, len(batches))
                schedule = budget_mod.infill_order(plan, order)
                _, ledger, metrics = budget_mod.budgeted_training_run(
                    params,
                    batches,
                    plan,
                    schedule,
                    lambda prm, batch: batch_profile(prm, bases, batch[0], batch[1], measure),
                    loss_kind=run.loss_kind,
                    module_mask=run.module_mask,
                    lr=run.lr,
                    bases=bases,
                    opt_state=opt,
                )
                scheduler_metrics = metrics
                combined_ledger.entries.extend(ledger.entries)
                for b, c in ledger.unfilled.items():
                    combined_ledger.unfilled[b] = combined_ledger.unfilled.get(b, 0) + c
                decisions.extend(
                    freezing.FreezeDecision(e.boundary, run.module_mask)
                    for e in ledger.entries
                )
        else:
            state = freezing.PolicyState.initial(
                policy, m, total_batches=run.epochs * len(batches)
            )
            opt = AdamState()
            for _ in range(run.epochs):
                for tokens, labels in batches:
                    profile = None
                    if freezing.needs_profile(policy):
                        profile = batch_profile(params, bases, tokens, labels, measure)
                    decision = freezing.select_boundary(
                        policy, state, profile, m, run.module_mask
                    )
                    _, grads, _ = loss_and_gradients(
                        params, tokens, labels, run.loss_kind, decision, bases
                    )
                    apply_update(params, grads, opt, run.lr)
                    decisions.append(decision)
    except DivergenceError:
        diverged = True

    report = RunReport(
        policy=policy if growth is None else f"{policy}:{growth}:{infill or 'depth_first'}",
        task=task.kind,
        accuracy=None,
        cost_saving=freezing.cost_saving(decisions, m) if decisions else 0.0,
        decisions=len(decisions),
        diverged=diverged,
        scheduler_metrics=scheduler_metrics,
        scheduler_ledger=combined_ledger,
    )
    report.layer_stats = layer_statistics(before, "before")
    if not diverged:
        report.accuracy = evaluate_accuracy(params, data.test_tokens, data.test_labels)
        after = _snapshot_deviations(
            params, bases, data.test_tokens, data.test_labels, run.snapshot_items
        )
        report.layer_stats += layer_statistics(after, "after")
    return report
