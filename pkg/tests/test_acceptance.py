"""Acceptance suite: one test per shipping criterion, each printing a
pass/fail line. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from semfreeze.budget import budgeted_training_run, expected_saving, infill_order, make_plan
from semfreeze.freezing import PolicyState, cost_saving, seft_select_eof, select_boundary
from semfreeze.harness import RunConfig, run_experiment
from semfreeze.linalg import pseudoinverse
from semfreeze.model import (
    AdamState,
    FreezeDecision,
    ModelConfig,
    apply_update,
    init_model,
    loss_and_gradients,
)
from semfreeze.semantics import (
    COSINE_TO_ANCHOR,
    COSINE_TO_OUTPUT_BASE,
    DeviationProfile,
    SemanticBases,
    TransitionTrace,
    build_bases,
    deviation_profile,
    semantic_anchor,
)
from semfreeze.tasks import TaskSpec
from semfreeze.traceio import (
    MAGIC,
    BadMagicError,
    ShapeMismatchError,
    TraceFile,
    TruncatedFileError,
    UnsupportedVersionError,
    read_trace,
    write_trace,
)


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL", flush=True)
        raise
    print(f"[ACCEPTANCE] {name}: PASS", flush=True)


def random_profile(rng, m):
    d = rng.uniform(0, 2, size=m + 1)
    d[0] = 0.0
    return DeviationProfile(deviations=d)


def test_cost_saving_equalities():
    with criterion("cost-saving equalities (m=32)"):
        m, n = 32, 3200
        rng = np.random.default_rng(0)

        full = [select_boundary("naive_full", PolicyState.initial("naive_full", m), None, m)
                for _ in range(n)]
        assert cost_saving(full, m) == 0.0

        half_state = PolicyState.initial("naive_half", m)
        half = [select_boundary("naive_half", half_state, None, m) for _ in range(n)]
        assert cost_saving(half, m) == 0.5

        lift_state = PolicyState.initial("lift_front", m)
        lift = [select_boundary("lift_front", lift_state, None, m) for _ in range(n)]
        lift_saving = cost_saving(lift, m)
        assert lift_saving == pytest.approx(0.484375, abs=1e-12)
        assert abs(lift_saving - 0.484) <= 1e-3

        seft_state = PolicyState.initial("seft_half", m, total_batches=n)
        seft = [select_boundary("seft_half", seft_state, random_profile(rng, m), m)
                for _ in range(n)]
        seft_saving = cost_saving(seft, m)
        assert seft_saving == pytest.approx(0.484375, abs=1e-12)
        assert abs(seft_saving - 0.484) <= 1e-3


def test_budget_arithmetic():
    with criterion("budget plan arithmetic (m=32)"):
        arith = make_plan("arithmetic", 32, 16896)  # exactly proportional total
        assert arith.quotas == tuple(32 * (k + 1) for k in range(32))
        saving = expected_saving(arith)
        assert saving == pytest.approx(10912 / 16896, abs=1e-12)
        assert abs(saving - 0.644) <= 2e-3

        geom = make_plan("geometric", 32, 2**32 - 1)
        closed_form = (30 * 2**32 + 2) / (32 * (2**32 - 1))
        assert expected_saving(geom) == pytest.approx(closed_form, abs=1e-12)
        assert expected_saving(geom) == pytest.approx(0.9375, abs=1e-9)


def test_semantics_properties():
    with criterion("semantics properties"):
        rng = np.random.default_rng(1)
        bases = SemanticBases(rng.normal(size=(8, 12)), rng.normal(size=(8, 12)))

        # d_0 vanishes on 1,000 random traces whose start is the input base
        for _ in range(1000):
            m = int(rng.integers(2, 9))
            medium, label = int(rng.integers(8)), int(rng.integers(8))
            latents = rng.normal(size=(m + 1, 12))
            latents[0] = bases.input_bases[medium]
            trace = TransitionTrace(medium, label, latents)
            devs = deviation_profile(bases, trace, COSINE_TO_ANCHOR).deviations
            assert devs[0] <= 1e-6
            assert np.all(devs >= 0.0) and np.all(devs <= 2.0)
            out_devs = deviation_profile(bases, trace, COSINE_TO_OUTPUT_BASE).deviations
            assert np.all(out_devs >= 0.0) and np.all(out_devs <= 2.0)

        # anchor endpoints are the bases, interior steps are constant
        for _ in range(100):
            m = int(rng.integers(2, 9))
            medium, label = int(rng.integers(8)), int(rng.integers(8))
            anchors = [semantic_anchor(bases, medium, label, k, m) for k in range(m + 1)]
            assert np.array_equal(anchors[0], bases.input_bases[medium])
            assert np.array_equal(anchors[m], bases.output_bases[label])
            step = anchors[1] - anchors[0]
            for k in range(2, m + 1):
                assert np.allclose(anchors[k] - anchors[k - 1], step, atol=1e-9)

        # Penrose conditions up to 64x64
        for shape in [(8, 8), (33, 17), (17, 33), (64, 64), (64, 48), (48, 64)]:
            a = rng.normal(size=shape)
            p = pseudoinverse(a)
            assert np.linalg.norm(a @ p @ a - a) / np.linalg.norm(a) <= 1e-4
            assert np.linalg.norm(p @ a @ p - p) / np.linalg.norm(p) <= 1e-4
            assert np.linalg.norm((a @ p).T - a @ p) / max(np.linalg.norm(a @ p), 1e-300) <= 1e-4
            assert np.linalg.norm((p @ a).T - p @ a) / max(np.linalg.norm(p @ a), 1e-300) <= 1e-4


def test_gradient_oracle():
    with criterion("gradient finite-difference oracle (2 layers, all losses)"):
        start = time.monotonic()
        cfg = ModelConfig(layers=2, dim=16, heads=2, vocab=16, context_len=8, seed=5)
        params = init_model(cfg)
        bases = build_bases(params["embed"], params["head"])
        rng = np.random.default_rng(5)
        tokens = rng.integers(0, 16, (2, 4))
        labels = rng.integers(0, 16, 2)
        freeze = FreezeDecision(0)
        eps = 1e-4

        for kind in ("standard_ce", "semantic_ce", "semantic_cos"):
            _, grads, _ = loss_and_gradients(params, tokens, labels, kind, freeze, bases)
            assert set(grads) == set(params.tensors)
            for name in sorted(grads):
                flat = params.tensors[name].reshape(-1)
                gflat = grads[name].reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    lp, _, _ = loss_and_gradients(params, tokens, labels, kind, freeze, bases)
                    flat[i] = orig - eps
                    lm, _, _ = loss_and_gradients(params, tokens, labels, kind, freeze, bases)
                    flat[i] = orig
                    fd = (lp - lm) / (2 * eps)
                    denom = max(abs(fd), abs(gflat[i]), 1e-8)
                    assert abs(fd - gflat[i]) / denom <= 1e-3, (kind, name, i)
        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"gradient oracle took {elapsed:.1f}s"


def reference_adam_step(tensors, grads, moments, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    # textbook recurrence, independent of the package optimizer
    for name, g in grads.items():
        m, v, t = moments.get(name, (0.0, 0.0, 0))
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        moments[name] = (m, v, t)
        tensors[name] = tensors[name] - lr * (m / (1 - b1**t)) / (
            np.sqrt(v / (1 - b2**t)) + eps
        )


def test_freezing_soundness():
    with criterion("freezing soundness (m=4, 100 steps per boundary)"):
        cfg = ModelConfig(layers=4, dim=16, heads=2, vocab=16, context_len=8, seed=6)
        rng = np.random.default_rng(6)
        steps = [(rng.integers(0, 16, (2, 5)), rng.integers(0, 16, 2)) for _ in range(100)]

        for eof in range(4):
            params = init_model(cfg)
            frozen = [n for n in params.tensors
                      if n.startswith(tuple(f"block{i}." for i in range(eof)))]
            if eof > 0:
                frozen.append("embed")
            before = {n: params.tensors[n].copy() for n in frozen}
            state = AdamState()
            for tokens, labels in steps:
                _, grads, _ = loss_and_gradients(
                    params, tokens, labels, "standard_ce", FreezeDecision(eof)
                )
                apply_update(params, grads, state, lr=1e-2)
            for n in frozen:
                assert np.array_equal(params.tensors[n], before[n]), (eof, n)

        # a step with eof=0 equals a freezing-free reference update
        params = init_model(cfg)
        reference = {n: v.copy() for n, v in params.tensors.items()}
        moments = {}
        state = AdamState()
        for tokens, labels in steps[:20]:
            _, grads, _ = loss_and_gradients(
                params, tokens, labels, "standard_ce", FreezeDecision(0)
            )
            assert set(grads) == set(params.tensors)
            reference_adam_step(reference, {n: g.copy() for n, g in grads.items()}, moments)
            apply_update(params, grads, state)
        for n, v in params.tensors.items():
            assert np.max(np.abs(v - reference[n])) <= 1e-12, n


def brute_force_schedule(eofs, slots):
    taken, assignments, unfilled, last = set(), [], {}, 0
    for b in slots:
        last = b
        pick = next((i for i, e in enumerate(eofs) if i not in taken and e <= b), None)
        if pick is None:
            unfilled[b] = unfilled.get(b, 0) + 1
        else:
            taken.add(pick)
            assignments.append((pick, b, "slot"))
    for i in range(len(eofs)):
        if i not in taken:
            assignments.append((i, last, "forced"))
    return assignments, unfilled


def test_scheduler_oracle():
    with criterion("budgeted scheduler vs brute-force oracle"):
        for m in (4, 8):
            cfg = ModelConfig(layers=m, dim=16, heads=2, vocab=16, context_len=8, seed=7)
            rng = np.random.default_rng(m)
            eof_sets = [
                [int(rng.integers(1, m)) for _ in range(13)],
                [m - 1] * 13,
                [1] * 13,
            ]
            for eofs in eof_sets:
                batches = [
                    (rng.integers(0, 16, (2, 4)), rng.integers(0, 16, 2))
                    for _ in range(len(eofs))
                ]
                ids = {id(b[0]): i for i, b in enumerate(batches)}

                def profile_fn(prm, batch):
                    d = np.ones(m + 1)
                    d[0] = 0.0
                    d[eofs[ids[id(batch[0])]]] = 0.01
                    return DeviationProfile(deviations=d)

                for growth in ("geometric", "arithmetic"):
                    for order in ("breadth_first", "depth_first"):
                        plan = make_plan(growth, m, len(eofs))
                        schedule = infill_order(plan, order)
                        params = init_model(cfg)
                        _, ledger, metrics = budgeted_training_run(
                            params, batches, plan, schedule, profile_fn
                        )
                        want_assign, want_unfilled = brute_force_schedule(eofs, schedule.slots)
                        got = [(e.batch_id, e.boundary, e.phase) for e in ledger.entries]
                        assert got == want_assign, (m, growth, order)
                        assert ledger.unfilled == want_unfilled
                        want_saving = np.mean([b for _, b, _ in want_assign]) / m
                        assert metrics["realized_saving"] == pytest.approx(
                            want_saving, abs=1e-12
                        )


def test_end_to_end_sanity():
    with criterion("end-to-end: seft_half vs naive_half on the trigger task"):
        start = time.monotonic()
        naive, seft = [], []
        for seed in range(5):
            cfg = ModelConfig(layers=8, dim=64, heads=4, vocab=64, context_len=16, seed=seed)
            task = TaskSpec(kind="trigger_token", classes=6, seq_len=16, vocab=64,
                            train_n=2048, test_n=256, seed=seed)
            run = RunConfig(epochs=3, batch_size=32, lr=3e-3, snapshot_items=64)
            rep_n = run_experiment(cfg, task, "naive_half", run)
            rep_s = run_experiment(cfg, task, "seft_half", run)
            assert not rep_n.diverged and not rep_s.diverged
            assert rep_s.cost_saving >= 0.40
            naive.append(rep_n.accuracy)
            seft.append(rep_s.accuracy)
        elapsed = time.monotonic() - start
        print(f"  naive_half mean acc {np.mean(naive):.4f}, "
              f"seft_half mean acc {np.mean(seft):.4f}, {elapsed:.0f}s", flush=True)
        assert np.mean(seft) >= np.mean(naive) - 0.02
        assert elapsed <= 600.0


def test_trace_format():
    with criterion("trace container round trip and corruption classes"):
        rng = np.random.default_rng(8)
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            # randomized round trips are byte-exact
            for i in range(8):
                n, m, d, v = (int(rng.integers(0, 6)), int(rng.integers(2, 5)),
                              int(rng.integers(2, 6)), int(rng.integers(2, 7)))
                trace = TraceFile(
                    model=f"rt{i}", layers=m, dim=d, vocab=v,
                    tokens=rng.integers(0, v, n).astype("<u4"),
                    labels=rng.integers(0, v, n).astype("<u4"),
                    latents=rng.normal(size=(n, m + 1, d)).astype("<f4"),
                    w_in=rng.normal(size=(v, d)).astype("<f4") if i % 2 else None,
                    w_out_pinv=rng.normal(size=(v, d)).astype("<f4") if i % 3 else None,
                )
                p1, p2 = tmp / f"a{i}", tmp / f"b{i}"
                write_trace(p1, trace)
                write_trace(p2, read_trace(p1))
                assert p1.read_bytes() == p2.read_bytes()

            base = tmp / "valid"
            write_trace(base, TraceFile(
                model="v", layers=3, dim=4, vocab=5,
                tokens=rng.integers(0, 5, 4).astype("<u4"),
                labels=rng.integers(0, 5, 4).astype("<u4"),
                latents=rng.normal(size=(4, 4, 4)).astype("<f4"),
                w_in=rng.normal(size=(5, 4)).astype("<f4"),
                w_out_pinv=rng.normal(size=(5, 4)).astype("<f4"),
            ))
            raw = bytearray(base.read_bytes())

            def corrupt(data):
                p = tmp / "corrupt"
                p.write_bytes(bytes(data))
                return p

            bad_magic = raw.copy(); bad_magic[0] ^= 0xFF
            with pytest.raises(BadMagicError):
                read_trace(corrupt(bad_magic))

            hlen = int.from_bytes(raw[8:16], "little")
            header = json.loads(bytes(raw[16 : 16 + hlen]))
            header["version"] = 9
            blob = json.dumps(header, separators=(",", ":")).encode()
            with pytest.raises(UnsupportedVersionError):
                read_trace(corrupt(MAGIC + len(blob).to_bytes(8, "little")
                                   + blob + bytes(raw[16 + hlen:])))

            with pytest.raises(TruncatedFileError):
                read_trace(corrupt(raw[:4]))
            with pytest.raises(TruncatedFileError):
                read_trace(corrupt(raw[:-2]))
            with pytest.raises(ShapeMismatchError):
                read_trace(corrupt(raw + b"?"))
