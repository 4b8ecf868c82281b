import json

import numpy as np
import pytest

from semfreeze.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from semfreeze.semantics import SemanticBases, semantic_anchor
from semfreeze.traceio import TraceFile, write_trace

TRAIN_FAST = [
    "train", "--task", "trigger_token", "--classes", "4",
    "--layers", "4", "--dim", "32", "--heads", "4", "--vocab", "32",
    "--seq-len", "12", "--train-n", "96", "--test-n", "48",
    "--epochs", "1", "--batch-size", "32", "--seed", "3",
]


def run_main(args):
    return main([str(a) for a in args])


def make_trace_file(path, n=8, m=4, d=6, v=5, seed=0):
    rng = np.random.default_rng(seed)
    trace = TraceFile(
        model="clitest", layers=m, dim=d, vocab=v,
        tokens=rng.integers(0, v, n).astype("<u4"),
        labels=rng.integers(0, v, n).astype("<u4"),
        latents=rng.normal(size=(n, m + 1, d)).astype("<f4"),
        w_in=rng.normal(size=(v, d)).astype("<f4"),
        w_out_pinv=rng.normal(size=(v, d)).astype("<f4"),
    )
    write_trace(path, trace)
    return trace


class TestTrain:
    def test_naive_full_reports_zero_saving(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = run_main(TRAIN_FAST + ["--policy", "naive_full", "--out", out])
        assert code == EXIT_OK
        rep = json.loads((out / "report.json").read_text())
        assert rep["cost_saving"] == 0.0
        assert (out / "manifest.json").exists()
        assert (out / "report.csv").exists()
        assert (out / "violin.csv").exists()

    def test_bogus_policy_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_main(TRAIN_FAST + ["--policy", "bogus", "--out", tmp_path / "x"])
        assert exc.value.code == EXIT_USAGE

    def test_identical_invocations_are_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_main(TRAIN_FAST + ["--policy", "seft_half", "--out", out1]) == EXIT_OK
        assert run_main(TRAIN_FAST + ["--policy", "seft_half", "--out", out2]) == EXIT_OK
        for name in ("report.json", "report.csv", "violin.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"policy": "naive_half", "epochs": 1, "task": "trigger_token",
                                   "classes": 4, "layers": 4, "dim": 32, "heads": 4,
                                   "vocab": 32, "seq_len": 12, "train_n": 96, "test_n": 48,
                                   "batch_size": 32, "seed": 3}))
        out = tmp_path / "run"
        code = run_main(["train", "--config", cfg, "--policy", "naive_full", "--out", out])
        assert code == EXIT_OK
        rep = json.loads((out / "report.json").read_text())
        assert rep["policy"] == "naive_full"  # flag beats file
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 1  # file value survives

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"no_such_flag": 1}))
        assert run_main(["train", "--config", cfg, "--out", tmp_path / "x"]) == EXIT_USAGE

    def test_budget_flags_write_scheduler_outputs(self, tmp_path):
        out = tmp_path / "run"
        code = run_main(TRAIN_FAST + ["--policy", "seft", "--growth", "arithmetic",
                                      "--infill", "depth_first", "--out", out])
        assert code == EXIT_OK
        rep = json.loads((out / "report.json").read_text())
        assert rep["scheduler"] is not None
        ledger = (out / "schedule_ledger.csv").read_text().strip().splitlines()
        assert ledger[0] == "batch_id,natural_eof,assigned_boundary,phase,cost_units"
        assert len(ledger) == 1 + rep["decisions"]

    def test_budget_needs_seft_policy(self, tmp_path):
        code = run_main(TRAIN_FAST + ["--policy", "naive_half", "--growth", "geometric",
                                      "--out", tmp_path / "x"])
        assert code == EXIT_USAGE


class TestAnalyzeTrace:
    def test_valid_trace_outputs(self, tmp_path, capsys):
        trace_path = tmp_path / "t.trc"
        make_trace_file(trace_path, n=8, m=4)
        out = tmp_path / "analysis"
        assert run_main(["analyze-trace", "--trace", trace_path, "--out", out]) == EXIT_OK
        violin = (out / "violin.csv").read_text().strip().splitlines()
        assert len(violin) == 1 + 5  # header plus m+1 rows for the single phase
        hist = (out / "histogram.csv").read_text().strip().splitlines()
        assert len(hist) == 1 + 4  # boundaries 0..m-1
        summary = json.loads((out / "summary.json").read_text())
        assert 0.0 <= summary["expected_saving"] <= 1.0
        assert (out / "deviations.csv").exists()
        assert (out / "plans.csv").exists()

    def test_missing_file_is_data_error(self, tmp_path):
        code = run_main(["analyze-trace", "--trace", tmp_path / "absent.trc",
                         "--out", tmp_path / "x"])
        assert code == EXIT_DATA

    def test_corrupt_trace_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.trc"
        bad.write_bytes(b"NOTATRACE-------")
        assert run_main(["analyze-trace", "--trace", bad, "--out", tmp_path / "x"]) == EXIT_DATA

    def test_perfect_route_recommends_max_saving(self, tmp_path):
        v, d, m = 5, 6, 4
        in_b = np.zeros((v, d)); in_b[:, 0] = np.arange(1.0, v + 1.0)
        out_b = np.zeros((v, d)); out_b[:, 0] = np.arange(1.0, v + 1.0)[::-1]
        bases = SemanticBases(in_b, out_b)
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, v, 6)
        labels = rng.integers(0, v, 6)
        latents = np.empty((6, m + 1, d), dtype="<f4")
        for i in range(6):
            for k in range(m + 1):
                latents[i, k] = semantic_anchor(bases, int(tokens[i]), int(labels[i]), k, m)
        path = tmp_path / "perfect.trc"
        write_trace(path, TraceFile(
            model="perfect", layers=m, dim=d, vocab=v,
            tokens=tokens.astype("<u4"), labels=labels.astype("<u4"), latents=latents,
            w_in=in_b.astype("<f4"), w_out_pinv=out_b.astype("<f4"),
        ))
        out = tmp_path / "analysis"
        assert run_main(["analyze-trace", "--trace", path, "--out", out]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["expected_saving"] == pytest.approx((m - 1) / m, abs=1e-12)


class TestPlanBudget:
    def test_geometric_quotas_printed(self, capsys):
        assert run_main(["plan-budget", "--growth", "geometric",
                         "--layers", "4", "--batches", "15"]) == EXIT_OK
        out = capsys.readouterr().out
        lines = [l.split() for l in out.splitlines() if l.strip() and l.strip()[0].isdigit()]
        assert [int(x[1]) for x in lines[:4]] == [1, 2, 4, 8]

    def test_arithmetic_expected_saving(self, capsys):
        assert run_main(["plan-budget", "--growth", "arithmetic",
                         "--layers", "32", "--batches", "16896"]) == EXIT_OK
        out = capsys.readouterr().out
        line = next(l for l in out.splitlines() if l.startswith("expected_saving="))
        assert float(line.split("=")[1]) == pytest.approx(10912 / 16896, abs=2e-3)

    def test_smallest_model_splits_one_to_two(self, capsys):
        assert run_main(["plan-budget", "--growth", "arithmetic",
                         "--layers", "2", "--batches", "9"]) == EXIT_OK
        out = capsys.readouterr().out
        lines = [l.split() for l in out.splitlines() if l.strip() and l.strip()[0].isdigit()]
        assert [int(x[1]) for x in lines[:2]] == [3, 6]

    def test_bad_growth_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_main(["plan-budget", "--growth", "cubic", "--layers", "4", "--batches", "8"])
        assert exc.value.code == EXIT_USAGE


class TestReport:
    def test_renders_figures_for_run_dir(self, tmp_path):
        out = tmp_path / "run"
        assert run_main(TRAIN_FAST + ["--policy", "naive_half", "--out", out]) == EXIT_OK
        assert run_main(["report", "--run", out]) == EXIT_OK
        assert (out / "deviations.png").exists()
        assert (out / "summary.png").exists()

    def test_renders_analysis_dir(self, tmp_path):
        trace_path = tmp_path / "t.trc"
        make_trace_file(trace_path)
        out = tmp_path / "analysis"
        assert run_main(["analyze-trace", "--trace", trace_path, "--out", out]) == EXIT_OK
        assert run_main(["report", "--run", out]) == EXIT_OK
        for name in ("deviations.png", "histogram.png", "quotas.png"):
            assert (out / name).exists(), name

    def test_missing_dir_is_data_error(self, tmp_path):
        assert run_main(["report", "--run", tmp_path / "absent"]) == EXIT_DATA
