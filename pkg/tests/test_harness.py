"""Tests for the closed-loop simulator, experiment aggregation, and
episode logging."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from mcmppi.codec import AnalyticChart
from mcmppi.executor import ExecutorConfig
from mcmppi.harness import (
    PLOT_COLUMNS,
    EpisodeLog,
    compare_sampling_modes,
    emit_plots,
    run_episode,
    run_experiment,
)
from mcmppi.kinematics import constraint, load_model
from mcmppi.planner import CostWeights, PlannerConfig
from mcmppi.scenario import ScenarioSpec, load_scenario

TIMING_KEYS = ("plan_ms", "exec_ms")


def strip_timing(records):
    """Records minus the wall-clock fields, which legitimately vary
    between otherwise identical runs."""
    return [{k: v for k, v in r.items() if k not in TIMING_KEYS}
            for r in records]


def strip_summary_timing(summary):
    return {
        mode: {k: v for k, v in stats.items() if not k.startswith("plan_ms")}
        for mode, stats in summary.items()
    }


@pytest.fixture(scope="module")
def planar():
    return load_model("planar_dual_3r")


def small_spec(planar, goal=(0.04, 0.35, 0.05), max_time=6.0, **kw):
    """A fast point-to-point scenario for closed-loop unit tests."""
    base = dict(
        name="unit",
        model="planar_dual_3r",
        start=np.array([0.0, 0.35, 0.0]),
        goal=np.asarray(goal, float),
        success_pos=0.01,
        success_ori=0.01,
        break_limit=0.05,
        max_time=max_time,
        seed=0,
        planner=PlannerConfig(K=32, T=10, dt=0.01, lam=0.5,
                              sigma=np.full(3, 0.25), R=np.full(3, 0.1)),
        cost=CostWeights(q_neutral=planar.q_neutral, w_neutral=0.001,
                         vel_limit=0.6),
        executor=ExecutorConfig(alpha=5.0, w_task=1.0, kp_task=2.0, dt=0.005),
    )
    base.update(kw)
    return ScenarioSpec(**base)


class BiasedDecoder:
    """Exact chart with a constant joint-space bias: a stand-in for a
    learned decoder with a fixed, small manifold mismatch."""

    def __init__(self, model, bias=2e-3):
        self.chart = AnalyticChart(model)
        self.latent_dim = 3
        self.bias = bias

    def decode_total(self, Z):
        Q, ok = self.chart.decode_total(Z)
        return Q + self.bias, ok

    def encode(self, q):
        return self.chart.encode(q)


class TestRunEpisode:
    def test_goal_equals_start_immediate_success(self, planar):
        spec = small_spec(planar, goal=(0.0, 0.35, 0.0))
        log = run_episode(spec, "mc_mppi", "analytic")
        assert log.outcome == {"status": "success", "t": 0.0}
        assert len(log.records) == 1
        assert log.convergence_time() == 0.0

    def test_point_to_point_zero_mismatch(self, planar):
        # exact chart end to end on a shortened version of the shipped
        # machine-precision scenario: the episode succeeds and the
        # commanded trajectory never leaves the manifold
        spec = load_scenario("zero_mismatch")
        spec = replace(spec, goal=np.array([0.06, 0.36, 0.02]),
                       planner=replace(spec.planner, K=32, T=10))
        log = run_episode(spec, "mc_mppi", "analytic")
        assert log.outcome["status"] == "success"
        assert log.max_h() < 1e-8

    def test_latent_only_mismatch_exceeds_mc_mppi(self, planar):
        # paired seed, same biased decoder: without the corrective QP the
        # decoder bias lands on the plant unchecked
        spec = small_spec(planar)
        dec = BiasedDecoder(planar)
        a = run_episode(spec, "mc_mppi", "learned", dec)
        b = run_episode(spec, "latent_only", "learned", dec)
        assert b.time_avg_h() > a.time_avg_h()

    def test_latent_only_analytic_succeeds(self, planar):
        spec = small_spec(planar)
        log = run_episode(spec, "latent_only", "analytic")
        assert log.outcome["status"] == "success"

    def test_vanilla_penalty_runs(self, planar):
        spec = small_spec(planar, max_time=1.0)
        log = run_episode(spec, "vanilla_penalty", "analytic")
        assert log.outcome["status"] in ("success", "timeout", "break")
        assert len(log.records) >= 1

    def test_deterministic_given_seed(self, planar):
        spec = small_spec(planar)
        a = run_episode(spec, "mc_mppi", "analytic")
        b = run_episode(spec, "mc_mppi", "analytic")
        assert a.outcome == b.outcome
        assert strip_timing(a.records) == strip_timing(b.records)

    def test_invalid_mode_rejected(self, planar):
        with pytest.raises(ValueError):
            run_episode(small_spec(planar), "bogus")

    def test_learned_requires_decoder(self, planar):
        with pytest.raises(ValueError):
            run_episode(small_spec(planar), "mc_mppi", "learned", None)

    def test_mismatched_periods_rejected(self, planar):
        spec = small_spec(planar, executor=ExecutorConfig(dt=0.003))
        with pytest.raises(ValueError):
            run_episode(spec, "mc_mppi", "analytic")

    def test_records_strictly_increasing_in_t(self, planar):
        log = run_episode(small_spec(planar), "mc_mppi", "analytic")
        t = log.times()
        assert np.all(np.diff(t) > 0.0)

    def test_timeout_outcome(self, planar):
        spec = small_spec(planar, goal=(0.25, 0.3, 0.0), max_time=0.2)
        log = run_episode(spec, "mc_mppi", "analytic")
        assert log.outcome["status"] == "timeout"
        assert log.convergence_time() == float("inf")


class TestEpisodeLog:
    def test_jsonl_roundtrip(self, planar, tmp_path):
        log = run_episode(small_spec(planar), "mc_mppi", "analytic")
        p = tmp_path / "ep.jsonl"
        log.save_jsonl(p)
        back = EpisodeLog.load_jsonl(p)
        assert back.outcome == log.outcome
        assert back.records == log.records
        assert back.mode == log.mode and back.seed == log.seed

    def test_mean_jerk_short_log_zero(self):
        log = EpisodeLog("x", "mc_mppi", "analytic", 0)
        log.records = [{"t": 0.0, "q": [0.0] * 6, "h_norm": 0.0}] * 3
        assert log.mean_jerk() == 0.0

    def test_empty_log_metrics(self):
        log = EpisodeLog("x", "mc_mppi", "analytic", 0)
        assert log.time_avg_h() == 0.0
        assert log.max_h() == 0.0


class TestRunExperiment:
    def test_single_trial_reproduces_run_episode(self, planar):
        spec = small_spec(planar)
        report = run_experiment(spec, ("mc_mppi",), 1, spec.seed)
        solo = run_episode(spec, "mc_mppi", "analytic")
        assert report.logs["mc_mppi"][0].outcome == solo.outcome
        assert strip_timing(report.logs["mc_mppi"][0].records) == strip_timing(
            solo.records
        )

    def test_identical_seed_base_identical_report(self, planar):
        spec = small_spec(planar)
        a = run_experiment(spec, ("mc_mppi",), 2, 10)
        b = run_experiment(spec, ("mc_mppi",), 2, 10)
        assert strip_summary_timing(a.summary) == strip_summary_timing(b.summary)
        for la, lb in zip(a.logs["mc_mppi"], b.logs["mc_mppi"]):
            assert strip_timing(la.records) == strip_timing(lb.records)

    def test_summary_recomputable_from_logs(self, planar):
        spec = small_spec(planar)
        report = run_experiment(spec, ("mc_mppi", "latent_only"), 2, 0)
        assert report.summary == report.recompute()

    def test_paired_trials_share_randomization(self, planar):
        spec = small_spec(planar)
        report = run_experiment(spec, ("mc_mppi", "latent_only"), 2, 0)
        for i in range(2):
            assert (
                report.logs["mc_mppi"][i].seed
                == report.logs["latent_only"][i].seed
            )


class TestCompareSamplingModes:
    def test_obstacle_free_both_modes_succeed(self, planar):
        # control condition: with nothing to avoid, neither sampler stalls
        spec = small_spec(planar)
        out = compare_sampling_modes(spec, [0, 1], None, "analytic")
        for mode in ("single_instance", "per_step"):
            for r in out[mode]:
                assert r["status"] == "success"
        assert np.isfinite(out["median_time_ratio"])

    def test_report_structure(self, planar):
        spec = small_spec(planar)
        out = compare_sampling_modes(spec, [3], None, "analytic")
        assert out["seeds"] == [3]
        for r in out["single_instance"] + out["per_step"]:
            for key in ("seed", "status", "convergence_time", "time_avg_h",
                        "mean_jerk"):
                assert key in r


class TestEmitPlots:
    def test_csv_roundtrip_lossless(self, planar, tmp_path):
        log = run_episode(small_spec(planar), "mc_mppi", "analytic")
        (path,) = emit_plots(log, tmp_path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == PLOT_COLUMNS
        assert len(rows) - 1 == len(log.records)
        for row, rec in zip(rows[1:], log.records):
            for col, cell in zip(PLOT_COLUMNS, row):
                # repr() serialization: eval'ing the cell restores the
                # float exactly
                assert float(cell) == rec[col]

    def test_h_column_rederivable_from_q(self, planar, tmp_path):
        log = run_episode(small_spec(planar), "latent_only", "analytic")
        (path,) = emit_plots(log, tmp_path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        h_idx = PLOT_COLUMNS.index("h_norm")
        for row, rec in zip(rows[1:], log.records):
            want = constraint(planar, np.asarray(rec["q"])).norm()
            assert float(row[h_idx]) == pytest.approx(want, abs=1e-12)
