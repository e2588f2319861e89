"""Closed-loop kinematic simulation, benchmark suites, and logging.

The simulator advances in exact simulated time: the planner runs every
planner period, the executor every execution period (an integer divisor
of the planner period), and the commanded configuration is applied
directly — the plant is kinematic. Wall-clock durations are recorded
alongside but never influence the simulated trajectory, so a run is
fully determined by (scenario, mode, seed).

Modes:

* ``mc_mppi`` — latent planner followed by the corrective QP executor.
* ``latent_only`` — the decoded planner reference is applied as-is; any
  decoder mismatch lands on the plant unchecked.
* ``vanilla_penalty`` — joint-space MPPI with a soft residual penalty,
  applied as-is.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import AnalyticChart
from .executor import ExecutorState, execute_step
from .kinematics import constraint, load_model, planar_fk_batch
from .planner import SceneSnapshot, plan_step, vanilla_plan_step
from .scenario import ScenarioSpec, randomize

MODES = ("mc_mppi", "latent_only", "vanilla_penalty")


@dataclass
class EpisodeLog:
    scenario: str
    mode: str
    decoder_choice: str
    seed: int
    records: list = field(default_factory=list)
    outcome: dict = field(default_factory=dict)

    def times(self) -> np.ndarray:
        return np.array([r["t"] for r in self.records])

    def h_series(self) -> np.ndarray:
        return np.array([r["h_norm"] for r in self.records])

    def time_avg_h(self) -> float:
        return float(np.mean(self.h_series())) if self.records else 0.0

    def max_h(self) -> float:
        return float(np.max(self.h_series())) if self.records else 0.0

    def convergence_time(self) -> float:
        """Time to success, or +inf for unsuccessful episodes."""
        if self.outcome.get("status") == "success":
            return float(self.outcome["t"])
        return float("inf")

    def mean_jerk(self) -> float:
        """Mean norm of the third difference of the applied configuration
        (per step cubed) — the smoothness metric for the sampling ablation."""
        Q = np.array([r["q"] for r in self.records])
        if Q.shape[0] < 4:
            return 0.0
        jerk = np.diff(Q, n=3, axis=0)
        return float(np.mean(np.linalg.norm(jerk, axis=1)))

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            header = {
                "scenario": self.scenario,
                "mode": self.mode,
                "decoder": self.decoder_choice,
                "seed": self.seed,
                "outcome": self.outcome,
            }
            f.write(json.dumps(header) + "\n")
            for r in self.records:
                f.write(json.dumps(r) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "EpisodeLog":
        with open(path) as f:
            lines = f.read().splitlines()
        header = json.loads(lines[0])
        log = cls(
            scenario=header["scenario"],
            mode=header["mode"],
            decoder_choice=header["decoder"],
            seed=header["seed"],
            outcome=header["outcome"],
        )
        log.records = [json.loads(ln) for ln in lines[1:]]
        return log


def _tray_errors(chart: AnalyticChart, q: np.ndarray, goal: np.ndarray):
    pose = chart.encode(q)
    pos = float(np.hypot(pose[0] - goal[0], pose[1] - goal[1]))
    da = pose[2] - goal[2]
    ori = float(abs(np.arctan2(np.sin(da), np.cos(da))))
    return pose, pos, ori


def _min_clearance(model, q: np.ndarray, centers: np.ndarray, radii: np.ndarray):
    if centers.shape[0] == 0:
        return float("inf")
    fk = planar_fk_batch(model, q[None])
    spheres = fk["spheres"][0]
    sr = fk["sphere_radii"]
    d = np.linalg.norm(spheres[:, None, :] - centers[None], axis=-1)
    return float(np.min(d - sr[:, None] - radii[None]))


def run_episode(
    spec: ScenarioSpec,
    mode: str,
    decoder_choice: str = "analytic",
    decoder=None,
    log_every: int = 1,
) -> EpisodeLog:
    """Simulate one episode and return its log.

    decoder_choice selects the planner's parameterization: "analytic"
    (exact chart, planar only) or "learned" (pass the trained decoder
    via ``decoder``). The baseline mode needs no decoder.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    model = load_model(spec.model)
    chart = AnalyticChart(model)  # simulator ground truth (planar models)
    if mode == "vanilla_penalty":
        decoder = None
    elif decoder_choice == "analytic":
        decoder = chart
    elif decoder_choice == "learned":
        if decoder is None:
            raise ValueError("decoder_choice='learned' needs a decoder object")
    else:
        raise ValueError(f"unknown decoder_choice {decoder_choice!r}")

    planner_cfg = spec.planner_for(mode)
    cost = spec.cost_for(mode)
    dt_exec = spec.executor.dt
    dt_plan = planner_cfg.dt
    steps_per_plan = round(dt_plan / dt_exec)
    if abs(steps_per_plan * dt_exec - dt_plan) > 1e-12 or steps_per_plan < 1:
        raise ValueError("planner period must be an integer multiple of executor period")

    q = chart.decode(spec.start)
    exec_state = ExecutorState.fresh(model, q)
    m = planner_cfg.sigma.shape[0]
    U_nominal = np.zeros((planner_cfg.T, m))
    if mode == "vanilla_penalty":
        state_c = q.copy()
    else:
        state_c = np.asarray(decoder.encode(q), dtype=float)

    log = EpisodeLog(spec.name, mode, decoder_choice, spec.seed)
    n_exec = int(round(spec.max_time / dt_exec))
    q_hat = q.copy()
    plan_ms = 0.0
    exec_ms = 0.0
    iteration = 0
    outcome = None

    for step in range(n_exec + 1):
        t = step * dt_exec
        centers, radii, vels = spec.obstacle_state(t)
        _, pos_err, ori_err = _tray_errors(chart, q, spec.goal)
        h_norm = constraint(model, q).norm()
        clearance = _min_clearance(model, q, centers, radii)

        if step % log_every == 0 or step == n_exec:
            log.records.append(
                {
                    "t": round(t, 9),
                    "q": [float(v) for v in q],
                    "z_star": [float(v) for v in state_c],
                    "q_hat": [float(v) for v in q_hat],
                    "h_norm": h_norm,
                    "tray_err_pos": pos_err,
                    "tray_err_ori": ori_err,
                    "plan_ms": plan_ms,
                    "exec_ms": exec_ms,
                    "fallback": exec_state.fallback_count,
                    "clearance": clearance,
                }
            )

        if pos_err <= spec.success_pos and ori_err <= spec.success_ori:
            outcome = {"status": "success", "t": t}
        elif h_norm > spec.break_limit:
            outcome = {"status": "break", "t": t, "h_norm": h_norm}
        elif clearance < 0.0:
            outcome = {"status": "collision", "t": t}
        elif step == n_exec:
            outcome = {"status": "timeout", "t": t}
        if outcome is not None:
            break

        if step % steps_per_plan == 0:
            scene = SceneSnapshot(
                goal=spec.goal,
                obstacle_centers=centers,
                obstacle_radii=radii,
                obstacle_velocities=vels,
                prediction=spec.prediction,
            )
            if mode == "vanilla_penalty":
                q_hat, U_nominal, diag = vanilla_plan_step(
                    planner_cfg, cost, model, state_c, U_nominal,
                    scene, spec.seed, iteration,
                )
            else:
                q_hat, z_star, U_nominal, diag = plan_step(
                    planner_cfg, cost, model, decoder, state_c, U_nominal,
                    scene, spec.seed, iteration,
                )
                state_c = z_star  # open-loop latent propagation
            plan_ms = diag["wall_ms"]
            iteration += 1

        if mode == "mc_mppi":
            q, report = execute_step(
                spec.executor, model, exec_state, q, q_hat, spec.goal
            )
            exec_ms = report["solve_time"] * 1e3
        else:
            q = np.clip(q_hat, model.q_lb, model.q_ub)
            if mode == "vanilla_penalty":
                state_c = q.copy()
            exec_ms = 0.0

    log.outcome = outcome
    return log


@dataclass
class ExperimentReport:
    scenario: str
    modes: tuple
    trials: int
    seed_base: int
    logs: dict = field(default_factory=dict)  # mode -> [EpisodeLog]
    summary: dict = field(default_factory=dict)

    def recompute(self) -> dict:
        """Aggregate metrics straight from the retained logs (the stored
        summary must always equal this)."""
        out = {}
        for mode, logs in self.logs.items():
            succ = [lg for lg in logs if lg.outcome.get("status") == "success"]
            avg_h = np.array([lg.time_avg_h() for lg in logs])
            conv = [lg.convergence_time() for lg in succ]
            plan_times = np.concatenate(
                [[r["plan_ms"] for r in lg.records] for lg in logs]
            )
            out[mode] = {
                "trials": len(logs),
                "success_rate": len(succ) / len(logs),
                "avg_h_mean": float(avg_h.mean()),
                "avg_h_std": float(avg_h.std()),
                "convergence_times": conv,
                "plan_ms_p50": float(np.percentile(plan_times, 50)),
                "plan_ms_p99": float(np.percentile(plan_times, 99)),
            }
        return out


def run_experiment(
    template: ScenarioSpec,
    modes,
    trials: int,
    seed_base: int,
    decoder=None,
    decoder_choice: str = "analytic",
    log_every: int = 1,
) -> ExperimentReport:
    """Randomized multi-trial suite over a mode matrix with paired seeds:
    trial i uses the same drawn scenario for every mode."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = ExperimentReport(template.name, tuple(modes), trials, seed_base)
    for mode in modes:
        report.logs[mode] = []
    for i in range(trials):
        spec_i = randomize(template, seed_base + i)
        for mode in modes:
            report.logs[mode].append(
                run_episode(spec_i, mode, decoder_choice, decoder, log_every)
            )
    report.summary = report.recompute()
    return report


def compare_sampling_modes(
    spec: ScenarioSpec,
    seeds,
    decoder=None,
    decoder_choice: str = "analytic",
    log_every: int = 1,
) -> dict:
    """Paired-seed ablation of the constant-innovation sampler against
    per-step noise, in mc_mppi mode on the given scenario."""
    from dataclasses import replace as _replace

    out = {"single_instance": [], "per_step": [], "seeds": list(seeds)}
    for seed in seeds:
        for sampling in ("single_instance", "per_step"):
            spec_s = _replace(
                spec,
                seed=seed,
                planner=_replace(spec.planner, sampling_mode=sampling),
            )
            log = run_episode(spec_s, "mc_mppi", decoder_choice, decoder, log_every)
            out[sampling].append(
                {
                    "seed": seed,
                    "status": log.outcome["status"],
                    "convergence_time": log.convergence_time(),
                    "time_avg_h": log.time_avg_h(),
                    "mean_jerk": log.mean_jerk(),
                }
            )
    ratios = [
        p["convergence_time"] / s["convergence_time"]
        for s, p in zip(out["single_instance"], out["per_step"])
    ]
    out["median_time_ratio"] = float(np.median(ratios))
    return out


PLOT_COLUMNS = (
    "t",
    "tray_err_pos",
    "tray_err_ori",
    "h_norm",
    "plan_ms",
    "exec_ms",
    "clearance",
)


def emit_plots(log: EpisodeLog, out_dir) -> list:
    """Write the time-series behind the standard episode plots as one
    CSV per episode; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{log.scenario}_{log.mode}_{log.seed}.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PLOT_COLUMNS)
        for r in log.records:
            writer.writerow([repr(r[c]) for c in PLOT_COLUMNS])
    return [path]
