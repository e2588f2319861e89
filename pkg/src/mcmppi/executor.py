"""Single-step QP execution stage.

The planner hands over a near-feasible reference configuration q_hat.
One small QP in the joint velocities tracks it, regulates the
operational-space task error, decays the (linearized) closure-constraint
violation at rate alpha, and respects the joint position limits through
box bounds on the velocity. The next commanded configuration is the
Euler step q* = q_c + qdot * dt, so the position variables never appear
in the QP.

On an infeasible QP (which the box/equality intersection can produce
near the joint limits) the executor falls back to the previous optimal
configuration rather than aborting the control loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    ChainModel,
    constraint,
    constraint_jacobian,
    task_error,
    task_jacobian,
)
from .qp import QpError, QpProblem, QpSolution, solve_qp


@dataclass(frozen=True)
class ExecutorConfig:
    """Gains and rates for the execution QP.

    alpha is the constraint-decay rate in 1/s: the linearized violation
    shrinks by the factor (1 - alpha*dt) per step. w_task trades
    reference tracking against operational-space error regulation, and
    kp_task converts the task error into the velocity target.
    """

    alpha: float = 5.0
    w_task: float = 1.0
    kp_task: float = 2.0
    dt: float = 0.01
    task_frame: str = "tray_center"
    regularization: float = 1e-9
    velocity_limit: float | None = None  # rad/s box on qdot, if set

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.alpha * self.dt > 1.0:
            raise ValueError("alpha*dt must not exceed 1 (unstable decay)")
        if self.w_task < 0.0:
            raise ValueError("w_task must be nonnegative")
        if self.velocity_limit is not None and self.velocity_limit <= 0.0:
            raise ValueError("velocity_limit must be positive")


@dataclass
class ExecutorState:
    """Mutable per-loop state: last commanded configuration (always kept
    within joint bounds) and the running fallback count. The warm-start
    active set carries the previous cycle's solution structure into the
    next solve."""

    q_prev: np.ndarray
    fallback_count: int = 0
    warm_start: tuple = ()
    bounds_override: tuple | None = None  # (lo, hi) test hook

    @classmethod
    def fresh(cls, model: ChainModel, q0: np.ndarray) -> "ExecutorState":
        q0 = np.asarray(q0, dtype=float)
        if np.any(q0 < model.q_lb) or np.any(q0 > model.q_ub):
            raise ValueError("initial configuration outside joint bounds")
        return cls(q_prev=q0.copy())


def assemble_qp(
    cfg: ExecutorConfig,
    model: ChainModel,
    q_c: np.ndarray,
    q_hat: np.ndarray,
    task_goal,
) -> QpProblem:
    """Build the velocity-space QP about the current configuration q_c.

    min  ||qdot - qdot_ref||^2 + w_task ||J_task qdot - xdot_task||^2
    s.t. J_h qdot = -alpha * h(q_c)
         (q_lb - q_c)/dt <= qdot <= (q_ub - q_c)/dt   [and |qdot| <= v_max]

    with qdot_ref = (q_hat - q_c)/dt and xdot_task = -kp_task * e_task.
    """
    q_c = np.asarray(q_c, dtype=float)
    n = model.joint_count
    qdot_ref = (np.asarray(q_hat, dtype=float) - q_c) / cfg.dt

    H = np.eye(n)
    g = -qdot_ref
    if cfg.w_task > 0.0:
        J_task = task_jacobian(model, q_c, cfg.task_frame)
        e = task_error(model, q_c, task_goal, cfg.task_frame)
        xdot = -cfg.kp_task * e
        H = H + cfg.w_task * J_task.T @ J_task
        g = g - cfg.w_task * J_task.T @ xdot
    H = H + cfg.regularization * np.eye(n)

    h = constraint(model, q_c).h
    J_h = constraint_jacobian(model, q_c)

    lo = (model.q_lb - q_c) / cfg.dt
    hi = (model.q_ub - q_c) / cfg.dt
    if cfg.velocity_limit is not None:
        lo = np.maximum(lo, -cfg.velocity_limit)
        hi = np.minimum(hi, cfg.velocity_limit)
    return QpProblem(H=H, g=g, A_eq=J_h, b_eq=-cfg.alpha * h, lo=lo, hi=hi)


def execute_step(
    cfg: ExecutorConfig,
    model: ChainModel,
    state: ExecutorState,
    q_c: np.ndarray,
    q_hat: np.ndarray,
    task_goal,
) -> tuple:
    """One execution cycle: assemble, solve, Euler-step, fall back on
    failure. Returns (q_star, report) where report is a flat dict ready
    for JSON-lines logging."""
    t0 = time.perf_counter()
    q_c = np.asarray(q_c, dtype=float)
    h_before = constraint(model, q_c).h
    p = assemble_qp(cfg, model, q_c, q_hat, task_goal)
    if state.bounds_override is not None:
        lo, hi = state.bounds_override
        p = QpProblem(p.H, p.g, p.A_eq, p.b_eq, np.asarray(lo, float), np.asarray(hi, float))
    fallback = False
    sol: QpSolution | None = None
    try:
        sol = solve_qp(p, warm_start=state.warm_start)
    except QpError:
        fallback = True
    if fallback:
        q_star = state.q_prev.copy()
        state.fallback_count += 1
        qdot = np.zeros(model.joint_count)
        h_pred = h_before
    else:
        qdot = sol.x
        # clip absorbs the last-ulp rounding of q_c + qdot*dt at a bound
        q_star = np.clip(q_c + qdot * cfg.dt, model.q_lb, model.q_ub)
        state.warm_start = sol.active_set
        # one-step linear prediction: h + J_h qdot dt = (1 - alpha dt) h
        h_pred = h_before + p.A_eq @ qdot * cfg.dt
    h_after = constraint(model, q_star).h
    state.q_prev = q_star.copy()
    e_task = task_error(model, q_star, task_goal, cfg.task_frame)
    report = {
        "t_wall": time.perf_counter(),
        "h_before": float(np.linalg.norm(h_before)),
        "h_after": float(np.linalg.norm(h_after)),
        "h_predicted": float(np.linalg.norm(h_pred)),
        "linearization_gap": float(np.linalg.norm(h_after - h_pred)),
        "task_error": float(np.linalg.norm(e_task)),
        "qdot_norm": float(np.linalg.norm(qdot)),
        "solve_iterations": 0 if fallback else sol.iterations,
        "active_set_size": 0 if fallback else len(sol.active_set),
        "fallback": fallback,
        "solve_time": time.perf_counter() - t0,
    }
    return q_star, report
