"""Sampling-based MPC over the latent manifold parameterization.

Two planners share one rollout/cost core:

* ``plan_step`` — MPPI in the latent coordinates z. Controls are latent
  velocities; states integrate by explicit Euler and each latent point
  is decoded to a joint configuration for costing. With single-instance
  sampling, one noise draw per sample is held constant across the
  horizon, which explores whole-trajectory directions instead of
  per-step jitter.
* ``vanilla_plan_step`` — the joint-space baseline: identical machinery
  with q as the state and a quadratic penalty on the closure residual
  added to the stage cost.

All randomness flows through counter-based per-sample streams keyed by
(seed, iteration, k), so results do not depend on how rollouts are
scheduled across workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kinematics import ChainModel, planar_constraint_batch, planar_fk_batch

SAMPLING_MODES = ("single_instance", "per_step")
SPACE_MODES = ("latent", "joint_penalty")


@dataclass(frozen=True)
class PlannerConfig:
    """Sampler geometry and MPPI temperature.

    sigma is the per-dimension noise standard deviation (the diagonal
    of the sampling covariance, in latent or joint velocity units); R is
    the diagonal of the quadratic control-effort weight.
    """

    K: int = 200
    T: int = 30
    dt: float = 0.01
    lam: float = 1.0
    sigma: np.ndarray = field(default_factory=lambda: np.full(3, 0.3))
    R: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))
    sampling_mode: str = "single_instance"
    space_mode: str = "latent"
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.atleast_1d(np.asarray(self.sigma, float)))
        object.__setattr__(self, "R", np.atleast_1d(np.asarray(self.R, float)))
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be at least 1")
        if self.dt <= 0.0 or self.lam <= 0.0:
            raise ValueError("dt and lam must be positive")
        if np.any(self.sigma < 0.0) or np.any(self.R < 0.0):
            raise ValueError("sigma and R must be nonnegative")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.space_mode not in SPACE_MODES:
            raise ValueError(f"space_mode must be one of {SPACE_MODES}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")


@dataclass(frozen=True)
class CostWeights:
    """Weights of the five stage-cost terms plus the baseline's residual
    penalty (w_h, unused in latent mode)."""

    w_track: float = 10.0
    w_coll: float = 100.0
    w_limit: float = 100.0
    w_neutral: float = 0.01
    w_h: float = 0.0
    q_neutral: np.ndarray = field(default_factory=lambda: np.zeros(0))
    margin: float = 0.02
    vel_limit: float = 1.0  # on ||u||, latent or joint units/s
    terminal_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(
            self, "q_neutral", np.asarray(self.q_neutral, dtype=float)
        )
        for name in ("w_track", "w_coll", "w_limit", "w_neutral", "w_h"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class SceneSnapshot:
    """The planner's view of the world at one planning instant."""

    goal: np.ndarray  # tray pose goal (x, y, theta)
    obstacle_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    obstacle_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    obstacle_velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    prediction: str = "frozen"  # or "extrapolated" within the horizon

    def horizon_centers(self, T: int, dt: float) -> np.ndarray:
        """Obstacle centers at each horizon step, shape (T, n_obs, 2)."""
        c = np.broadcast_to(self.obstacle_centers, (T,) + self.obstacle_centers.shape)
        if self.prediction == "frozen" or self.obstacle_centers.shape[0] == 0:
            return np.ascontiguousarray(c)
        t = (np.arange(1, T + 1) * dt)[:, None, None]
        return self.obstacle_centers[None] + t * self.obstacle_velocities[None]


@dataclass
class RolloutResult:
    latent: np.ndarray  # (T, m) trajectory z_1..z_T
    joints: np.ndarray  # (T, n) decoded configurations
    cost: float
    breakdown: dict


def sample_perturbations(
    cfg: PlannerConfig, seed: int, k: int, iteration: int = 0
) -> np.ndarray:
    """Noise sequence (T, m) for sample k from its own counter-based
    stream, so the draw is identical however rollouts are scheduled."""
    if not 0 <= k < cfg.K:
        raise ValueError("sample index out of range")
    m = cfg.sigma.shape[0]
    # 128-bit stream key: seed in the high word, (iteration, k) packed low
    key = np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, ((iteration & 0xFFFFFFFF) << 32) | (k & 0xFFFFFFFF)],
        dtype=np.uint64,
    )
    gen = np.random.Generator(np.random.Philox(key=key))
    if cfg.sampling_mode == "single_instance":
        du = gen.normal(size=m) * cfg.sigma
        return np.broadcast_to(du, (cfg.T, m)).copy()
    return gen.normal(size=(cfg.T, m)) * cfg.sigma


def importance_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """Soft-min weights over sample costs; the minimum is subtracted
    before exponentiation, which cancels in the normalization and keeps
    exp() in range."""
    costs = np.asarray(costs, dtype=float)
    w = np.exp(-(costs - costs.min()) / lam)
    return w / w.sum()


def _hinge(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _stage_costs(
    weights: CostWeights,
    model: ChainModel,
    cfg: PlannerConfig,
    Q: np.ndarray,  # (K, T, n)
    U: np.ndarray,  # (K, T, m) applied (perturbed) controls
    ok: np.ndarray,  # (K, T) decode-reachability mask
    obstacles: np.ndarray,  # (T, n_obs, 2)
    obstacle_radii: np.ndarray,
    goal: np.ndarray,
    penalize_residual: bool,
) -> dict:
    """Vectorized per-step cost terms, each of shape (K, T)."""
    K, T, n = Q.shape
    flat = Q.reshape(K * T, n)
    fk = planar_fk_batch(model, flat)

    tray = fk["tray"].reshape(K, T, 3)
    dx = tray[..., 0] - goal[0]
    dy = tray[..., 1] - goal[1]
    da = tray[..., 2] - goal[2]
    da = np.arctan2(np.sin(da), np.cos(da))
    track = weights.w_track * (dx * dx + dy * dy + da * da)

    spheres = fk["spheres"].reshape(K, T, -1, 2)
    radii = fk["sphere_radii"]
    if obstacles.shape[1]:
        d = spheres[:, :, :, None, :] - obstacles[None, :, None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        pen = _hinge(weights.margin + radii[:, None] + obstacle_radii - dist)
        coll = weights.w_coll * np.sum(pen * pen, axis=(2, 3))
    else:
        coll = np.zeros((K, T))
    # arm-arm self collision: left-arm spheres against right-arm spheres
    c0, c1 = fk["arm_sphere_count"]
    left, right = spheres[:, :, :c0], spheres[:, :, c0 : c0 + c1]
    d = left[:, :, :, None, :] - right[:, :, None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=-1))
    pen = _hinge(weights.margin + radii[:c0, None] + radii[c0 : c0 + c1] - dist)
    coll = coll + weights.w_coll * np.sum(pen * pen, axis=(2, 3))

    reg = 0.5 * np.sum(cfg.R * U * U, axis=-1)

    over = _hinge(Q - model.q_ub)
    under = _hinge(model.q_lb - Q)
    speed = np.sqrt(np.sum(U * U, axis=-1))
    vel_over = _hinge(speed - weights.vel_limit)
    limit = weights.w_limit * (
        np.sum(over * over + under * under, axis=-1)
        + vel_over * vel_over
        + (~ok).astype(float)  # unreachable decode: flat penalty
    )

    if weights.q_neutral.size:
        dq = Q - weights.q_neutral
        neutral = weights.w_neutral * np.sum(dq * dq, axis=-1)
    else:
        neutral = np.zeros((K, T))

    out = {"track": track, "coll": coll, "reg": reg, "limit": limit, "neutral": neutral}
    if penalize_residual:
        h = planar_constraint_batch(model, flat).reshape(K, T, -1)
        out["limit"] = out["limit"] + weights.w_h * np.sum(h * h, axis=-1)
    # terminal cost: the tracking term at the horizon end, upweighted
    out["track"][:, -1] *= 1.0 + weights.terminal_scale
    return out


def evaluate_cost(
    weights: CostWeights,
    model: ChainModel,
    cfg: PlannerConfig,
    q: np.ndarray,
    u: np.ndarray,
    scene: SceneSnapshot,
    reachable: bool = True,
    penalize_residual: bool = False,
) -> dict:
    """Single-step cost breakdown (scalars); the batched rollout path
    evaluates exactly this expression over (K, T) grids."""
    terms = _stage_costs(
        weights,
        model,
        cfg,
        np.asarray(q, float)[None, None],
        np.asarray(u, float)[None, None],
        np.array([[reachable]]),
        scene.obstacle_centers[None],
        scene.obstacle_radii,
        scene.goal,
        penalize_residual,
    )
    # undo the terminal upweighting: a lone step is a stage, not the horizon end
    terms["track"][:, -1] /= 1.0 + weights.terminal_scale
    return {name: float(v[0, 0]) for name, v in terms.items()}


def _rollout_states(z_c: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """Euler integration z_{t+1} = z_t + u_t dt, batched (K, T, m)."""
    return z_c + dt * np.cumsum(U, axis=1)


def rollout(
    cfg: PlannerConfig,
    weights: CostWeights,
    model: ChainModel,
    decoder,
    z_c: np.ndarray,
    U: np.ndarray,
    perturbation: np.ndarray,
    scene: SceneSnapshot,
) -> RolloutResult:
    """One sample's trajectory and cost (the K=1 slice of the batched
    planner, so it is bit-identical to plan_step's internal rollouts)."""
    U_applied = (np.asarray(U, float) + np.asarray(perturbation, float))[None]
    Z = _rollout_states(np.asarray(z_c, float), U_applied, cfg.dt)
    Q, ok = decoder.decode_total(Z.reshape(cfg.T, -1))
    terms = _stage_costs(
        weights,
        model,
        cfg,
        Q[None],
        U_applied,
        ok[None],
        scene.horizon_centers(cfg.T, cfg.dt),
        scene.obstacle_radii,
        scene.goal,
        cfg.space_mode == "joint_penalty",
    )
    breakdown = {name: float(np.sum(v)) for name, v in terms.items()}
    return RolloutResult(
        latent=Z[0],
        joints=Q,
        cost=float(np.sum(sum(terms.values()))),
        breakdown=breakdown,
    )


def _batched_costs(cfg, weights, model, decoder, z_c, U_all, scene, penalize):
    """Decode and cost all K rollouts; returns per-sample totals (K,)."""
    K, T, m = U_all.shape
    Z = _rollout_states(z_c, U_all, cfg.dt)

    def eval_chunk(sl):
        Q, ok = decoder.decode_total(Z[sl].reshape(-1, m))
        terms = _stage_costs(
            weights,
            model,
            cfg,
            Q.reshape(-1, T, Q.shape[-1]),
            U_all[sl],
            ok.reshape(-1, T),
            scene.horizon_centers(T, cfg.dt),
            scene.obstacle_radii,
            scene.goal,
            penalize,
        )
        return np.sum(sum(terms.values()), axis=1)

    S = np.empty(K)
    if cfg.threads == 1 or K < 2 * cfg.threads:
        S[:] = eval_chunk(slice(0, K))
        return S
    edges = np.linspace(0, K, cfg.threads + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for sl, chunk in zip(slices, pool.map(eval_chunk, slices)):
            S[sl] = chunk
    return S


def _plan(cfg, weights, model, decoder, state_c, U_nominal, scene, seed, iteration):
    t0 = time.perf_counter()
    m = cfg.sigma.shape[0]
    U_nominal = np.asarray(U_nominal, dtype=float)
    if U_nominal.shape != (cfg.T, m):
        raise ValueError("nominal control sequence shape mismatch")
    E = np.stack(
        [sample_perturbations(cfg, seed, k, iteration) for k in range(cfg.K)]
    )
    U_all = U_nominal + E
    penalize = cfg.space_mode == "joint_penalty"
    S = _batched_costs(cfg, weights, model, decoder, state_c, U_all, scene, penalize)
    w = importance_weights(S, cfg.lam)
    U_star = np.einsum("k,ktm->tm", w, U_all)
    state_star = state_c + U_star[0] * cfg.dt
    U_shifted = np.vstack([U_star[1:], np.zeros((1, m))])
    diag = {
        "iteration": iteration,
        "min_cost": float(S.min()),
        "mean_cost": float(S.mean()),
        "ess": float(1.0 / np.sum(w * w)),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    return state_star, U_star, U_shifted, diag


def plan_step(
    cfg: PlannerConfig,
    weights: CostWeights,
    model: ChainModel,
    decoder,
    z_c: np.ndarray,
    U_nominal: np.ndarray,
    scene: SceneSnapshot,
    seed: int,
    iteration: int = 0,
):
    """One latent MPPI cycle.

    Returns (q_hat, z_star, U_shifted, diagnostics): the decoded
    reference configuration, the latent state it came from, the
    time-shifted warm start for the next cycle, and a flat record for
    JSON-lines logging.
    """
    if cfg.space_mode != "latent":
        raise ValueError("plan_step requires space_mode='latent'")
    z_c = np.asarray(z_c, dtype=float)
    z_star, U_star, U_shifted, diag = _plan(
        cfg, weights, model, decoder, z_c, U_nominal, scene, seed, iteration
    )
    Q, ok = decoder.decode_total(z_star[None])
    q_hat = Q[0]
    diag["z_star"] = z_star.tolist()
    diag["z_reachable"] = bool(ok[0])
    diag["h_norm"] = float(
        np.linalg.norm(planar_constraint_batch(model, q_hat[None])[0])
    )
    return q_hat, z_star, U_shifted, diag


def vanilla_plan_step(
    cfg: PlannerConfig,
    weights: CostWeights,
    model: ChainModel,
    q_c: np.ndarray,
    U_nominal: np.ndarray,
    scene: SceneSnapshot,
    seed: int,
    iteration: int = 0,
):
    """Joint-space baseline cycle: same sampler and weighting, state is
    the full configuration, and the closure residual enters the cost as
    a quadratic penalty instead of a hard constraint downstream."""
    if cfg.space_mode != "joint_penalty":
        raise ValueError("vanilla_plan_step requires space_mode='joint_penalty'")
    q_c = np.asarray(q_c, dtype=float)
    q_hat, U_star, U_shifted, diag = _plan(
        cfg, weights, model, _IdentityDecoder(), q_c, U_nominal, scene, seed, iteration
    )
    diag["h_norm"] = float(
        np.linalg.norm(planar_constraint_batch(model, q_hat[None])[0])
    )
    return q_hat, U_shifted, diag


class _IdentityDecoder:
    """Joint-space 'decoder': the state already is the configuration."""

    def decode_total(self, Z):
        return Z, np.ones(Z.shape[0], dtype=bool)
