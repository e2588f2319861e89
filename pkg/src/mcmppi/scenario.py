"""Scenario files: the declarative description of one benchmark episode.

A scenario bundles the model id, start/goal tray poses, obstacles (static
or moving along a line), planner/cost/executor parameter tables, and the
termination thresholds. Experiment templates additionally declare the
randomization ranges used for multi-trial suites.

Schema (TOML, schema_version 1)::

    schema_version = 1
    name = "..."
    model = "planar_dual_3r"
    seed = 0

    [task]
    start = [x, y, theta]          # tray pose
    goal = [x, y, theta]
    success_pos = 0.01             # meters
    success_ori = 0.01             # radians
    break_limit = 0.05             # episode fails when ||h|| exceeds this
    max_time = 20.0                # simulated seconds

    [[obstacle]]
    center = [x, y]
    radius = 0.05
    trajectory = "static"          # or "linear"
    axis = [dx, dy]                # linear only; normalized on load
    speed = 0.1                    # m/s, linear only
    start_time = 0.0               # linear only
    turnaround = 0.2               # optional; reverse after this distance

    [planner]   # any PlannerConfig field, plus prediction = "frozen"|"extrapolated"
    [cost]      # any CostWeights field; q_neutral defaults to the model's
    [executor]  # any ExecutorConfig field; dt here is the execution period

    [vanilla.planner]  # optional joint-space overrides for the baseline
    [vanilla.cost]     # (noise dimension is the joint count, not the latent)

    [experiment]                   # optional; randomization ranges
    goal_x = [lo, hi]
    goal_y = [lo, hi]
    goal_theta = [lo, hi]
    obstacle_speed = [lo, hi]
    obstacle_axes = ["x", "y"]
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .executor import ExecutorConfig
from .kinematics import load_model
from .planner import CostWeights, PlannerConfig

_SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float
    trajectory: str = "static"  # or "linear"
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    speed: float = 0.0
    start_time: float = 0.0
    # distance along the axis after which the motion reverses; inf means
    # the obstacle traverses in one direction forever
    turnaround: float = np.inf

    def position(self, t: float) -> np.ndarray:
        if self.trajectory == "static":
            return self.center
        s = self.speed * max(0.0, t - self.start_time)
        if s > self.turnaround:
            s = 2.0 * self.turnaround - s
        return self.center + self.axis * s

    def velocity(self, t: float) -> np.ndarray:
        if self.trajectory != "linear" or t < self.start_time:
            return np.zeros_like(self.center)
        s = self.speed * (t - self.start_time)
        sign = 1.0 if s <= self.turnaround else -1.0
        return sign * self.speed * self.axis


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    model: str
    start: np.ndarray
    goal: np.ndarray
    success_pos: float = 0.01
    success_ori: float = 0.01
    break_limit: float = 0.05
    max_time: float = 20.0
    seed: int = 0
    obstacles: tuple = ()
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    cost: CostWeights = field(default_factory=CostWeights)
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    prediction: str = "frozen"
    vanilla_planner: PlannerConfig | None = None
    vanilla_cost: CostWeights | None = None
    experiment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.success_pos <= 0.0 or self.success_ori <= 0.0:
            raise ScenarioError("success thresholds must be positive")
        if self.break_limit <= 0.0 or self.max_time <= 0.0:
            raise ScenarioError("break_limit and max_time must be positive")
        for ob in self.obstacles:
            if ob.radius <= 0.0:
                raise ScenarioError("obstacle radius must be positive")

    def planner_for(self, mode: str) -> PlannerConfig:
        """Planner config for a harness mode; the baseline falls back to
        the latent table with joint-dimension noise when no [vanilla]
        override is given."""
        if mode != "vanilla_penalty":
            return self.planner
        if self.vanilla_planner is not None:
            return self.vanilla_planner
        n = load_model(self.model).joint_count
        return replace(
            self.planner,
            sigma=np.resize(self.planner.sigma, n),
            R=np.resize(self.planner.R, n),
            space_mode="joint_penalty",
        )

    def cost_for(self, mode: str) -> CostWeights:
        if mode == "vanilla_penalty" and self.vanilla_cost is not None:
            return self.vanilla_cost
        return self.cost

    def obstacle_state(self, t: float):
        """(centers, radii, velocities) arrays at simulated time t."""
        if not self.obstacles:
            dim = self.start.shape[0] - 1
            return np.zeros((0, dim)), np.zeros(0), np.zeros((0, dim))
        centers = np.stack([ob.position(t) for ob in self.obstacles])
        radii = np.array([ob.radius for ob in self.obstacles])
        vels = np.stack([ob.velocity(t) for ob in self.obstacles])
        return centers, radii, vels


def _parse_obstacle(doc: dict) -> Obstacle:
    traj = doc.get("trajectory", "static")
    if traj not in ("static", "linear"):
        raise ScenarioError(f"unknown obstacle trajectory {traj!r}")
    axis = np.asarray(doc.get("axis", [1.0, 0.0]), dtype=float)
    norm = np.linalg.norm(axis)
    if traj == "linear" and norm == 0.0:
        raise ScenarioError("linear obstacle needs a nonzero axis")
    return Obstacle(
        center=np.asarray(doc["center"], dtype=float),
        radius=float(doc["radius"]),
        trajectory=traj,
        axis=axis / norm if norm else axis,
        speed=float(doc.get("speed", 0.0)),
        start_time=float(doc.get("start_time", 0.0)),
        turnaround=float(doc.get("turnaround", np.inf)),
    )


def scenario_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.suffix == ".toml" and p.exists():
        return p
    shipped = _SCENARIO_DIR / f"{name_or_path}.toml"
    if shipped.exists():
        return shipped
    raise FileNotFoundError(f"no scenario {name_or_path!r}")


def load_scenario(name_or_path) -> ScenarioSpec:
    path = scenario_path(name_or_path)
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    if doc.get("schema_version") != 1:
        raise ScenarioError(f"unsupported schema_version in {path}")
    try:
        task = doc["task"]
        model_name = doc["model"]
        model = load_model(model_name)
        planner_doc = dict(doc.get("planner", {}))
        prediction = planner_doc.pop("prediction", "frozen")
        if prediction not in ("frozen", "extrapolated"):
            raise ScenarioError(f"unknown prediction mode {prediction!r}")
        for key in ("sigma", "R"):
            if key in planner_doc:
                planner_doc[key] = np.asarray(planner_doc[key], dtype=float)
        cost_doc = dict(doc.get("cost", {}))
        cost_doc.setdefault("q_neutral", model.q_neutral)
        cost_doc["q_neutral"] = np.asarray(cost_doc["q_neutral"], dtype=float)
        exec_doc = dict(doc.get("executor", {}))
        vanilla = doc.get("vanilla", {})
        v_planner = None
        if "planner" in vanilla:
            vp = dict(vanilla["planner"])
            for key in ("sigma", "R"):
                if key in vp:
                    vp[key] = np.asarray(vp[key], dtype=float)
            vp.setdefault("space_mode", "joint_penalty")
            v_planner = PlannerConfig(**vp)
        v_cost = None
        if "cost" in vanilla:
            vc = dict(vanilla["cost"])
            vc.setdefault("q_neutral", model.q_neutral)
            vc["q_neutral"] = np.asarray(vc["q_neutral"], dtype=float)
            v_cost = CostWeights(**vc)
        return ScenarioSpec(
            name=doc.get("name", path.stem),
            model=model_name,
            start=np.asarray(task["start"], dtype=float),
            goal=np.asarray(task["goal"], dtype=float),
            success_pos=float(task.get("success_pos", 0.01)),
            success_ori=float(task.get("success_ori", 0.01)),
            break_limit=float(task.get("break_limit", 0.05)),
            max_time=float(task.get("max_time", 20.0)),
            seed=int(doc.get("seed", 0)),
            obstacles=tuple(_parse_obstacle(o) for o in doc.get("obstacle", [])),
            planner=PlannerConfig(**planner_doc),
            cost=CostWeights(**cost_doc),
            executor=ExecutorConfig(**exec_doc),
            prediction=prediction,
            vanilla_planner=v_planner,
            vanilla_cost=v_cost,
            experiment=dict(doc.get("experiment", {})),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario {path}: {exc}") from exc


def randomize(spec: ScenarioSpec, trial_seed: int) -> ScenarioSpec:
    """Draw one trial's start/goal/obstacle parameters from the
    scenario's declared [experiment] ranges (uniform, seeded)."""
    exp = spec.experiment
    if not exp:
        return replace(spec, seed=trial_seed)
    rng = np.random.default_rng(trial_seed)
    goal = spec.goal.copy()
    for i, key in enumerate(("goal_x", "goal_y", "goal_theta")):
        if key in exp:
            lo, hi = exp[key]
            goal[i] = rng.uniform(lo, hi)
    obstacles = list(spec.obstacles)
    if obstacles and ("obstacle_speed" in exp or "obstacle_axes" in exp):
        spawn = float(exp.get("obstacle_spawn_distance", 0.55))
        new = []
        for ob in obstacles:
            speed, axis, center = ob.speed, ob.axis, ob.center
            if "obstacle_speed" in exp:
                lo, hi = exp["obstacle_speed"]
                speed = rng.uniform(lo, hi)
            turnaround = ob.turnaround
            if "obstacle_axes" in exp:
                name = exp["obstacle_axes"][rng.integers(len(exp["obstacle_axes"]))]
                sign = 1.0 if rng.random() < 0.5 else -1.0
                if name == "x":
                    # spawn at one side, traverse horizontally at a
                    # random crossing height, and exit the other side
                    lo, hi = exp.get("obstacle_cross_y", [center[1], center[1]])
                    center = np.array([-sign * spawn, rng.uniform(lo, hi)])
                    axis = np.array([sign, 0.0])
                    turnaround = np.inf
                else:
                    # spawn above the workspace, dip to the declared
                    # height through a random crossing abscissa, and
                    # retreat upward: the tray's full-width bar cannot
                    # dodge a central descender sideways, so an unbounded
                    # descent would make the trial unwinnable
                    lo, hi = exp.get("obstacle_cross_x", [center[0], center[0]])
                    center = np.array([rng.uniform(lo, hi), spawn])
                    axis = np.array([0.0, -1.0])
                    dip = float(exp.get("obstacle_dip_y", 0.36))
                    turnaround = spawn - dip
            new.append(
                replace(ob, center=center, speed=speed, axis=axis,
                        trajectory="linear", turnaround=turnaround)
            )
        obstacles = new
    return replace(spec, goal=goal, obstacles=tuple(obstacles), seed=trial_seed)
