"""Dual-arm closed-chain kinematics: FK, constraint map h(q), Jacobians,
and Newton projection onto the constraint manifold.

Two chain models ship with the package (see ``models/``):

* ``planar_dual_3r`` — two 3R arms in SE(2) grasping a rigid bar; n = 6,
  l = 3, intrinsic dimension m = 3. The primary testbed: it admits an
  exact analytic chart (see :mod:`mcmppi.codec`).
* ``spatial_dual_7dof`` — two generic 7-DoF arms in SE(3); n = 14,
  l = 8 (6 closed-chain + 2 tray-flatness), m = 6.

The constraint residual h(q) stacks a closed-chain block
``h_cc = log((T_l . G)^-1 . T_r)`` (G is the fixed grasp transform
``^lT_r*``) and, for the spatial model, a flatness block of tray roll and
pitch extracted with the ZYX Euler convention.

Tray frame convention: position is the midpoint of the two end-effector
origins; orientation is the left end-effector orientation composed with
half the relative rotation (geodesic midpoint).

The shipped constraint Jacobian is a central finite difference of h with
step 1e-6; at l x n sizes of at most 8 x 14 this is well inside the
execution-cycle budget and avoids hand-derivation errors.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .geometry import (
    Transform,
    compose,
    exp_map,
    inverse,
    log_map,
)

FD_STEP = 1e-6
DLS_DAMPING = 1e-8


class ModelError(ValueError):
    """Malformed or inconsistent chain model file."""


class ProjectionError(RuntimeError):
    """Newton projection onto the manifold failed."""


@dataclass(frozen=True)
class ArmModel:
    name: str
    base: Transform
    # Planar arm: link lengths; spatial arm: modified-DH rows (a, alpha, d, offset).
    link_lengths: np.ndarray | None = None
    mdh: np.ndarray | None = None
    tool: Transform | None = None
    tool_rotation: float = 0.0  # planar tool yaw offset (rad)
    q_lb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sphere_radius: float = 0.03
    # Collision sphere stations as (link_index, fraction along link).
    sphere_stations: tuple = ()

    @property
    def dof(self) -> int:
        return len(self.q_lb)


@dataclass(frozen=True)
class ChainModel:
    name: str
    group: str  # "SE2" | "SE3"
    arms: tuple
    grasp: Transform  # ^lT_r*, right EE pose in left EE frame
    bar_length: float
    tray_sphere_radius: float
    tray_sphere_stations: np.ndarray  # fractions of half bar length from center
    q_neutral: np.ndarray
    euler_convention: str = "ZYX"

    @property
    def joint_count(self) -> int:
        return sum(a.dof for a in self.arms)

    @property
    def q_lb(self) -> np.ndarray:
        return np.concatenate([a.q_lb for a in self.arms])

    @property
    def q_ub(self) -> np.ndarray:
        return np.concatenate([a.q_ub for a in self.arms])

    @property
    def constraint_dim(self) -> int:
        return 3 if self.group == "SE2" else 8

    @property
    def latent_dim(self) -> int:
        return self.joint_count - self.constraint_dim

    def split(self, q: np.ndarray):
        nl = self.arms[0].dof
        return q[:nl], q[nl:]


@dataclass(frozen=True)
class ConstraintResidual:
    """h(q) with its closed-chain / flatness partition.

    The cc block mixes meters (linear components) and radians (angular);
    the flat block is pure radians.
    """

    h: np.ndarray
    cc_dim: int
    flat_dim: int

    @property
    def cc(self) -> np.ndarray:
        return self.h[: self.cc_dim]

    @property
    def flat(self) -> np.ndarray:
        return self.h[self.cc_dim :]

    def norm(self) -> float:
        return float(np.linalg.norm(self.h))


# ---------------------------------------------------------------------------
# model loading

_MODEL_CACHE: dict = {}


def _model_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.suffix == ".toml" and p.exists():
        return p
    pkg_file = importlib.resources.files("mcmppi") / "models" / f"{name_or_path}.toml"
    with importlib.resources.as_file(pkg_file) as fp:
        if fp.exists():
            return fp
    raise ModelError(f"unknown model {name_or_path!r}")


def load_model(name_or_path) -> ChainModel:
    key = str(name_or_path)
    if key in _MODEL_CACHE:
        return _MODEL_CACHE[key]
    path = _model_path(name_or_path)
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    try:
        model = _parse_model(doc)
    except KeyError as e:
        raise ModelError(f"missing key in model file: {e}") from e
    _MODEL_CACHE[key] = model
    return model


def _parse_model(doc) -> ChainModel:
    group = doc["group"]
    if group not in ("SE2", "SE3"):
        raise ModelError(f"group must be SE2 or SE3, got {group!r}")
    arms = []
    for arm_doc in doc["arm"]:
        bx = arm_doc["base"]
        if group == "SE2":
            base = Transform.se2(bx[0], bx[1], bx[2])
            arm = ArmModel(
                name=arm_doc["name"],
                base=base,
                link_lengths=np.asarray(arm_doc["link_lengths"], dtype=float),
                tool_rotation=float(arm_doc.get("tool_rotation", 0.0)),
                q_lb=np.asarray(arm_doc["q_lb"], dtype=float),
                q_ub=np.asarray(arm_doc["q_ub"], dtype=float),
                sphere_radius=float(arm_doc.get("sphere_radius", 0.03)),
                sphere_stations=tuple(
                    (int(i), float(f)) for i, f in arm_doc.get("sphere_stations", [])
                ),
            )
        else:
            base = Transform(
                np.asarray(arm_doc["base_rotation"], dtype=float),
                np.asarray(bx, dtype=float),
            )
            tool_doc = arm_doc.get("tool", {})
            tool = Transform(
                np.asarray(tool_doc.get("rotation", np.eye(3).tolist()), dtype=float),
                np.asarray(tool_doc.get("translation", [0.0, 0.0, 0.0]), dtype=float),
            )
            arm = ArmModel(
                name=arm_doc["name"],
                base=base,
                mdh=np.asarray(arm_doc["mdh"], dtype=float),
                tool=tool,
                q_lb=np.asarray(arm_doc["q_lb"], dtype=float),
                q_ub=np.asarray(arm_doc["q_ub"], dtype=float),
                sphere_radius=float(arm_doc.get("sphere_radius", 0.05)),
            )
        if np.any(arm.q_lb >= arm.q_ub):
            raise ModelError(f"arm {arm.name!r}: q_lb must be < q_ub component-wise")
        arms.append(arm)
    if len(arms) != 2:
        raise ModelError("chain model requires exactly two arms")

    g = doc["grasp"]
    if group == "SE2":
        grasp = Transform.se2(g["translation"][0], g["translation"][1], g["rotation"])
    else:
        grasp = Transform(
            np.asarray(g["rotation"], dtype=float),
            np.asarray(g["translation"], dtype=float),
        )
    tray = doc["tray"]
    return ChainModel(
        name=doc["name"],
        group=group,
        arms=tuple(arms),
        grasp=grasp,
        bar_length=float(tray["bar_length"]),
        tray_sphere_radius=float(tray.get("sphere_radius", 0.03)),
        tray_sphere_stations=np.asarray(tray.get("sphere_stations", []), dtype=float),
        q_neutral=np.asarray(doc["q_neutral"], dtype=float),
        euler_convention=doc.get("euler_convention", "ZYX"),
    )


# ---------------------------------------------------------------------------
# forward kinematics

def _arm_fk(arm: ArmModel, q: np.ndarray, group: str) -> Transform:
    if group == "SE2":
        base_yaw = np.arctan2(arm.base.rotation[1, 0], arm.base.rotation[0, 0])
        ang = base_yaw
        pos = arm.base.translation.copy()
        for L, qi in zip(arm.link_lengths, q):
            ang = ang + qi
            pos = pos + L * np.array([np.cos(ang), np.sin(ang)])
        return Transform.se2(pos[0], pos[1], ang + arm.tool_rotation)
    T = arm.base
    for (a, alpha, d, off), qi in zip(arm.mdh, q):
        T = compose(T, _mdh_transform(a, alpha, d, qi + off))
    return compose(T, arm.tool)


def _mdh_transform(a, alpha, d, theta) -> Transform:
    ca, sa = np.cos(alpha), np.sin(alpha)
    ct, st = np.cos(theta), np.sin(theta)
    R = np.array(
        [
            [ct, -st, 0.0],
            [st * ca, ct * ca, -sa],
            [st * sa, ct * sa, ca],
        ]
    )
    t = np.array([a, -sa * d, ca * d])
    return Transform(R, t)


def _tray_frame(t_l: Transform, t_r: Transform) -> Transform:
    """Midpoint position, geodesic-midpoint orientation."""
    rel = compose(inverse(t_l), t_r)
    half = log_map(rel)
    half_rot = exp_map(
        type(half)(angular=0.5 * half.angular, linear=np.zeros_like(half.linear))
    )
    mid_rot = t_l.rotation @ half_rot.rotation
    mid_pos = 0.5 * (t_l.translation + t_r.translation)
    return Transform(mid_rot, mid_pos)


def forward_kinematics(model: ChainModel, q: np.ndarray):
    """Returns (left_ee, right_ee, tray) transforms in the world frame."""
    q = np.asarray(q, dtype=float)
    ql, qr = model.split(q)
    t_l = _arm_fk(model.arms[0], ql, model.group)
    t_r = _arm_fk(model.arms[1], qr, model.group)
    return t_l, t_r, _tray_frame(t_l, t_r)


# ---------------------------------------------------------------------------
# constraint map

def _euler_zyx_roll_pitch(R: np.ndarray):
    # R = Rz(yaw) Ry(pitch) Rx(roll)
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    return roll, pitch


def constraint(model: ChainModel, q: np.ndarray) -> ConstraintResidual:
    """Equality-constraint residual h(q).

    cc block: log of the relative-pose error between the actual and
    required end-effector relative pose. flat block (spatial only): tray
    roll and pitch, ZYX convention.
    """
    t_l, t_r, tray = forward_kinematics(model, q)
    err = compose(inverse(compose(t_l, model.grasp)), t_r)
    cc = log_map(err).as_vector()
    if model.group == "SE2":
        return ConstraintResidual(cc, cc_dim=3, flat_dim=0)
    roll, pitch = _euler_zyx_roll_pitch(tray.rotation)
    return ConstraintResidual(
        np.concatenate([cc, [roll, pitch]]), cc_dim=6, flat_dim=2
    )


def constraint_jacobian(model: ChainModel, q: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference Jacobian of h, shape (l, n)."""
    q = np.asarray(q, dtype=float)
    n = model.joint_count
    cols = []
    for i in range(n):
        dq = np.zeros(n)
        dq[i] = step
        hp = constraint(model, q + dq).h
        hm = constraint(model, q - dq).h
        cols.append((hp - hm) / (2.0 * step))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# task frame and Jacobian

def task_pose(model: ChainModel, q: np.ndarray, frame: str = "tray_center"):
    """Planar: (x, y, theta) array. Spatial: Transform."""
    t_l, t_r, tray = forward_kinematics(model, q)
    t = {"tray_center": tray, "left_ee": t_l}[frame]
    if model.group == "SE2":
        theta = np.arctan2(t.rotation[1, 0], t.rotation[0, 0])
        return np.array([t.translation[0], t.translation[1], theta])
    return t


def _planar_arm_position_jacobian(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """3 x dof geometric Jacobian (x, y, theta) of the arm's EE frame."""
    base_yaw = np.arctan2(arm.base.rotation[1, 0], arm.base.rotation[0, 0])
    angs = base_yaw + np.cumsum(q)
    # joint j position: base + sum_{i<j} L_i * dir(ang_i)
    dirs = np.stack([np.cos(angs), np.sin(angs)], axis=1)
    pts = arm.base.translation + np.vstack(
        [np.zeros(2), np.cumsum(arm.link_lengths[:, None] * dirs, axis=0)]
    )
    ee = pts[-1]
    J = np.zeros((3, arm.dof))
    for j in range(arm.dof):
        r = ee - pts[j]
        J[0, j] = -r[1]
        J[1, j] = r[0]
        J[2, j] = 1.0
    return J


def task_jacobian(model: ChainModel, q: np.ndarray, frame: str = "tray_center") -> np.ndarray:
    """Geometric Jacobian of the selected frame: 3 x n planar, 6 x n spatial.

    Planar rows are (dx, dy, dtheta); the tray-center angle is the mean of
    the two EE angles, so its Jacobian is the mean of the per-arm Jacobians.
    Spatial frames use a central finite difference with local (world-frame
    angular velocity) orientation coordinates.
    """
    q = np.asarray(q, dtype=float)
    n = model.joint_count
    nl = model.arms[0].dof
    if model.group == "SE2":
        ql, qr = model.split(q)
        J_l = _planar_arm_position_jacobian(model.arms[0], ql)
        J = np.zeros((3, n))
        if frame == "left_ee":
            J[:, :nl] = J_l
            return J
        J_r = _planar_arm_position_jacobian(model.arms[1], qr)
        J[:, :nl] = 0.5 * J_l
        J[:, nl:] = 0.5 * J_r
        return J

    step = FD_STEP
    base = task_pose(model, q, frame)
    J = np.zeros((6, n))
    for i in range(n):
        dq = np.zeros(n)
        dq[i] = step
        tp = task_pose(model, q + dq, frame)
        tm = task_pose(model, q - dq, frame)
        J[:3, i] = (tp.translation - tm.translation) / (2.0 * step)
        dR = tp.rotation @ tm.rotation.T
        w = log_map(Transform(dR, np.zeros(3))).angular
        J[3:, i] = w / (2.0 * step)
    del base
    return J


def task_error(model: ChainModel, q: np.ndarray, goal, frame: str = "tray_center") -> np.ndarray:
    """Operational-space pose error, [position; orientation] stacking.

    Planar goal is (x, y, theta); spatial goal is a Transform. Orientation
    error is the log of the relative rotation (world frame).
    """
    cur = task_pose(model, q, frame)
    if model.group == "SE2":
        goal = np.asarray(goal, dtype=float)
        dth = np.arctan2(np.sin(cur[2] - goal[2]), np.cos(cur[2] - goal[2]))
        return np.array([cur[0] - goal[0], cur[1] - goal[1], dth])
    dR = cur.rotation @ goal.rotation.T
    w = log_map(Transform(dR, np.zeros(3))).angular
    return np.concatenate([cur.translation - goal.translation, w])


# ---------------------------------------------------------------------------
# manifold projection

def project_to_manifold(
    model: ChainModel,
    q0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> np.ndarray:
    """Gauss-Newton projection q <- q - J_h^+ h(q) until ||h|| <= tol.

    Uses damped least squares (damping ``DLS_DAMPING``) for the
    pseudoinverse. The result is clamped to joint bounds only if the clamp
    preserves ||h|| <= tol; otherwise ProjectionError is raised.
    """
    q = np.asarray(q0, dtype=float).copy()
    for _ in range(max_iter):
        h = constraint(model, q).h
        if np.linalg.norm(h) <= tol:
            break
        J = constraint_jacobian(model, q)
        JJt = J @ J.T + DLS_DAMPING * np.eye(J.shape[0])
        q = q - J.T @ np.linalg.solve(JJt, h)
    else:
        res = np.linalg.norm(constraint(model, q).h)
        raise ProjectionError(
            f"no convergence after {max_iter} iterations, ||h|| = {res:.3e}"
        )
    qc = np.clip(q, model.q_lb, model.q_ub)
    if not np.array_equal(qc, q):
        if np.linalg.norm(constraint(model, qc).h) > tol:
            raise ProjectionError("bound clamp leaves the manifold")
        q = qc
    return q


# ---------------------------------------------------------------------------
# vectorized planar paths (used by the planner's batched rollouts)

def planar_fk_batch(model: ChainModel, Q: np.ndarray):
    """Vectorized planar FK over a batch of configurations.

    Q has shape (N, 6). Returns a dict with end-effector positions/angles,
    the tray pose (N, 3), and all collision sphere centers (N, S, 2).
    """
    if model.group != "SE2":
        raise ModelError("planar_fk_batch requires the SE2 model")
    Q = np.asarray(Q, dtype=float)
    out = {}
    sphere_centers = []
    sphere_radii = []
    arm_sphere_count = []
    for a_idx, arm in enumerate(model.arms):
        q = Q[:, a_idx * 3 : a_idx * 3 + 3]
        base_yaw = np.arctan2(arm.base.rotation[1, 0], arm.base.rotation[0, 0])
        angs = base_yaw + np.cumsum(q, axis=1)  # (N, 3)
        dirs = np.stack([np.cos(angs), np.sin(angs)], axis=2)  # (N, 3, 2)
        steps = arm.link_lengths[None, :, None] * dirs
        joints = arm.base.translation + np.concatenate(
            [np.zeros((Q.shape[0], 1, 2)), np.cumsum(steps, axis=1)], axis=1
        )  # (N, 4, 2): base, j2, j3, ee
        ee = joints[:, -1]
        ee_ang = angs[:, -1] + arm.tool_rotation
        out[f"ee_{a_idx}"] = ee
        out[f"ang_{a_idx}"] = ee_ang
        count = 0
        for link_idx, frac in arm.sphere_stations:
            p = joints[:, link_idx] + frac * (joints[:, link_idx + 1] - joints[:, link_idx])
            sphere_centers.append(p)
            sphere_radii.append(arm.sphere_radius)
            count += 1
        arm_sphere_count.append(count)

    p_l, p_r = out["ee_0"], out["ee_1"]
    mid = 0.5 * (p_l + p_r)
    d_ang = np.arctan2(
        np.sin(out["ang_1"] - out["ang_0"]), np.cos(out["ang_1"] - out["ang_0"])
    )
    tray_ang = out["ang_0"] + 0.5 * d_ang
    out["tray"] = np.stack([mid[:, 0], mid[:, 1], tray_ang], axis=1)

    half = 0.5 * model.bar_length
    tdir = np.stack([np.cos(tray_ang), np.sin(tray_ang)], axis=1)
    for frac in model.tray_sphere_stations:
        sphere_centers.append(mid + frac * half * tdir)
        sphere_radii.append(model.tray_sphere_radius)
    out["spheres"] = np.stack(sphere_centers, axis=1) if sphere_centers else np.zeros(
        (Q.shape[0], 0, 2)
    )
    out["sphere_radii"] = np.asarray(sphere_radii)
    out["arm_sphere_count"] = arm_sphere_count
    return out


def planar_constraint_batch(model: ChainModel, Q: np.ndarray) -> np.ndarray:
    """Vectorized h(q) for the planar model, shape (N, 3)."""
    fk = planar_fk_batch(model, Q)
    # error transform E = (T_l G)^-1 T_r
    ang_lg = fk["ang_0"]  # grasp rotation is zero for the shipped model
    g_ang = np.arctan2(model.grasp.rotation[1, 0], model.grasp.rotation[0, 0])
    ang_lg = ang_lg + g_ang
    c, s = np.cos(fk["ang_0"]), np.sin(fk["ang_0"])
    dp = fk["ee_1"] - fk["ee_0"]
    # p in left-EE frame, minus grasp offset, rotated into grasp frame
    px = c * dp[:, 0] + s * dp[:, 1] - model.grasp.translation[0]
    py = -s * dp[:, 0] + c * dp[:, 1] - model.grasp.translation[1]
    cg, sg = np.cos(g_ang), np.sin(g_ang)
    ex = cg * px + sg * py
    ey = -sg * px + cg * py
    dth = np.arctan2(np.sin(fk["ang_1"] - ang_lg), np.cos(fk["ang_1"] - ang_lg))
    return _se2_log_batch(dth, np.stack([ex, ey], axis=1))


def _se2_log_batch(theta: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized SE(2) log, [linear(2); angular(1)] per row."""
    small = np.abs(theta) < 1e-7
    th_safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta * theta / 6.0, np.sin(th_safe) / th_safe)
    b = np.where(small, 0.5 * theta, (1.0 - np.cos(th_safe)) / th_safe)
    den = a * a + b * b
    vx = (a * t[:, 0] + b * t[:, 1]) / den
    vy = (-b * t[:, 0] + a * t[:, 1]) / den
    return np.stack([vx, vy, theta], axis=1)
