"""Rigid-body transform algebra for SE(2) and SE(3).

Transforms are immutable value objects; every operation is a pure function,
so they can be evaluated from any number of concurrent rollout workers.
SE(2) is handled as a specialization with a scalar angle (exact, branch-free
log) rather than being embedded in SE(3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle the log/exp coefficients switch to their
# second-order Taylor forms to avoid 0/0.
SMALL_ANGLE = 1e-7
# Rotations this close to pi raise instead of branch-selecting a log value.
PI_GUARD = 1e-6


class SingularRotationError(ValueError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class GroupMismatchError(ValueError):
    """Operands belong to different groups (SE2 vs SE3)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Transform:
    """Element of SE(2) or SE(3): orthonormal rotation plus translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(self.rotation))
        object.__setattr__(self, "translation", _freeze(self.translation))
        d = self.rotation.shape[0]
        if self.rotation.shape != (d, d) or d not in (2, 3):
            raise ValueError(f"rotation must be 2x2 or 3x3, got {self.rotation.shape}")
        if self.translation.shape != (d,):
            raise ValueError("translation dimension does not match rotation")

    @property
    def group_tag(self) -> str:
        return "SE2" if self.rotation.shape[0] == 2 else "SE3"

    @staticmethod
    def identity(dim: int) -> "Transform":
        return Transform(np.eye(dim), np.zeros(dim))

    @staticmethod
    def se2(x: float, y: float, theta: float) -> "Transform":
        c, s = np.cos(theta), np.sin(theta)
        return Transform(np.array([[c, -s], [s, c]]), np.array([x, y]))

    def as_matrix(self) -> np.ndarray:
        d = self.rotation.shape[0]
        m = np.eye(d + 1)
        m[:d, :d] = self.rotation
        m[:d, d] = self.translation
        return m


@dataclass(frozen=True)
class Twist:
    """Lie-algebra element: angular part (rad, dim 1 or 3), linear part (m)."""

    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angular", _freeze(np.atleast_1d(self.angular)))
        object.__setattr__(self, "linear", _freeze(self.linear))
        if self.angular.shape not in ((1,), (3,)):
            raise ValueError("angular part must have dim 1 (SE2) or 3 (SE3)")
        expect = 2 if self.angular.shape == (1,) else 3
        if self.linear.shape != (expect,):
            raise ValueError("linear part dimension does not match angular part")

    def as_vector(self) -> np.ndarray:
        """[linear; angular] stacking, used for constraint residuals."""
        return np.concatenate([self.linear, self.angular])


def compose(a: Transform, b: Transform) -> Transform:
    if a.group_tag != b.group_tag:
        raise GroupMismatchError(f"{a.group_tag} vs {b.group_tag}")
    return Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: Transform) -> Transform:
    rt = t.rotation.T
    return Transform(rt, -rt @ t.translation)


def skew(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle(t: Transform) -> float:
    """Absolute rotation angle of a transform."""
    if t.group_tag == "SE2":
        return abs(float(np.arctan2(t.rotation[1, 0], t.rotation[0, 0])))
    cos_th = (np.trace(t.rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_th, -1.0, 1.0)))


def _so3_log(R: np.ndarray) -> np.ndarray:
    cos_th = (np.trace(R) - 1.0) / 2.0
    theta = np.arccos(np.clip(cos_th, -1.0, 1.0))
    if theta >= np.pi - PI_GUARD:
        raise SingularRotationError(f"rotation angle {theta:.9f} within guard of pi")
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        # sin(theta)/theta ~ 1 - theta^2/6
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    return theta / (2.0 * np.sin(theta)) * vee


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def log_map(t: Transform) -> Twist:
    """Group logarithm; raises SingularRotationError near angle pi."""
    if t.group_tag == "SE2":
        theta = float(np.arctan2(t.rotation[1, 0], t.rotation[0, 0]))
        if abs(theta) >= np.pi - PI_GUARD:
            raise SingularRotationError(f"rotation angle {theta:.9f} within guard of pi")
        if abs(theta) < SMALL_ANGLE:
            # V = I + theta/2 J + O(theta^2); invert to second order
            half = 0.5 * theta
            vinv = np.array([[1.0, half], [-half, 1.0]]) / (1.0 + half * half)
        else:
            s, c = np.sin(theta), np.cos(theta)
            # V = (1/theta) [[s, -(1-c)], [1-c, s]]
            a = s / theta
            b = (1.0 - c) / theta
            vinv = np.array([[a, b], [-b, a]]) / (a * a + b * b)
        return Twist(np.array([theta]), vinv @ t.translation)

    w = _so3_log(t.rotation)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        vinv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        # V^{-1} = I - W/2 + (1/theta^2)(1 - theta sin/(2(1-cos))) W^2
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / (theta * theta)
        vinv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist(w, vinv @ t.translation)


def exp_map(x: Twist) -> Transform:
    """Group exponential (Rodrigues closed form)."""
    if x.angular.shape == (1,):
        theta = float(x.angular[0])
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, -s], [s, c]])
        if abs(theta) < SMALL_ANGLE:
            V = np.array([[1.0, -0.5 * theta], [0.5 * theta, 1.0]])
        else:
            a = s / theta
            b = (1.0 - c) / theta
            V = np.array([[a, -b], [b, a]])
        return Transform(R, V @ x.linear)

    w = x.angular
    theta = np.linalg.norm(w)
    R = _so3_exp(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / (theta ** 3)
        V = np.eye(3) + b * W + c * (W @ W)
    return Transform(R, V @ x.linear)
