"""Pose algebra: quaternions, oriented-box corners, corner distance, progress tokens.

All rotations are unit quaternions in scalar-first order (w, x, y, z).
Positions are meters. Everything here is a pure function on immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_NORM_TOL = 1e-6

# Default half-extents of the box around the end effector, and the progress
# quantization used for positional tokens. Both are configurable per task.
DEFAULT_EXTENTS = (0.05, 0.05, 0.05)
DEFAULT_BIN_SIZE = 0.01
DEFAULT_VOCAB_MAX = 4096


class GeometryError(ValueError):
    """Invalid geometric input (non-unit quaternion, empty path, bad extents)."""


def _as_vec(x, n: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise GeometryError(f"{name} must have shape ({n},), got {arr.shape}")
    return arr


def quat_normalize(q) -> np.ndarray:
    q = _as_vec(q, 4, "quaternion")
    norm = float(np.linalg.norm(q))
    if norm < 1e-12:
        raise GeometryError("cannot normalize near-zero quaternion")
    return q / norm


def quat_canonical(q) -> np.ndarray:
    """Flip sign so w >= 0; on w == 0 the first nonzero component is positive."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c > 0.0:
            return q.copy()
        if c < 0.0:
            return -q
    return q.copy()


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = _as_vec(axis, 3, "axis")
    n = float(np.linalg.norm(axis))
    if n < 1e-12:
        raise GeometryError("rotation axis must be nonzero")
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (unit-form expansion)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_slerp(a, b, t: float) -> np.ndarray:
    """Shortest-path spherical interpolation between unit quaternions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-12:
        out = a + t * (b - a)
        return out / np.linalg.norm(out)
    theta = np.arccos(dot)
    s = np.sin(theta)
    return (np.sin((1.0 - t) * theta) * a + np.sin(t * theta) * b) / s


def quat_angle_between(a, b) -> float:
    """Rotation angle (radians, in [0, pi]) taking a to b."""
    dot = abs(float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))))
    return 2.0 * float(np.arccos(min(dot, 1.0)))


def rotate_point(q, v) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion. Raises on non-unit input."""
    q = _as_vec(q, 4, "quaternion")
    if abs(float(np.linalg.norm(q)) - 1.0) > QUAT_NORM_TOL:
        raise GeometryError(
            f"rotate_point requires a unit quaternion, |q| = {np.linalg.norm(q):.9f}"
        )
    v = _as_vec(v, 3, "vector")
    w, x, y, z = q
    u = np.array([x, y, z])
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid pose: position + unit quaternion (canonicalized to w >= 0)."""

    p: np.ndarray
    q: np.ndarray

    def __init__(self, p=(0.0, 0.0, 0.0), q=(1.0, 0.0, 0.0, 0.0)):
        p = _as_vec(p, 3, "position")
        q = quat_canonical(quat_normalize(q))
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply other in this pose's frame."""
        return Pose(self.p + rotate_point(self.q, other.p), quat_mul(self.q, other.q))

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        return Pose(-rotate_point(qi, self.p), qi)

    def transform_point(self, v) -> np.ndarray:
        return self.p + rotate_point(self.q, v)

    def flat(self) -> np.ndarray:
        """7-vector [p, q] layout used by state and action vectors."""
        return np.concatenate([self.p, self.q])

    @staticmethod
    def from_flat(v) -> "Pose":
        v = _as_vec(v, 7, "pose vector")
        return Pose(v[:3], v[3:])

    def allclose(self, other: "Pose", tol: float = 1e-9) -> bool:
        dq = min(np.max(np.abs(self.q - other.q)), np.max(np.abs(self.q + other.q)))
        return bool(np.max(np.abs(self.p - other.p)) <= tol and dq <= tol)


@dataclass(frozen=True, eq=False)
class BoxExtents:
    """Half-extents of an axis-aligned box in the body frame, all > 0."""

    h: np.ndarray

    def __init__(self, h=DEFAULT_EXTENTS):
        h = _as_vec(h, 3, "half-extents")
        if not np.all(h > 0.0):
            raise GeometryError(f"half-extents must be strictly positive, got {h}")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)


# Local corner sign pattern: corner k has signs from the 3-bit expansion of k
# (bit0 -> x, bit1 -> y, bit2 -> z; 0 -> minus). The ordering is part of the
# contract so corner-wise losses compare like with like.
CORNER_SIGNS = np.array(
    [[(1.0 if (k >> b) & 1 else -1.0) for b in range(3)] for k in range(8)]
)


def local_corners(extents: BoxExtents) -> np.ndarray:
    return CORNER_SIGNS * extents.h


def corners(pose: Pose, extents: BoxExtents) -> np.ndarray:
    """8x3 world positions of the box corners, in binary-sign order."""
    return pose.p + local_corners(extents) @ quat_to_matrix(pose.q).T


def corner_distance(a: Pose, b: Pose, extents: BoxExtents) -> float:
    """Sum over the 8 corresponding corners of their Euclidean distance.

    Casts rotation error into position space; zero iff the poses coincide
    (up to quaternion sign).
    """
    diff = corners(a, extents) - corners(b, extents)
    return float(np.sum(np.linalg.norm(diff, axis=1)))


def _corner_track(p: np.ndarray, q_unit: np.ndarray, extents: BoxExtents) -> np.ndarray:
    """World corners (N, 8, 3) for a pose batch; row i matches corners() exactly."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    R = np.empty((p.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return p[:, None, :] + np.matmul(local_corners(extents), np.swapaxes(R, -1, -2))


def _corner_track_tokens(track: np.ndarray, bin_size: float, vocab_max: int) -> np.ndarray:
    if bin_size <= 0.0:
        raise GeometryError("bin_size must be positive")
    tokens = np.zeros(track.shape[0], dtype=np.int64)
    if track.shape[0] > 1:
        diff = track[1:] - track[:-1]
        dist = np.sqrt(np.add.reduce(diff * diff, axis=2)).sum(axis=1)
        binned = (np.cumsum(dist) / bin_size).astype(np.int64)
        tokens[1:] = np.minimum(binned, vocab_max - 1)
    return tokens


def positional_tokens(
    ee_path,
    extents: BoxExtents,
    bin_size: float = DEFAULT_BIN_SIZE,
    vocab_max: int = DEFAULT_VOCAB_MAX,
) -> np.ndarray:
    """Progress token for every prefix of the path, in one left-to-right pass.

    Token t is the cumulative corner distance traversed through pose t,
    quantized by bin_size and clamped to vocab_max - 1. The first token is 0
    and the sequence is non-decreasing. Element t equals
    positional_token(ee_path[:t + 1], ...) exactly (same accumulation order).
    """
    path = list(ee_path)
    if len(path) == 0:
        raise GeometryError("positional tokens require a non-empty path")
    p = np.array([pose.p for pose in path])
    q = np.array([pose.q for pose in path])
    return _corner_track_tokens(_corner_track(p, q, extents), bin_size, vocab_max)


def positional_tokens_flat(
    rows,
    extents: BoxExtents,
    bin_size: float = DEFAULT_BIN_SIZE,
    vocab_max: int = DEFAULT_VOCAB_MAX,
) -> np.ndarray:
    """positional_tokens over Pose.from_flat of every (N, 7) row, without the poses."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 7 or rows.shape[0] == 0:
        raise GeometryError(f"pose rows must have shape (N >= 1, 7), got {rows.shape}")
    q = rows[:, 3:7]
    # per-row norm keeps the exact arithmetic of quat_normalize
    norms = np.array([float(np.linalg.norm(qi)) for qi in q])
    if np.any(norms < 1e-12):
        raise GeometryError("cannot normalize near-zero quaternion")
    track = _corner_track(rows[:, :3], q / norms[:, None], extents)
    return _corner_track_tokens(track, bin_size, vocab_max)


def positional_token(
    ee_path,
    extents: BoxExtents,
    bin_size: float = DEFAULT_BIN_SIZE,
    vocab_max: int = DEFAULT_VOCAB_MAX,
) -> int:
    """Progress token at the end of the path (see positional_tokens)."""
    return int(positional_tokens(ee_path, extents, bin_size, vocab_max)[-1])
