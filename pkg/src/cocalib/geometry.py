"""SE(2) pose algebra, homogeneous transforms, and oriented-box geometry.

Poses are 3-DoF (x, y, yaw) with yaw kept in (-pi, pi]. Transforms are plain
3x3 numpy arrays with an orthonormal rotation block and bottom row [0, 0, 1].
Everything here is pure and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi

# Orthonormality / determinant tolerance when accepting a matrix as rigid.
RIGID_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap an angle (radians) into (-pi, pi].

    Raises:
        ValueError: if the input is not finite.
    """
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    r = math.remainder(a, _TWO_PI)  # lands in [-pi, pi]
    if r <= -math.pi:
        r += _TWO_PI
    return r


@dataclass(frozen=True)
class Pose2:
    """A 2D rigid pose (x, y, theta) with theta wrapped into (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Group composition a * b, i.e. b expressed through frame a.

    Satisfies to_matrix(compose(a, b)) == to_matrix(a) @ to_matrix(b).
    """
    ca, sa = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        a.theta + b.theta,
    )


def inverse(p: Pose2) -> Pose2:
    """Group inverse: compose(p, inverse(p)) is the identity."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta)


def relative(a: Pose2, b: Pose2) -> Pose2:
    """Pose of b in the frame of a: inverse(a) * b.

    compose(a, relative(a, b)) == b.
    """
    return compose(inverse(a), b)


def to_matrix(p: Pose2) -> np.ndarray:
    """3x3 homogeneous transform for a pose."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]])


def from_matrix(T: np.ndarray) -> Pose2:
    """Pose of a rigid 3x3 homogeneous transform.

    Raises:
        ValueError: if T is not a valid rigid transform (bad shape, bottom
            row, non-orthonormal rotation block, or determinant != +1).
    """
    T = np.asarray(T, dtype=float)
    check_rigid(T)
    return Pose2(T[0, 2], T[1, 2], math.atan2(T[1, 0], T[0, 0]))


def check_rigid(T: np.ndarray) -> None:
    """Validate a 3x3 rigid transform; raises ValueError on failure."""
    if T.shape != (3, 3):
        raise ValueError(f"transform must be 3x3, got shape {T.shape}")
    if not np.all(np.isfinite(T)):
        raise ValueError("transform contains non-finite entries")
    if not np.array_equal(T[2], [0.0, 0.0, 1.0]):
        raise ValueError(f"bottom row must be [0, 0, 1], got {T[2]}")
    R = T[:2, :2]
    if not np.allclose(R.T @ R, np.eye(2), atol=RIGID_TOL):
        raise ValueError("rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > RIGID_TOL:
        raise ValueError("rotation block determinant is not +1 (reflection?)")


def invert_matrix(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid 3x3 transform (no linear solve)."""
    R = T[:2, :2]
    out = np.eye(3)
    out[:2, :2] = R.T
    out[:2, 2] = -R.T @ T[:2, 2]
    return out


@dataclass(frozen=True)
class DetectedBox:
    """Oriented BEV rectangle with per-axis detection uncertainty.

    center is the box pose in some stated frame; half_length runs along the
    box heading, half_width across it. sigma = (sigma_x, sigma_y, sigma_theta)
    are strictly positive standard deviations so the information matrix
    diag(sigma^-2) stays finite.
    """

    center: Pose2
    half_length: float
    half_width: float
    sigma: tuple[float, float, float] = (0.1, 0.1, 0.01)
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.half_length > 0 and self.half_width > 0):
            raise ValueError("box extents must be strictly positive")
        if len(self.sigma) != 3 or any(s <= 0 for s in self.sigma):
            raise ValueError("box sigma entries must be strictly positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))

    def corners(self) -> np.ndarray:
        """4x2 array of corner coordinates, counterclockwise."""
        local = np.array(
            [
                [self.half_length, self.half_width],
                [-self.half_length, self.half_width],
                [-self.half_length, -self.half_width],
                [self.half_length, -self.half_width],
            ]
        )
        c, s = math.cos(self.center.theta), math.sin(self.center.theta)
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + np.array([self.center.x, self.center.y])

    def area(self) -> float:
        return 4.0 * self.half_length * self.half_width

    def information(self) -> np.ndarray:
        """3x3 diagonal information matrix diag(sigma^-2)."""
        sx, sy, st = self.sigma
        return np.diag([sx**-2, sy**-2, st**-2])


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a polygon against a convex CCW polygon.

    Points on a clip edge count as inside; the intersection parameter is
    derived from the same two side values as the inside tests, so it is
    well defined whenever the endpoints straddle the edge.
    """
    output = [(float(x), float(y)) for x, y in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        poly, output = output, []
        m = len(poly)
        for j in range(m):
            cx, cy = poly[j]
            nx, ny = poly[(j + 1) % m]
            cur_side = ex * (cy - ay) - ey * (cx - ax)
            nxt_side = ex * (ny - ay) - ey * (nx - ax)
            cur_in = cur_side >= 0.0
            if cur_in:
                output.append((cx, cy))
            if cur_in != (nxt_side >= 0.0):
                t = cur_side / (cur_side - nxt_side)
                output.append((cx + t * (nx - cx), cy + t * (ny - cy)))
    return output


def _shoelace_area(poly: list[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    total = 0.0
    for k in range(len(poly)):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % len(poly)]
        total += x0 * y1 - x1 * y0
    return 0.5 * abs(total)


def rotated_iou(a: DetectedBox, b: DetectedBox) -> float:
    """Intersection-over-union of two oriented rectangle footprints.

    Exact for convex shapes: the intersection polygon is obtained by clipping
    one rectangle against the other, its area by the shoelace formula.
    """
    ca, cb = a.corners(), b.corners()
    # cheap reject: disjoint bounding circles
    ra = math.hypot(a.half_length, a.half_width)
    rb = math.hypot(b.half_length, b.half_width)
    dx = a.center.x - b.center.x
    dy = a.center.y - b.center.y
    if math.hypot(dx, dy) > ra + rb:
        return 0.0
    inter = _shoelace_area(_clip_polygon(ca, cb))
    if inter <= 0.0:
        return 0.0
    union = a.area() + b.area() - inter
    return min(1.0, inter / union)
