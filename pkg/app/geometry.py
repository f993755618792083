"""
SE(2) poses, BEV grids, rigid feature warps and rotated-box overlap.

Frames: every agent observes the world in its body frame, x forward and y to the
left. A GridSpec lays cells over a body frame with rows running along +y and
columns along +x; cell (r, c) has its centre at
(x_min + (c + 0.5) * cell, y_min + (r + 0.5) * cell).
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from app import tensor as T
from app.tensor import Tensor
from app.util import ConfigError

logger = logging.getLogger(__name__)

CLIP_EPS = 1e-9


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = (self.x, self.y)
        return m

    def compose(self, other: "Pose2D") -> "Pose2D":
        """self * other: other is expressed in self's frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            self.x + (c * other.x - s * other.y),
            self.y + (s * other.x + c * other.y),
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Body-frame points [..., 2] to the parent frame."""
        return points @ self.rotation().T + np.array([self.x, self.y])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Parent-frame points [..., 2] to this body frame."""
        return (points - np.array([self.x, self.y])) @ self.rotation()


def relative_pose(ego: Pose2D, aux: Pose2D) -> tuple[float, float]:
    """Distance to aux and bearing of aux in the ego body frame."""
    dx, dy = aux.x - ego.x, aux.y - ego.y
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return math.hypot(dx, dy), normalize_angle(math.atan2(local_y, local_x))


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float
    width: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self):
        if self.cell <= 0 or self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ConfigError(f"invalid grid extents {self}")
        width = (self.x_max - self.x_min) / self.cell
        height = (self.y_max - self.y_min) / self.cell
        for extent, label in ((width, "x"), (height, "y")):
            if abs(extent - round(extent)) > 1e-6:
                raise ConfigError(
                    f"grid {label} range is not a whole number of {self.cell} m cells"
                )
        object.__setattr__(self, "width", int(round(width)))
        object.__setattr__(self, "height", int(round(height)))

    @property
    def H(self) -> int:  # noqa: N802
        return self.height

    @property
    def W(self) -> int:  # noqa: N802
        return self.width

    @property
    def origin_cells(self) -> tuple[float, float]:
        """Body-frame origin in cell units (column, row)."""
        return -self.x_min / self.cell, -self.y_min / self.cell

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        cols = self.x_min + (np.arange(self.width) + 0.5) * self.cell
        rows = self.y_min + (np.arange(self.height) + 0.5) * self.cell
        xs, ys = np.meshgrid(cols, rows)
        return xs, ys

    def to_cell(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) indices, integer at cell centres."""
        return (
            (np.asarray(y) - self.y_min) / self.cell - 0.5,
            (np.asarray(x) - self.x_min) / self.cell - 0.5,
        )

    def contains(self, x, y) -> np.ndarray:
        x, y = np.asarray(x), np.asarray(y)
        return (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)

    def describe(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "y_min": self.y_min,
            "y_max": self.y_max,
            "cell": self.cell,
        }


def warp_feature(
    src: Tensor, src_pose: Pose2D, dst_pose: Pose2D, grid: GridSpec
) -> tuple[Tensor, np.ndarray]:
    """Resample a feature map laid out in src_pose's frame onto dst_pose's frame.

    Returns the warped map and the in-bounds mask of the bilinear taps.
    """
    rel = src_pose.inverse().compose(dst_pose)
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    ox, oy = grid.origin_cells
    # affine map in cell units: u_src = R u_dst + (o - R o + t / cell)
    shift_x = ox - (c * ox - s * oy) + rel.x / grid.cell
    shift_y = oy - (s * ox + c * oy) + rel.y / grid.cell
    u = np.arange(grid.width, dtype=np.float64)[None, :] + 0.5
    v = np.arange(grid.height, dtype=np.float64)[:, None] + 0.5
    cols = (c * u - s * v) + shift_x - 0.5
    rows = (s * u + c * v) + shift_y - 0.5
    return T.bilinear_sample(src, rows, cols)


#
# Rotated boxes
#


@dataclass(frozen=True)
class RotatedBox:
    """BEV box; l runs along the heading, w across it."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float  # noqa: E741
    h: float
    yaw: float
    score: float | None = None

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ConfigError(f"box extents must be positive: {self}")
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def area(self) -> float:
        return self.w * self.l

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw])

    def with_score(self, score: float) -> "RotatedBox":
        return replace(self, score=float(score))


def box_corners(box: RotatedBox) -> np.ndarray:
    """Four BEV corners [4, 2] in counter-clockwise order."""
    half_l, half_w = box.l / 2.0, box.w / 2.0
    local = np.array(
        [[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]]
    )
    return Pose2D(box.cx, box.cy, box.yaw).transform_points(local)


def box_to_frame(box: RotatedBox, from_pose: Pose2D, to_pose: Pose2D) -> RotatedBox:
    """Re-express a box given in from_pose's body frame in to_pose's body frame."""
    rel = to_pose.inverse().compose(from_pose)
    center = rel.transform_points(np.array([box.cx, box.cy]))
    return replace(box, cx=float(center[0]), cy=float(center[1]), yaw=box.yaw + rel.yaw)


def polygon_area(points: np.ndarray) -> float:
    if len(points) < 3:
        return 0.0
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: list[np.ndarray], a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Keep the part of subject on the left of the directed edge a->b."""
    edge = b - a

    def side(p):
        return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

    out = []
    for i, current in enumerate(subject):
        previous = subject[i - 1]
        s_cur, s_prev = side(current), side(previous)
        if s_cur >= -CLIP_EPS:
            if s_prev < -CLIP_EPS:
                out.append(_intersect(previous, current, s_prev, s_cur))
            out.append(current)
        elif s_prev >= -CLIP_EPS:
            out.append(_intersect(previous, current, s_prev, s_cur))
    return out


def _intersect(p, q, s_p, s_q):
    t = s_p / (s_p - s_q)
    return p + t * (q - p)


def _box_key(box: RotatedBox) -> tuple:
    return (box.cx, box.cy, box.w, box.l, box.yaw)


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    """BEV IoU of two rotated boxes by convex polygon clipping."""
    if _box_key(b) < _box_key(a):
        a, b = b, a
    reach = 0.5 * (math.hypot(a.w, a.l) + math.hypot(b.w, b.l))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > reach:
        return 0.0
    clip = box_corners(b)
    polygon = list(box_corners(a))
    for i in range(4):
        polygon = _clip(polygon, clip[i], clip[(i + 1) % 4])
        if not polygon:
            return 0.0
    inter = polygon_area(np.array(polygon))
    if inter <= CLIP_EPS:
        return 0.0
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_matrix(boxes_a: list[RotatedBox], boxes_b: list[RotatedBox]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not boxes_a or not boxes_b:
        return out
    centers_a = np.array([[b.cx, b.cy] for b in boxes_a])
    centers_b = np.array([[b.cx, b.cy] for b in boxes_b])
    radius_a = np.array([math.hypot(b.w, b.l) / 2 for b in boxes_a])
    radius_b = np.array([math.hypot(b.w, b.l) / 2 for b in boxes_b])
    dist = np.linalg.norm(centers_a[:, None, :] - centers_b[None, :, :], axis=-1)
    for i, j in zip(*np.nonzero(dist <= radius_a[:, None] + radius_b[None, :])):
        out[i, j] = rotated_iou(boxes_a[i], boxes_b[j])
    return out
