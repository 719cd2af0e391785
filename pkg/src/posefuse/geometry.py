"""Rotations, viewsphere sampling, and pose-error metrics.

All rotations are 3x3 row-major orthonormal matrices with determinant +1.
Distances between rotations use the angular (geodesic) metric normalized
to [0, 1], where 1 corresponds to a 180 degree rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-6
_ACOS_CLAMP = 1.0  # arccos argument clamped to [-1, 1]; float drift can exceed by ~1e-7
_MAX_VIEW_COUNT = 10 ** 6
_MAX_SUBDIVISION = 8
_SPHERE_CACHE: dict[int, np.ndarray] = {}


@dataclass(frozen=True)
class Rotation3:
    """A rotation of 3-space, stored as a row-major 3x3 matrix."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        if not np.allclose(m @ m.T, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ValueError("matrix is not orthonormal within 1e-6")
        if abs(np.linalg.det(m) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("matrix determinant is not +1 within 1e-6")

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(np.eye(3))

    def as_flat(self) -> list[float]:
        """Row-major 9-float serialization."""
        return [float(v) for v in self.m.reshape(9)]

    @staticmethod
    def from_flat(values) -> "Rotation3":
        return Rotation3(np.asarray(values, dtype=np.float64).reshape(3, 3))


@dataclass(frozen=True)
class Pose:
    """Rigid transform from object coordinates to camera coordinates.

    Translation is optional; rotation-only datasets leave it None.
    """

    rotation: Rotation3
    translation: np.ndarray | None = None

    def __post_init__(self):
        if self.translation is not None:
            t = np.array(self.translation, dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(t)):
                raise ValueError("translation must be finite")
            t.setflags(write=False)
            object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str = ""

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("class id must be non-negative")


def geodesic_distance(r1: Rotation3, r2: Rotation3) -> float:
    """Angular distance between two rotations, normalized to [0, 1]."""
    trace = float(np.trace(r1.m.T @ r2.m))
    arg = (trace - 1.0) / 2.0
    arg = max(-_ACOS_CLAMP, min(_ACOS_CLAMP, arg))
    return math.acos(arg) / math.pi


def acc_at_threshold(pred_class: ClassLabel, pred_rot: Rotation3,
                     gt_class: ClassLabel, gt_rot: Rotation3,
                     lambda_deg: float = 15.0) -> int:
    """1 iff the predicted class is right and the angle error is under lambda_deg."""
    if not 0.0 < lambda_deg <= 180.0:
        raise ValueError("lambda_deg must be in (0, 180]")
    if pred_class.id != gt_class.id:
        return 0
    return 1 if geodesic_distance(pred_rot, gt_rot) < lambda_deg / 180.0 else 0


def compose(r1: Rotation3, r2: Rotation3) -> Rotation3:
    """Rotation applying r2 first, then r1 (matrix product r1 @ r2)."""
    return Rotation3(r1.m @ r2.m)


def inverse(r: Rotation3) -> Rotation3:
    return Rotation3(r.m.T.copy())


def from_axis_angle(axis, angle: float) -> Rotation3:
    """Rodrigues rotation about a unit axis by `angle` radians."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = float(np.linalg.norm(axis))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"axis must be unit length, got norm {norm}")
    x, y, z = axis
    k = np.array([[0.0, -z, y],
                  [z, 0.0, -x],
                  [-y, x, 0.0]])
    m = np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)
    return Rotation3(m)


def random_rotation(seed: int) -> Rotation3:
    """Uniform random rotation, deterministic per seed.

    Draws a quaternion from an isotropic Gaussian and normalizes it, which
    is uniform on SO(3).
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    m = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Rotation3(m)


# --- viewsphere sampling -------------------------------------------------

def _polar_icosahedron() -> tuple[list[np.ndarray], list[tuple[int, int, int]]]:
    # Orientation with vertices on both poles; the level-3 subdivision of
    # this solid puts exactly 40 vertices on the equator and 301 strictly
    # above it.
    verts = [np.array([0.0, 0.0, 1.0])]
    z_ring = 1.0 / math.sqrt(5.0)
    r_ring = 2.0 / math.sqrt(5.0)
    for k in range(5):
        th = 2.0 * math.pi * k / 5.0
        verts.append(np.array([r_ring * math.cos(th), r_ring * math.sin(th), z_ring]))
    for k in range(5):
        th = 2.0 * math.pi * k / 5.0 + math.pi / 5.0
        verts.append(np.array([r_ring * math.cos(th), r_ring * math.sin(th), -z_ring]))
    verts.append(np.array([0.0, 0.0, -1.0]))
    faces = []
    for k in range(5):
        nxt = (k + 1) % 5
        faces.append((0, 1 + k, 1 + nxt))
        faces.append((11, 6 + k, 6 + nxt))
        faces.append((1 + k, 6 + k, 1 + nxt))
        faces.append((1 + nxt, 6 + k, 6 + nxt))
    return verts, faces


def _subdivide(verts, faces):
    verts = list(verts)
    midpoint_cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        cached = midpoint_cache.get(key)
        if cached is not None:
            return cached
        m = verts[i] + verts[j]
        m = m / np.linalg.norm(m)
        verts.append(m)
        midpoint_cache[key] = len(verts) - 1
        return midpoint_cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return verts, new_faces


def _sphere_vertices(level: int) -> np.ndarray:
    cached = _SPHERE_CACHE.get(level)
    if cached is None:
        verts, faces = _polar_icosahedron()
        for _ in range(level):
            verts, faces = _subdivide(verts, faces)
        cached = np.array(verts)
        cached.setflags(write=False)
        _SPHERE_CACHE[level] = cached
    return cached


def _viewpoint_rotation(direction: np.ndarray) -> Rotation3:
    """Camera rotation for a camera on `direction` looking at the origin.

    Rows are the camera axes in world coordinates (x right, y down,
    z toward the object). World +z serves as the up reference, with +x as
    the fallback at the poles.
    """
    z_cam = -direction / np.linalg.norm(direction)
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(up, z_cam))) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    x_cam = np.cross(up, z_cam)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    return Rotation3(np.stack([x_cam, y_cam, z_cam]))


def _inplane_rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def viewsphere_candidate_counts(upper_hemisphere_only: bool) -> list[tuple[int, int]]:
    """(subdivision_level, viewpoint_count) pairs, level -1 being the bare pole.

    Closed forms for the polar icosahedron: total vertices 10*4^L + 2,
    equator ring 10*2^(L-1) for L >= 1 (empty at L=0), strictly-above
    count = (total - equator) / 2.
    """
    counts = [(-1, 1)]
    for level in range(_MAX_SUBDIVISION + 1):
        total = 10 * 4 ** level + 2
        if upper_hemisphere_only:
            equator = 10 * 2 ** (level - 1) if level >= 1 else 0
            counts.append((level, (total - equator) // 2))
        else:
            counts.append((level, total))
    return counts


def sample_viewsphere(count_hint: int, upper_hemisphere_only: bool = True,
                      inplane_steps: int = 1) -> list[Rotation3]:
    """Approximately uniform viewpoint rotations from a subdivided icosahedron.

    The achievable counts are the icosahedron subdivision sizes (plus the
    degenerate single top-pole view) times `inplane_steps`; the nearest one
    to `count_hint` is returned. Ties prefer the smaller count. Output is
    deterministic: identical inputs yield bitwise-identical matrices.
    """
    if count_hint < 1:
        raise ValueError("count_hint must be >= 1")
    if inplane_steps < 1:
        raise ValueError("inplane_steps must be >= 1")
    if count_hint > _MAX_VIEW_COUNT:
        raise ValueError(f"count_hint {count_hint} exceeds the {_MAX_VIEW_COUNT} guard")

    best_level, best_total = None, None
    for level, n_views in viewsphere_candidate_counts(upper_hemisphere_only):
        total = n_views * inplane_steps
        if best_total is None or abs(total - count_hint) < abs(best_total - count_hint):
            best_level, best_total = level, total
    return viewsphere_level(best_level, upper_hemisphere_only, inplane_steps)


def viewsphere_level(level: int, upper_hemisphere_only: bool = True,
                     inplane_steps: int = 1) -> list[Rotation3]:
    """All views of one subdivision level; level -1 is the top pole alone."""
    if level < 0:
        directions = np.array([[0.0, 0.0, 1.0]])
    else:
        verts = _sphere_vertices(level)
        if upper_hemisphere_only:
            verts = verts[verts[:, 2] > 1e-9]
        # stable ordering: by descending z, then angle around the pole
        order = np.lexsort((np.arctan2(verts[:, 1], verts[:, 0]), -verts[:, 2]))
        directions = verts[order]
    rotations = []
    for direction in directions:
        base = _viewpoint_rotation(direction)
        for k in range(inplane_steps):
            roll = _inplane_rotation(2.0 * math.pi * k / inplane_steps)
            rotations.append(Rotation3(roll @ base.m))
    return rotations


# --- translation from bounding boxes -------------------------------------

def estimate_translation(query_bbox, template_bbox, template_tz: float,
                         intrinsics) -> np.ndarray:
    """Translation of the query object from bbox scale and pinhole geometry.

    Depth scales inversely with the bbox diagonal ratio; x/y come from
    back-projecting the query bbox center at that depth. Boxes are
    (x0, y0, x1, y1) pixel rectangles.
    """
    if template_tz <= 0:
        raise ValueError("template_tz must be positive")
    k = np.asarray(intrinsics, dtype=np.float64).reshape(3, 3)

    def _diag_center(bbox):
        x0, y0, x1, y1 = (float(v) for v in bbox)
        diag = math.hypot(x1 - x0, y1 - y0)
        return diag, (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    query_diag, (cx, cy) = _diag_center(query_bbox)
    template_diag, _ = _diag_center(template_bbox)
    if query_diag <= 0.0 or template_diag <= 0.0:
        raise ValueError("bounding box has zero diagonal")

    tz = template_tz * (template_diag / query_diag)
    tx = (cx - k[0, 2]) * tz / k[0, 0]
    ty = (cy - k[1, 2]) * tz / k[1, 1]
    return np.array([tx, ty, tz])
