"""Analytic scenes: exact unsigned-distance oracles, surface sampling, and
single-view synthetic clouds with a depth-discontinuity tail injector."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud

HIT_THRESHOLD = 1e-7     # sphere-tracing surface contact
MAX_TRACE_STEPS = 512
MAX_RAY_LENGTH = 8.0
PLANE_PATCH_HALF = 1.0   # planes are sampled on a 2x2 patch around the origin projection


class SceneParseError(Exception):
    """Malformed scene description file."""


class MissingAdjacencyError(Exception):
    """Tail injection needs the per-pixel depth map from render_visible_cloud."""


class Primitive:
    """Analytic solid with an exact unsigned distance to its boundary."""

    def distances(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def area(self) -> float:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Sphere(Primitive):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def distances(self, x):
        return np.abs(np.linalg.norm(x - self.center, axis=-1) - self.radius)

    def contains(self, x):
        return np.linalg.norm(x - self.center, axis=-1) < self.radius

    def area(self):
        return 4.0 * math.pi * self.radius ** 2

    def sample(self, n, rng):
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.center + self.radius * dirs


@dataclass
class Box(Primitive):
    """Axis-aligned box given by its center and positive half-extents."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise ValueError("box half-extents must be positive")

    def distances(self, x):
        q = np.abs(x - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return np.abs(outside + inside)

    def contains(self, x):
        q = np.abs(x - self.center) - self.half_extents
        return q.max(axis=-1) < 0.0

    def area(self):
        ex, ey, ez = self.half_extents
        return 8.0 * (ex * ey + ey * ez + ex * ez)

    def sample(self, n, rng):
        ex, ey, ez = self.half_extents
        # six faces, weighted by area; +/-x, +/-y, +/-z
        face_areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
        face_areas = face_areas / face_areas.sum()
        faces = rng.choice(6, size=n, p=face_areas)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        for f in range(6):
            m = faces == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = sign * self.half_extents[axis]
            pts[m, others[0]] = uv[m, 0] * self.half_extents[others[0]]
            pts[m, others[1]] = uv[m, 1] * self.half_extents[others[1]]
        return self.center + pts


@dataclass
class Plane(Primitive):
    """Infinite plane n . x = offset with unit normal n. Has no interior."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(self.normal)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError("plane normal must be unit length within 1e-12")

    def distances(self, x):
        return np.abs(x @ self.normal - self.offset)

    def contains(self, x):
        return np.zeros(np.asarray(x).shape[:-1], dtype=bool)

    def area(self):
        return (2.0 * PLANE_PATCH_HALF) ** 2

    def sample(self, n, rng):
        t1, t2 = _plane_basis(self.normal)
        origin = self.offset * self.normal
        uv = rng.uniform(-PLANE_PATCH_HALF, PLANE_PATCH_HALF, size=(n, 2))
        return origin + uv[:, :1] * t1 + uv[:, 1:] * t2


@dataclass
class Capsule(Primitive):
    """Segment from a to b inflated by radius r."""

    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")
        if np.allclose(self.a, self.b):
            raise ValueError("capsule endpoints must differ")

    def _segment_distance(self, x):
        ab = self.b - self.a
        t = np.clip(((x - self.a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = self.a + t[..., None] * ab
        return np.linalg.norm(x - closest, axis=-1)

    def distances(self, x):
        return np.abs(self._segment_distance(x) - self.radius)

    def contains(self, x):
        return self._segment_distance(x) < self.radius

    def area(self):
        length = np.linalg.norm(self.b - self.a)
        return 2.0 * math.pi * self.radius * length + 4.0 * math.pi * self.radius ** 2

    def sample(self, n, rng):
        length = float(np.linalg.norm(self.b - self.a))
        axis = (self.b - self.a) / length
        t1, t2 = _plane_basis(axis)
        side_area = 2.0 * math.pi * self.radius * length
        p_side = side_area / self.area()
        on_side = rng.uniform(size=n) < p_side
        pts = np.empty((n, 3))
        k = int(on_side.sum())
        theta = rng.uniform(0.0, 2.0 * math.pi, size=k)
        h = rng.uniform(0.0, length, size=k)
        rim = self.radius * (np.cos(theta)[:, None] * t1 + np.sin(theta)[:, None] * t2)
        pts[on_side] = self.a + h[:, None] * axis + rim
        m = n - k
        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cap_b = rng.uniform(size=m) < 0.5
        axial = dirs @ axis
        # mirror into the outward hemisphere of the chosen cap
        flip = np.where(cap_b, np.sign(axial) < 0, np.sign(axial) > 0)
        dirs[flip] -= 2.0 * axial[flip, None] * axis
        ends = np.where(cap_b[:, None], self.b, self.a)
        pts[~on_side] = ends + self.radius * dirs
        return pts


def _plane_basis(normal):
    """Two orthonormal vectors spanning the plane orthogonal to normal."""
    ref = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(normal, ref)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return t1, t2


@dataclass
class Scene:
    """Union of primitives; exact unsigned distance is the min over members."""

    primitives: list
    name: str = "scene"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def distances(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.min([p.distances(x) for p in self.primitives], axis=0)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.any([p.contains(x) for p in self.primitives], axis=0)


def exact_distance(scene: Scene, x) -> float:
    """Exact unsigned distance from a single point to the scene surface."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise ValueError("query must be a finite 3-vector")
    return float(scene.distances(x))


def sample_surface(scene: Scene, count: int, seed: int = 0) -> PointCloud:
    """Sample count on-surface points, allocated area-proportionally per primitive."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = np.array([p.area() for p in scene.primitives])
    weights = areas / areas.sum()
    counts = _apportion(count, weights)
    chunks = [p.sample(c, rng) for p, c in zip(scene.primitives, counts) if c > 0]
    return PointCloud(np.vstack(chunks))


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of total by weights; deterministic on ties."""
    raw = weights * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


# ---------------------------------------------------------------------------
# single-view rendering

@dataclass
class CameraView:
    """Pinhole view: position, look-at target, horizontal fov (radians), (w, h) pixels."""

    position: np.ndarray
    look_at: np.ndarray
    fov: float = math.pi / 3
    resolution: tuple = (160, 120)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position must differ from look-at point")
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")


@dataclass
class RenderedView:
    """Visible-surface cloud plus the per-pixel depth map it came from."""

    cloud: PointCloud
    depth: np.ndarray          # (h, w) ray-length to first hit, +inf on miss
    view: CameraView
    start_inside: bool = False


def _pixel_rays(view: CameraView):
    """Unit ray directions through every pixel center, shape (h, w, 3)."""
    w, h = view.resolution
    forward = view.look_at - view.position
    forward = forward / np.linalg.norm(forward)
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_hint) > 0.999:
        up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    half_w = math.tan(view.fov / 2.0)
    half_h = half_w * h / w
    us = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * half_w
    vs = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * half_h
    dirs = (forward[None, None, :]
            + us[None, :, None] * right[None, None, :]
            + vs[:, None, None] * up[None, None, :])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs


def render_visible_cloud(scene: Scene, view: CameraView, count: int,
                         seed: int = 0) -> RenderedView:
    """Sphere-trace one ray per pixel and keep first hits only.

    Occluded regions and backfaces never appear. If more pixels hit than count,
    a seeded subsample (in scan order) is returned; fewer hits are returned
    as-is. A camera placed inside scene geometry is flagged in the result.
    """
    dirs = _pixel_rays(view)
    h, w = dirs.shape[:2]
    flat_dirs = dirs.reshape(-1, 3)
    n_rays = len(flat_dirs)
    t = np.zeros(n_rays)
    hit = np.zeros(n_rays, dtype=bool)
    active = np.ones(n_rays, dtype=bool)
    for _ in range(MAX_TRACE_STEPS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pts = view.position + t[idx, None] * flat_dirs[idx]
        d = scene.distances(pts)
        landed = d < HIT_THRESHOLD
        hit[idx[landed]] = True
        active[idx[landed]] = False
        t[idx[~landed]] += d[~landed]
        overshot = t[idx] > MAX_RAY_LENGTH
        active[idx[overshot]] = False
    depth = np.where(hit, t, np.inf).reshape(h, w)
    hit_idx = np.flatnonzero(hit)
    points = view.position + t[hit_idx, None] * flat_dirs[hit_idx]
    points = _project_to_surface(scene, points)
    if len(hit_idx) > count:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(hit_idx), size=count, replace=False))
        points = points[keep]
    start_inside = bool(scene.contains(view.position[None, :])[0])
    cloud = PointCloud(points) if len(points) else PointCloud(np.zeros((0, 3)))
    return RenderedView(cloud, depth, view, start_inside)


def _project_to_surface(scene: Scene, pts: np.ndarray, iters: int = 6,
                        h: float = 1e-7) -> np.ndarray:
    """Pull near-surface points onto the surface along the local distance gradient.

    Marching stops at HIT_THRESHOLD (1e-7); two or three projection steps bring
    the residual below 1e-9 while moving each point by at most the threshold.
    """
    if len(pts) == 0:
        return pts
    pts = pts.copy()
    for _ in range(iters):
        d = scene.distances(pts)
        grad = np.empty_like(pts)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            grad[:, axis] = (scene.distances(pts + step) - scene.distances(pts - step)) / (2 * h)
        norms = np.linalg.norm(grad, axis=1)
        ok = norms > 1e-9
        pts[ok] -= (d[ok] / norms[ok])[:, None] * grad[ok]
    return pts


def inject_frustum_tails(rendered: RenderedView, edge_threshold: float = 0.05,
                         density: float = 0.3) -> PointCloud:
    """Append spurious points along view rays at depth discontinuities.

    Wherever two adjacent pixels both hit and their depths differ by more than
    edge_threshold, points are interpolated along the background pixel's ray at
    depths strictly between the two surfaces, int(density * gap / threshold)
    per edge. The input points are always preserved; added points sit in free
    space off both surfaces, which is what makes them harmful to motion
    generation downstream.
    """
    if not isinstance(rendered, RenderedView):
        raise MissingAdjacencyError(
            "tail injection requires the RenderedView from render_visible_cloud")
    if edge_threshold <= 0:
        raise ValueError("edge_threshold must be positive")
    if not 0.0 <= density:
        raise ValueError("density must be nonnegative")
    depth = rendered.depth
    dirs = _pixel_rays(rendered.view)
    pos = rendered.view.position
    tails = []

    def emit(d_a, d_b, ray_far):
        near, far = (d_a, d_b) if d_a < d_b else (d_b, d_a)
        gap = far - near
        n = int(density * gap / edge_threshold)
        if n <= 0:
            return
        fracs = np.arange(1, n + 1) / (n + 1)
        depths = near + fracs * gap
        tails.append(pos + depths[:, None] * ray_far)

    for axis in (0, 1):
        a = depth if axis == 0 else depth.T
        d0 = a[:, :-1]
        d1 = a[:, 1:]
        mask = np.isfinite(d0) & np.isfinite(d1) & (np.abs(d0 - d1) > edge_threshold)
        rows, cols = np.nonzero(mask)
        for r, c in zip(rows, cols):
            da, db = d0[r, c], d1[r, c]
            far_col = c if da > db else c + 1
            ray = dirs[r, far_col] if axis == 0 else dirs[far_col, r]
            emit(da, db, ray)

    if not tails:
        return rendered.cloud
    added = np.vstack(tails)
    return PointCloud(np.vstack([rendered.cloud.points, added]))


# ---------------------------------------------------------------------------
# scene description files

_PRIMITIVE_KEYS = {
    "sphere": ("center", "radius"),
    "box": ("center", "half_extents"),
    "plane": ("normal", "offset"),
    "capsule": ("a", "b", "radius"),
}


def scene_from_dict(spec: dict) -> Scene:
    prims = []
    for i, entry in enumerate(spec.get("primitives", [])):
        kind = entry.get("type")
        if kind not in _PRIMITIVE_KEYS:
            raise SceneParseError(f"primitive {i}: unknown type {kind!r}")
        missing = [k for k in _PRIMITIVE_KEYS[kind] if k not in entry]
        if missing:
            raise SceneParseError(f"primitive {i} ({kind}): missing {missing}")
        kwargs = {k: entry[k] for k in _PRIMITIVE_KEYS[kind]}
        cls = {"sphere": Sphere, "box": Box, "plane": Plane, "capsule": Capsule}[kind]
        try:
            prims.append(cls(**kwargs))
        except ValueError as err:
            raise SceneParseError(f"primitive {i} ({kind}): {err}")
    if not prims:
        raise SceneParseError("scene file declares no primitives")
    return Scene(prims, name=spec.get("name", "scene"))


def scene_to_dict(scene: Scene) -> dict:
    out = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            out.append({"type": "sphere", "center": list(p.center), "radius": p.radius})
        elif isinstance(p, Box):
            out.append({"type": "box", "center": list(p.center),
                        "half_extents": list(p.half_extents)})
        elif isinstance(p, Plane):
            out.append({"type": "plane", "normal": list(p.normal), "offset": p.offset})
        elif isinstance(p, Capsule):
            out.append({"type": "capsule", "a": list(p.a), "b": list(p.b),
                        "radius": p.radius})
    return {"name": scene.name, "primitives": out}


def load_scene(path):
    """Read a scene JSON file; returns (Scene, CameraView or None)."""
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise SceneParseError(f"invalid JSON in {path}: {err}")
    scene = scene_from_dict(spec)
    view = None
    if "view" in spec:
        v = spec["view"]
        try:
            view = CameraView(np.asarray(v["position"], dtype=float),
                              np.asarray(v["look_at"], dtype=float),
                              float(v.get("fov", math.pi / 3)),
                              tuple(v.get("resolution", (160, 120))))
        except (KeyError, ValueError) as err:
            raise SceneParseError(f"invalid view block in {path}: {err}")
    return scene, view
