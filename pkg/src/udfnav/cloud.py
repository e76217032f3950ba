"""Point cloud container, file I/O, KD-tree queries, normalization and rigid alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class CloudError(Exception):
    """Base class for point-cloud failures."""


class CloudParseError(CloudError):
    """Malformed cloud file. Carries a line number (text) or byte offset (binary)."""

    def __init__(self, message, line=None, offset=None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif offset is not None:
            loc = f" (byte offset {offset})"
        super().__init__(message + loc)
        self.line = line
        self.offset = offset


class EmptyCloudError(CloudError):
    """No points survived loading/filtering."""


class ZeroExtentError(CloudError):
    """Cloud has zero spatial extent and cannot be normalized."""


class AlignmentError(CloudError):
    """ICP hit a degenerate correspondence covariance. Keeps the last valid transform."""

    def __init__(self, message, last_transform=None):
        super().__init__(message)
        self.last_transform = last_transform


@dataclass
class PointCloud:
    """N surface samples with optional per-point color and confidence.

    points has shape (N, 3); colors, when present, is (N, 3) with values in
    [0, 1]; confidence is (N,) nonnegative.
    """

    points: np.ndarray
    colors: np.ndarray | None = None
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.points.shape:
                raise ValueError("colors must match points in length")
            if np.any(self.colors < 0) or np.any(self.colors > 1):
                raise ValueError("colors must lie in [0, 1]")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != (len(self.points),):
                raise ValueError("confidence must match points in length")
            if np.any(self.confidence < 0):
                raise ValueError("confidence must be nonnegative")

    def __len__(self):
        return len(self.points)

    def select(self, mask_or_indices) -> "PointCloud":
        """New cloud restricted to the given boolean mask or index array."""
        return PointCloud(
            self.points[mask_or_indices],
            None if self.colors is None else self.colors[mask_or_indices],
            None if self.confidence is None else self.confidence[mask_or_indices],
        )


@dataclass
class RigidTransform:
    """Proper rigid motion y = R x + t. Validated on construction."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


class SpatialIndex:
    """Balanced KD-tree over a cloud's points; immutable after construction.

    Queries are exact: results agree with a brute-force linear scan. The
    index-returning path breaks exact distance ties toward the lowest index.
    """

    def __init__(self, cloud_or_points):
        pts = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else cloud_or_points
        pts = np.array(pts, dtype=np.float64, order="C")  # private copy
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("index requires a nonempty (N, 3) point set")
        self.points = pts
        self.points.setflags(write=False)
        self._tree = cKDTree(pts, balanced_tree=True)

    def __len__(self):
        return len(self.points)

    def nearest_distance(self, query) -> float:
        """Exact Euclidean distance from query to the nearest indexed point."""
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (3,) or not np.all(np.isfinite(q)):
            raise ValueError("query must be a finite 3-vector")
        d, _ = self._tree.query(q)
        return float(d)

    def distances(self, queries: np.ndarray, workers: int = -1) -> np.ndarray:
        """Nearest distances for a (M, 3) query batch, ordered by input index."""
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3 or not np.all(np.isfinite(q)):
            raise ValueError("queries must be a finite (M, 3) array")
        d, _ = self._tree.query(q, workers=workers)
        return d

    def nearest(self, queries: np.ndarray, workers: int = -1):
        """(distances, indices) of nearest points; ties resolved to lowest index."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        d, idx = self._tree.query(q, workers=workers)
        # k=1 query returns some tied index; rewrite ties deterministically
        for row, dist in enumerate(d):
            cand = self._tree.query_ball_point(q[row], dist)
            if len(cand) > 1:
                exact = [c for c in cand if np.linalg.norm(self.points[c] - q[row]) == dist]
                if exact:
                    idx[row] = min(exact)
        return d, idx


# ---------------------------------------------------------------------------
# loading / saving

_PLY_DTYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_cloud(path, confidence_threshold: float | None = None) -> PointCloud:
    """Load a cloud from .xyz or .ply, dropping points below the confidence threshold.

    Points without a confidence channel, or loads without a threshold, are kept
    unconditionally. Survivor order matches the input file.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        cloud = _load_ply(path)
    elif suffix in (".xyz", ".txt"):
        cloud = _load_xyz(path)
    else:
        raise CloudParseError(f"unsupported cloud format '{suffix}'")
    if confidence_threshold is not None and cloud.confidence is not None:
        cloud = cloud.select(cloud.confidence >= confidence_threshold)
    if len(cloud) == 0:
        raise EmptyCloudError(f"no points survived loading {path}")
    return cloud


def _load_xyz(path: Path) -> PointCloud:
    rows = []
    ncols = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise CloudParseError(f"non-numeric field in '{line}'", line=lineno)
            if len(vals) not in (3, 4, 6, 7):
                raise CloudParseError(
                    f"expected 3, 4, 6 or 7 columns, got {len(vals)}", line=lineno)
            if ncols is None:
                ncols = len(vals)
            elif len(vals) != ncols:
                raise CloudParseError(
                    f"inconsistent column count ({len(vals)} vs {ncols})", line=lineno)
            rows.append(vals)
    if not rows:
        raise EmptyCloudError(f"{path} contains no points")
    data = np.asarray(rows, dtype=np.float64)
    points = data[:, :3]
    colors = conf = None
    if ncols in (6, 7):
        colors = data[:, 3:6]
        if colors.max(initial=0.0) > 1.0:  # tolerate 0..255 color encoding
            colors = colors / 255.0
    if ncols == 4:
        conf = data[:, 3]
    elif ncols == 7:
        conf = data[:, 6]
    return PointCloud(points, colors, conf)


def _load_ply(path: Path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        header_end = blob.index(b"end_header\n") + len(b"end_header\n")
    except ValueError:
        raise CloudParseError("missing end_header", offset=len(blob))
    header_lines = blob[:header_end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0].strip() != "ply":
        raise CloudParseError("not a PLY file", line=1)

    fmt = None
    n_vertices = None
    props = []  # (name, numpy dtype code) in declaration order
    in_vertex = False
    for lineno, line in enumerate(header_lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] == "vertex":
                in_vertex = True
                n_vertices = int(tok[2])
            else:
                in_vertex = False
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise CloudParseError("list properties on vertices unsupported", line=lineno)
            if tok[1] not in _PLY_DTYPES:
                raise CloudParseError(f"unknown property type '{tok[1]}'", line=lineno)
            props.append((tok[2], _PLY_DTYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudParseError(f"unsupported PLY format '{fmt}'", line=2)
    if n_vertices is None:
        raise CloudParseError("no vertex element", line=len(header_lines))
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise CloudParseError(f"vertex element lacks property '{axis}'")

    if fmt == "ascii":
        body = blob[header_end:].decode("ascii", errors="replace").splitlines()
        rows = []
        for k in range(n_vertices):
            if k >= len(body):
                raise CloudParseError("vertex data truncated",
                                      line=len(header_lines) + k + 1)
            parts = body[k].split()
            if len(parts) != len(props):
                raise CloudParseError(
                    f"expected {len(props)} vertex fields, got {len(parts)}",
                    line=len(header_lines) + k + 1)
            rows.append([float(p) for p in parts])
        table = np.asarray(rows, dtype=np.float64)
        columns = {name: table[:, i] for i, (name, _) in enumerate(props)}
    else:
        dtype = np.dtype([(name, "<" + code) for name, code in props])
        expected = n_vertices * dtype.itemsize
        payload = blob[header_end:header_end + expected]
        if len(payload) < expected:
            raise CloudParseError("binary vertex data truncated",
                                  offset=header_end + len(payload))
        rec = np.frombuffer(payload, dtype=dtype, count=n_vertices)
        columns = {name: rec[name].astype(np.float64) for name, _ in props}

    points = np.column_stack([columns["x"], columns["y"], columns["z"]])
    colors = None
    if all(c in columns for c in ("red", "green", "blue")):
        colors = np.column_stack([columns["red"], columns["green"], columns["blue"]])
        byte_coded = dict(props).get("red") == "u1"
        if byte_coded or colors.max(initial=0.0) > 1.0:
            colors = colors / 255.0
    conf = columns.get("confidence")
    if n_vertices == 0:
        raise EmptyCloudError(f"{path} contains no points")
    return PointCloud(points, colors, conf)


def save_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud as ASCII .xyz or binary little-endian .ply by extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".xyz", ".txt"):
        cols = [cloud.points]
        if cloud.colors is not None:
            cols.append(cloud.colors)
        if cloud.confidence is not None:
            cols.append(cloud.confidence[:, None])
        np.savetxt(path, np.hstack(cols), fmt="%.17g")
    elif suffix == ".ply":
        _save_ply(cloud, path)
    else:
        raise ValueError(f"unsupported output format '{suffix}'")


def _save_ply(cloud: PointCloud, path: Path) -> None:
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if cloud.confidence is not None:
        fields.append(("confidence", "<f8"))
        header.append("property double confidence")
    header.append("end_header")
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    if cloud.confidence is not None:
        rec["confidence"] = cloud.confidence
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def write_normalization_sidecar(path, scale: float, center: np.ndarray) -> Path:
    """Record normalization scale/center next to a cloud file (JSON)."""
    sidecar = Path(str(path) + ".meta.json")
    sidecar.write_text(json.dumps(
        {"scale": float(scale), "center": [float(c) for c in center]},
        indent=2) + "\n")
    return sidecar


# ---------------------------------------------------------------------------
# normalization

def normalize(cloud: PointCloud):
    """Map a cloud into [-1, 1]^3 by bounding-box midpoint and half max extent.

    Returns (normalized cloud, scale, center); the originals are recovered by
    denormalize (points * scale + center).
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot normalize an empty cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = (lo + hi) / 2.0
    scale = float((hi - lo).max() / 2.0)
    if scale == 0.0:
        raise ZeroExtentError("all points coincide; zero extent")
    out = PointCloud((cloud.points - center) / scale, cloud.colors, cloud.confidence)
    return out, scale, center


def denormalize(cloud: PointCloud, scale: float, center) -> PointCloud:
    """Invert normalize()."""
    center = np.asarray(center, dtype=np.float64)
    return PointCloud(cloud.points * scale + center, cloud.colors, cloud.confidence)


# ---------------------------------------------------------------------------
# cloud-to-cloud metrics

def nearest_distance(index: SpatialIndex, query) -> float:
    """Exact distance from query to the nearest point of the index."""
    return index.nearest_distance(query)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean nearest-neighbor distance between two clouds."""
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloudError("chamfer requires two nonempty clouds")
    d_ab = cKDTree(b.points).query(a.points)[0]
    d_ba = cKDTree(a.points).query(b.points)[0]
    return float(d_ab.mean() + d_ba.mean())


@dataclass
class IcpResult:
    transform: RigidTransform
    scale: float
    residual: float
    residuals: list  # mean NN distance measured at each iteration
    transforms: list  # RigidTransform after each iteration (validated)
    iterations: int


def icp_align(source: PointCloud, target: PointCloud, max_iters: int = 50,
              tol: float = 1e-9, estimate_scale: bool = False) -> IcpResult:
    """Rigid iterative-closest-point alignment of source onto target.

    Correspondences are nearest neighbors in the target; each update is the
    closed-form rigid fit from the cross-covariance SVD. Iterates until the
    mean-residual improvement drops below tol or max_iters is reached; an
    update that worsens the mean residual is rolled back before stopping, so
    the recorded residual trace is non-increasing. Scale estimation is off by
    default (both clouds are expected pre-normalized).
    """
    if len(source) == 0 or len(target) == 0:
        raise EmptyCloudError("ICP requires two nonempty clouds")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    tree = cKDTree(target.points)
    rotation = np.eye(3)
    translation = np.zeros(3)
    scale = 1.0
    prev_state = None
    residuals = []
    transforms = []
    for _ in range(max_iters + 1):
        moved = source.points @ (scale * rotation).T + translation
        dists, idx = tree.query(moved)
        res = float(dists.mean())
        if residuals and res >= residuals[-1]:
            rotation, translation, scale = prev_state
            break
        residuals.append(res)
        transforms.append(RigidTransform(rotation, translation))
        if len(residuals) >= 2 and residuals[-2] - residuals[-1] < tol:
            break
        if len(transforms) > max_iters:
            break
        prev_state = (rotation, translation, scale)
        try:
            d_rot, d_t, d_s = _rigid_fit(moved, target.points[idx], estimate_scale)
        except AlignmentError as err:
            err.last_transform = RigidTransform(rotation, translation)
            raise
        rotation = d_rot @ rotation
        translation = d_s * (d_rot @ translation) + d_t
        scale = d_s * scale
    return IcpResult(RigidTransform(rotation, translation), scale,
                     residuals[-1], residuals, transforms, len(residuals) - 1)


def _rigid_fit(src: np.ndarray, dst: np.ndarray, estimate_scale: bool):
    """Closed-form (R, t, s) minimizing sum ||s R src + t - dst||^2."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    cov = cs.T @ cd / len(src)
    u, sing, vt = np.linalg.svd(cov)
    if not np.all(np.isfinite(sing)) or sing[0] < 1e-15:
        raise AlignmentError("degenerate correspondence covariance")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rotation = vt.T @ flip @ u.T
    if estimate_scale:
        var = (cs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(sing) @ flip) / var)
    else:
        s = 1.0
    t = mu_d - s * rotation @ mu_s
    return rotation, t, s
