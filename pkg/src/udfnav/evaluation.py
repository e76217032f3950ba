"""Trajectory and reconstruction metrics plus the end-to-end experiment driver.

The discrete Frechet distance is the usual dynamic program over the pairwise
distance table; ground-truth trajectories come from running the motion policy
directly on the analytic scene distance (the oracle field)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist

from . import policy as policy_mod
from . import scenes as scenes_mod
from . import trainer as trainer_mod
from .cloud import PointCloud, chamfer, icp_align
from .field import FieldEvaluation
from .policy import PolicyConfig, TerminalStatus, Trajectory, integrate
from .scenes import CameraView, Scene, inject_frustum_tails, render_visible_cloud, sample_surface

REPORT_SCHEMA_VERSION = 1
CONTACT_TOLERANCE = 1e-6

VARIANT_FULL_VIEW = "full-view"
VARIANT_SINGLE_VIEW = "single-view"
VARIANT_SINGLE_VIEW_TAILS = "single-view+tails"
ALL_VARIANTS = (VARIANT_FULL_VIEW, VARIANT_SINGLE_VIEW, VARIANT_SINGLE_VIEW_TAILS)


@njit(cache=True)
def _frechet_table(dist):
    p, q = dist.shape
    table = np.empty((p, q))
    table[0, 0] = dist[0, 0]
    for i in range(1, p):
        table[i, 0] = max(table[i - 1, 0], dist[i, 0])
    for j in range(1, q):
        table[0, j] = max(table[0, j - 1], dist[0, j])
    for i in range(1, p):
        for j in range(1, q):
            best = min(table[i - 1, j], table[i - 1, j - 1], table[i, j - 1])
            table[i, j] = max(best, dist[i, j])
    return table


def discrete_frechet(path_a, path_b) -> float:
    """Minimum over monotone couplings of the maximum pairwise distance."""
    a = np.atleast_2d(np.asarray(path_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(path_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("paths must be nonempty")
    return float(_frechet_table(cdist(a, b))[-1, -1])


def normalized_dfd(traj: Trajectory, reference: Trajectory,
                   share_tolerance: float = 0.05) -> float:
    """Discrete Frechet distance over positions, divided by the reference's
    start-to-goal Euclidean distance. Both trajectories must share endpoints
    within share_tolerance."""
    pa = traj.positions
    pb = reference.positions
    if np.linalg.norm(pa[0] - pb[0]) > share_tolerance or \
            np.linalg.norm(pa[-1] - pb[-1]) > share_tolerance:
        raise ValueError("trajectories do not share start and goal")
    denom = float(np.linalg.norm(pb[0] - pb[-1]))
    if denom == 0.0:
        raise ValueError("zero start-goal distance")
    return discrete_frechet(pa, pb) / denom


def collision_audit(traj: Trajectory, scene: Scene,
                    tolerance: float = CONTACT_TOLERANCE):
    """(min clearance, violation count) along a trajectory.

    Clearance is the unsigned oracle distance, so it is nonnegative even while
    penetrating; a violation is a sample inside some primitive deeper than the
    contact tolerance.
    """
    if not np.all(np.isfinite(traj.positions)):
        raise ValueError("trajectory positions must be finite")
    dists = scene.distances(traj.positions)
    inside = scene.contains(traj.positions)
    violations = int(np.count_nonzero(inside & (dists > tolerance)))
    return float(dists.min()), violations


class OracleField:
    """Exact-scene stand-in for a trained field: analytic unsigned distance
    with a central-difference gradient (h = 1e-6)."""

    def __init__(self, scene: Scene, fd_step: float = 1e-6):
        self.scene = scene
        self.fd_step = fd_step
        self._offsets = np.vstack([np.eye(3) * fd_step, -np.eye(3) * fd_step])

    def evaluate(self, x) -> FieldEvaluation:
        x = np.asarray(x, dtype=np.float64)
        value = float(self.scene.distances(x[None, :])[0])
        d = self.scene.distances(x[None, :] + self._offsets)
        gradient = (d[:3] - d[3:]) / (2.0 * self.fd_step)
        return FieldEvaluation(value, gradient)


def shell_starts(count: int = 8, radius: float = 1.2, seed: int = 0) -> np.ndarray:
    """Seeded start points distributed on a sphere shell around the scene."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return radius * dirs


# ---------------------------------------------------------------------------
# experiment driver

@dataclass
class ExperimentConfig:
    """Everything one experiment run needs besides the scene itself."""

    train: "trainer_mod.TrainConfig"
    policy: PolicyConfig
    view: CameraView | None = None
    cloud_count: int = 10000
    edge_threshold: float = 0.05
    tail_density: float = 0.3
    start_count: int = 8
    start_radius: float = 1.2
    seed: int = 0


@dataclass
class VariantResult:
    variant: str
    chamfer: float | None = None
    mean_normalized_dfd: float | None = None
    normalized_dfd: list = field(default_factory=list)
    min_clearances: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    reached_goal: list = field(default_factory=list)
    icp_residual: float | None = None
    cloud_size: int = 0
    train_seconds: float = 0.0
    trajectory_seconds: float = 0.0
    failed: bool = False
    failure: str | None = None


@dataclass
class MetricReport:
    scene_id: str
    seed: int
    starts: np.ndarray
    goal: np.ndarray
    variants: dict

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "starts": self.starts.tolist(),
            "goal": self.goal.tolist(),
            "variants": {},
        }
        for name, v in self.variants.items():
            entry = {
                "failed": v.failed,
                "failure": v.failure,
                "cloud_size": v.cloud_size,
                "chamfer": v.chamfer,
                "icp_residual": v.icp_residual,
                "mean_normalized_dfd": v.mean_normalized_dfd,
                "normalized_dfd": v.normalized_dfd,
                "min_clearances": v.min_clearances,
                "violations": v.violations,
                "reached_goal": v.reached_goal,
            }
            if include_timings:
                entry["timings"] = {"train_seconds": v.train_seconds,
                                    "trajectory_seconds": v.trajectory_seconds}
            out["variants"][name] = entry
        return out

    def write_json(self, path, include_timings: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_timings),
                                         indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        """Flat per-variant table for plotting."""
        with open(path, "w") as fh:
            fh.write("variant,failed,cloud_size,chamfer,mean_normalized_dfd,"
                     "min_clearance,total_violations,reached_count\n")
            for name, v in self.variants.items():
                min_cl = min(v.min_clearances) if v.min_clearances else ""
                fh.write(f"{name},{int(v.failed)},{v.cloud_size},"
                         f"{'' if v.chamfer is None else repr(v.chamfer)},"
                         f"{'' if v.mean_normalized_dfd is None else repr(v.mean_normalized_dfd)},"
                         f"{min_cl},{sum(v.violations)},{sum(v.reached_goal)}\n")


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "scene_id", "seed", "starts", "goal", "variants"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "scene_id": {"type": "string"},
        "seed": {"type": "integer"},
        "starts": {"type": "array", "items": {"type": "array",
                                              "items": {"type": "number"},
                                              "minItems": 3, "maxItems": 3}},
        "goal": {"type": "array", "items": {"type": "number"},
                 "minItems": 3, "maxItems": 3},
        "variants": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["failed", "chamfer", "mean_normalized_dfd",
                             "min_clearances", "violations", "reached_goal"],
            },
        },
    },
}


def generate_variant_cloud(scene: Scene, variant: str, cfg: ExperimentConfig) -> PointCloud:
    """Synthesize the point cloud a given acquisition mode would produce."""
    if variant == VARIANT_FULL_VIEW:
        return sample_surface(scene, cfg.cloud_count, seed=cfg.seed)
    if cfg.view is None:
        raise ValueError(f"variant {variant!r} needs a camera view")
    rendered = render_visible_cloud(scene, cfg.view, cfg.cloud_count, seed=cfg.seed)
    if variant == VARIANT_SINGLE_VIEW:
        return rendered.cloud
    if variant == VARIANT_SINGLE_VIEW_TAILS:
        return inject_frustum_tails(rendered, cfg.edge_threshold, cfg.tail_density)
    raise ValueError(f"unknown variant {variant!r}")


def run_experiment(scene: Scene, variants, cfg: ExperimentConfig) -> MetricReport:
    """Train a field per variant, compare against analytic ground truth.

    For each variant: generate its cloud, train, ICP-align the cloud to a
    ground-truth surface sample and compute the Chamfer distance, integrate
    trajectories from the shared start set, and score them against oracle-field
    trajectories by normalized discrete Frechet distance plus collision audits.
    Training failures mark the variant failed; the other variants still run.
    """
    unknown = set(variants) - set(ALL_VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants: {sorted(unknown)}")
    starts = shell_starts(cfg.start_count, cfg.start_radius, cfg.seed)
    gt_cloud = sample_surface(scene, cfg.cloud_count, seed=cfg.seed + 1)
    oracle = OracleField(scene)
    oracle_trajs = [integrate(oracle, s, cfg.policy) for s in starts]

    results = {}
    for variant in variants:
        res = VariantResult(variant=variant)
        results[variant] = res
        try:
            cloud = generate_variant_cloud(scene, variant, cfg)
            res.cloud_size = len(cloud)
            t0 = time.perf_counter()
            model, _ = trainer_mod.train(cloud, cfg.train)
            res.train_seconds = time.perf_counter() - t0
            icp = icp_align(cloud, gt_cloud)
            res.icp_residual = icp.residual
            aligned = PointCloud(icp.transform.apply(cloud.points))
            res.chamfer = chamfer(aligned, gt_cloud)
            t0 = time.perf_counter()
            for start, ref in zip(starts, oracle_trajs):
                traj = integrate(model, start, cfg.policy)
                res.reached_goal.append(traj.status == TerminalStatus.REACHED_GOAL)
                min_cl, viol = collision_audit(traj, scene)
                res.min_clearances.append(min_cl)
                res.violations.append(viol)
                res.normalized_dfd.append(
                    normalized_dfd(traj, ref, share_tolerance=np.inf))
            res.trajectory_seconds = time.perf_counter() - t0
            res.mean_normalized_dfd = float(np.mean(res.normalized_dfd))
        except (trainer_mod.TrainingDivergedError, ValueError) as err:
            res.failed = True
            res.failure = str(err)
    return MetricReport(scene.name, cfg.seed, starts, cfg.policy.goal, results)


def export_polylines(report_trajs: dict, out_dir) -> list:
    """Write each trajectory as an 'x y z' polyline file for figure tooling."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, traj in report_trajs.items():
        path = out_dir / f"{name}.polyline.txt"
        np.savetxt(path, traj.positions, fmt="%.17g")
        written.append(path)
    return written
