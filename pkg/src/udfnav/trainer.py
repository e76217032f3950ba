"""Training loop: log-uniform multi-scale query sampling against a KD-tree
oracle, staged learning rates, adaptive-moment updates, and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .field import FieldModel, LossWorkspace, init_model, loss_and_param_grads

CHECKPOINT_MAGIC = b"UDFN"
CHECKPOINT_VERSION = 1


class TrainerError(Exception):
    pass


class TrainingDivergedError(TrainerError):
    """Loss went non-finite. Carries the last finite model and the partial log."""

    def __init__(self, iteration, model, log):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.model = model
        self.log = log


class CheckpointVersionError(TrainerError):
    pass


class CheckpointCorruptError(TrainerError):
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults follow the reference recipe:
    log-uniform noise scales between sigma_min and sigma_max (one-tenth of the
    normalized bounding radius), a 10k-point working cloud, 5k surface points
    per iteration, and 2000 iterations at each of four learning rates.
    """

    alpha_surf: float = 0.5
    alpha_eik: float = 0.1
    sigma_min: float = 0.0025
    sigma_max: float = 0.1
    cloud_subsample: int = 10000
    surface_batch: int = 5000
    epochs_per_lr: int = 2000
    learning_rates: tuple = (3e-4, 1e-4, 5e-5, 1e-5)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    width: int = 256
    depth: int = 3
    omega0: float = 25.0
    seed: int = 0

    def __post_init__(self):
        self.learning_rates = tuple(float(lr) for lr in self.learning_rates)
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.surface_batch < 1 or self.cloud_subsample < 1:
            raise ValueError("batch sizes must be >= 1")
        if any(b >= a for a, b in zip(self.learning_rates, self.learning_rates[1:])):
            raise ValueError("learning rates must be strictly decreasing")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        """Build from a JSON config file, with optional key overrides on top."""
        data = json.loads(Path(path).read_text())
        if overrides:
            data.update(overrides)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learning_rates"] = list(self.learning_rates)
        return d


@dataclass
class QueryBatch:
    """One iteration's training data: raw surface points, their Gaussian
    perturbations with per-point noise scale, and exact oracle distances."""

    surface: np.ndarray    # (Bs, 3)
    queries: np.ndarray    # (Bq, 3)
    sigmas: np.ndarray     # (Bq,)
    distances: np.ndarray  # (Bq,)


def sample_queries(index: SpatialIndex, surface_batch: np.ndarray,
                   config: TrainConfig, rng: np.random.Generator) -> QueryBatch:
    """Perturb each surface point with noise of log-uniformly drawn scale.

    sigma = exp(u), u ~ Uniform(ln sigma_min, ln sigma_max); the perturbation
    is isotropic Gaussian with that sigma. Oracle distances come from the exact
    KD-tree nearest-neighbor distance to the working cloud.
    """
    surface_batch = np.asarray(surface_batch, dtype=np.float64)
    n = len(surface_batch)
    u = rng.uniform(np.log(config.sigma_min), np.log(config.sigma_max), size=n)
    sigmas = np.exp(u)
    eps = sigmas[:, None] * rng.standard_normal((n, 3))
    queries = surface_batch + eps
    dists = index.distances(queries)
    return QueryBatch(surface_batch, queries, sigmas, dists)


@dataclass
class LogRow:
    iteration: int
    lr: float
    fit: float
    surf: float
    eik: float
    total: float


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, row: LogRow):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,lr,loss_fit,loss_surf,loss_eik,loss_total\n")
            for r in self.rows:
                fh.write(f"{r.iteration},{r.lr:.17g},{r.fit:.17g},"
                         f"{r.surf:.17g},{r.eik:.17g},{r.total:.17g}\n")


class _AdamState:
    """First/second-moment adaptive updates with bias correction."""

    def __init__(self, model: FieldModel, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(w) for w in model.weights] + \
                 [np.zeros_like(b) for b in model.biases]
        self.v = [np.zeros_like(a) for a in self.m]

    def step(self, model: FieldModel, grads, lr: float) -> None:
        self.t += 1
        params = list(model.weights) + list(model.biases)
        gs = list(grads.weights) + list(grads.biases)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, gs, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(cloud: PointCloud, config: TrainConfig):
    """Fit a distance field to a cloud; returns (FieldModel, TrainingLog).

    The cloud is subsampled once (seeded) to config.cloud_subsample points if
    larger. Each iteration draws a surface batch with replacement, builds the
    perturbed query batch, and applies one adaptive-gradient update. A
    non-finite loss aborts with the last finite model attached to the error.
    """
    if len(cloud) == 0:
        raise ValueError("cannot train on an empty cloud")
    rng = np.random.default_rng(config.seed)
    points = cloud.points
    if len(points) > config.cloud_subsample:
        keep = rng.choice(len(points), size=config.cloud_subsample, replace=False)
        points = points[keep]
    index = SpatialIndex(points)
    model = init_model(config.width, config.depth, config.omega0,
                       seed=int(rng.integers(2 ** 63)))
    adam = _AdamState(model, config.beta1, config.beta2, config.adam_eps)
    workspace = LossWorkspace(config.width, config.depth,
                              config.surface_batch, config.surface_batch)
    log = TrainingLog()
    last_finite = model.copy()
    iteration = 0
    for lr in config.learning_rates:
        for _ in range(config.epochs_per_lr):
            batch_idx = rng.integers(len(points), size=config.surface_batch)
            surface = points[batch_idx]
            qb = sample_queries(index, surface, config, rng)
            terms, grads = loss_and_param_grads(
                model, qb.surface, qb.queries, qb.distances,
                config.alpha_surf, config.alpha_eik, workspace=workspace)
            if not np.isfinite(terms.total):
                raise TrainingDivergedError(iteration, last_finite, log)
            last_finite = model.copy()
            adam.step(model, grads, lr)
            log.append(LogRow(iteration, lr, terms.fit, terms.surf,
                              terms.eik, terms.total))
            iteration += 1
    return model, log


# ---------------------------------------------------------------------------
# checkpoints: magic | version | header-length | JSON header | raw params | sha256

def save_checkpoint(model: FieldModel, path, scale: float = 1.0,
                    center=(0.0, 0.0, 0.0)) -> None:
    """Binary checkpoint; parameters round-trip bit-exactly.

    The header records architecture, omega0, and the normalization scale and
    center of the training cloud; a trailing sha256 over everything before it
    rejects truncated or corrupted files.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "width": model.width,
        "depth": model.depth,
        "omega0": model.omega0,
        "scale": float(scale),
        "center": [float(c) for c in center],
        "layer_shapes": [list(w.shape) for w in model.weights],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
    payload += header_bytes
    for w, b in zip(model.weights, model.biases):
        payload += np.ascontiguousarray(w, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(b, dtype="<f8").tobytes()
    payload += hashlib.sha256(bytes(payload)).digest()
    Path(path).write_bytes(bytes(payload))


def load_checkpoint(path, with_meta: bool = False):
    """Load a checkpoint; raises on version mismatch or checksum failure."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointCorruptError("file too short to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch (truncated or corrupted file)")
    if body[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError("bad magic; not a checkpoint file")
    version, header_len = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} unsupported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    header = json.loads(body[12:12 + header_len].decode("utf-8"))
    cursor = 12 + header_len
    weights, biases = [], []
    for shape in header["layer_shapes"]:
        n_out, n_in = shape
        w_bytes = n_out * n_in * 8
        weights.append(np.frombuffer(body, dtype="<f8", count=n_out * n_in,
                                     offset=cursor).reshape(n_out, n_in).copy())
        cursor += w_bytes
        biases.append(np.frombuffer(body, dtype="<f8", count=n_out,
                                    offset=cursor).copy())
        cursor += n_out * 8
    if cursor != len(body):
        raise CheckpointCorruptError("parameter payload length mismatch")
    model = FieldModel(weights, biases, float(header["omega0"]))
    if with_meta:
        return model, header
    return model
