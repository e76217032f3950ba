"""Command-line entry point.

Subcommands: ingest, scene, train, trace, eval, bench. Every command is
deterministic given (inputs, config, seed) and writes a JSON run manifest
recording input/output checksums, seeds, and wall-clock timings.

Exit codes: 0 success, 2 usage, 3 I/O, 4 parse/format, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cloud as cloud_mod
from . import evaluation as eval_mod
from . import field as field_mod
from . import policy as policy_mod
from . import scenes as scenes_mod
from . import trainer as trainer_mod

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_NUMERIC = 5


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Collects inputs, outputs, and timings for one command run."""

    def __init__(self, command: str, argv, seed=None, config=None):
        self.data = {
            "tool": "udfnav",
            "version": __version__,
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "config_sha256": None if config is None else hashlib.sha256(
                json.dumps(config, sort_keys=True).encode()).hexdigest(),
            "inputs": {},
            "outputs": {},
            "timings": {},
        }
        self._t0 = time.perf_counter()

    def add_input(self, path):
        self.data["inputs"][str(path)] = _sha256(path)

    def add_output(self, path):
        self.data["outputs"][str(path)] = _sha256(path)

    def write(self, anchor_path):
        self.data["timings"]["wall_seconds"] = time.perf_counter() - self._t0
        for path, digest in self.data["outputs"].items():
            if _sha256(path) != digest:
                raise RuntimeError(f"output {path} changed after being recorded")
        out = Path(str(anchor_path) + ".manifest.json")
        out.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return out


def _parse_vec(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 'x,y,z', got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric component in {text!r}")


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise argparse.ArgumentTypeError(f"--set needs key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = json.loads(value) if value.lstrip("-")[:1].isdigit() or \
            value in ("true", "false") or value.startswith("[") else value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="udfnav",
        description="distance-field reconstruction and metric-modulated motion generation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load, filter, normalize, and rewrite a cloud")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--confidence-threshold", type=float, default=None)
    p.add_argument("--no-normalize", action="store_true")

    p = sub.add_parser("scene", help="emit a synthetic cloud from a scene file")
    p.add_argument("scene")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=list(eval_mod.ALL_VARIANTS),
                   default=eval_mod.VARIANT_FULL_VIEW)
    p.add_argument("-n", "--count", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--edge-threshold", type=float, default=0.05)
    p.add_argument("--density", type=float, default=0.3)

    p = sub.add_parser("train", help="train a distance field on a cloud")
    p.add_argument("cloud")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("-c", "--config", default=None, help="JSON training config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (highest precedence)")
    p.add_argument("--log", default=None, help="loss log CSV (default <output>.log.csv)")

    p = sub.add_parser("trace", help="integrate one trajectory from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--start", type=_parse_vec, required=True)
    p.add_argument("--goal", type=_parse_vec, required=True)
    p.add_argument("-o", "--output", required=True, help="output prefix")
    p.add_argument("-c", "--config", default=None, help="JSON policy config")
    p.add_argument("--scene", default=None,
                   help="scene JSON; adds an oracle clearance column")

    p = sub.add_parser("eval", help="run the multi-variant experiment suite")
    p.add_argument("scene")
    p.add_argument("-o", "--outdir", required=True)
    p.add_argument("-c", "--config", default=None, help="JSON experiment config")
    p.add_argument("--variants", nargs="+", default=list(eval_mod.ALL_VARIANTS))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="measure per-step modulated-velocity latency")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--evals", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)

    return parser


def cmd_ingest(args, argv) -> int:
    manifest = Manifest("ingest", argv)
    manifest.add_input(args.input)
    cloud = cloud_mod.load_cloud(args.input, args.confidence_threshold)
    print(f"loaded {len(cloud)} points from {args.input}")
    scale, center = 1.0, np.zeros(3)
    if not args.no_normalize:
        cloud, scale, center = cloud_mod.normalize(cloud)
    cloud_mod.save_cloud(cloud, args.output)
    sidecar = cloud_mod.write_normalization_sidecar(args.output, scale, center)
    manifest.add_output(args.output)
    manifest.add_output(sidecar)
    manifest.write(args.output)
    print(f"wrote {len(cloud)} points, scale {scale:.6g}, center "
          f"({center[0]:.6g}, {center[1]:.6g}, {center[2]:.6g})")
    return EXIT_OK


def cmd_scene(args, argv) -> int:
    manifest = Manifest("scene", argv, seed=args.seed)
    manifest.add_input(args.scene)
    scene, view = scenes_mod.load_scene(args.scene)
    if args.mode == eval_mod.VARIANT_FULL_VIEW:
        cloud = scenes_mod.sample_surface(scene, args.count, seed=args.seed)
    else:
        if view is None:
            print("scene file lacks a 'view' block required for single-view modes",
                  file=sys.stderr)
            return EXIT_USAGE
        rendered = scenes_mod.render_visible_cloud(scene, view, args.count,
                                                   seed=args.seed)
        if args.mode == eval_mod.VARIANT_SINGLE_VIEW:
            cloud = rendered.cloud
        else:
            cloud = scenes_mod.inject_frustum_tails(rendered, args.edge_threshold,
                                                    args.density)
    cloud_mod.save_cloud(cloud, args.output)
    manifest.add_output(args.output)
    manifest.write(args.output)
    print(f"wrote {len(cloud)} points ({args.mode}) to {args.output}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    overrides = _parse_overrides(getattr(args, "set", None))
    if args.config:
        config = trainer_mod.TrainConfig.from_file(args.config, overrides)
    else:
        config = trainer_mod.TrainConfig(**overrides)
    manifest = Manifest("train", argv, seed=config.seed, config=config.to_dict())
    manifest.add_input(args.cloud)
    if args.config:
        manifest.add_input(args.config)
    cloud = cloud_mod.load_cloud(args.cloud)
    log_path = args.log or args.output + ".log.csv"
    try:
        model, log = trainer_mod.train(cloud, config)
    except trainer_mod.TrainingDivergedError as err:
        # keep the last finite model, visibly marked
        partial = args.output + ".partial"
        trainer_mod.save_checkpoint(err.model, partial)
        err.log.to_csv(log_path)
        print(f"training diverged: {err}; partial checkpoint at {partial}",
              file=sys.stderr)
        return EXIT_NUMERIC
    trainer_mod.save_checkpoint(model, args.output)
    log.to_csv(log_path)
    manifest.add_output(args.output)
    manifest.add_output(log_path)
    manifest.write(args.output)
    print(f"trained {len(log)} iterations; final total loss "
          f"{log.rows[-1].total:.6g}; checkpoint at {args.output}")
    return EXIT_OK


def cmd_trace(args, argv) -> int:
    manifest = Manifest("trace", argv)
    manifest.add_input(args.checkpoint)
    model = trainer_mod.load_checkpoint(args.checkpoint)
    overrides = {}
    if args.config:
        manifest.add_input(args.config)
        overrides = json.loads(Path(args.config).read_text())
    overrides["goal"] = args.goal
    config = policy_mod.PolicyConfig(**overrides)
    scene = None
    if args.scene:
        manifest.add_input(args.scene)
        scene, _ = scenes_mod.load_scene(args.scene)
    traj = policy_mod.integrate(model, args.start, config)
    csv_path = args.output + ".trajectory.csv"
    policy_mod.write_trajectory_csv(traj, csv_path, scene=scene)
    summary = traj.summary()
    if scene is not None:
        min_cl, violations = eval_mod.collision_audit(traj, scene)
        summary["min_oracle_clearance"] = min_cl
        summary["violations"] = violations
    summary_path = args.output + ".summary.json"
    Path(summary_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.add_output(csv_path)
    manifest.add_output(summary_path)
    manifest.write(args.output)
    print(f"status {traj.status.value} after {len(traj) - 1} steps")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    manifest = Manifest("eval", argv, seed=args.seed)
    manifest.add_input(args.scene)
    scene, view = scenes_mod.load_scene(args.scene)
    raw = {}
    if args.config:
        manifest.add_input(args.config)
        raw = json.loads(Path(args.config).read_text())
    train_cfg = trainer_mod.TrainConfig(**raw.get("train", {}))
    policy_raw = dict(raw.get("policy", {}))
    if "goal" not in policy_raw:
        print("experiment config must set policy.goal", file=sys.stderr)
        return EXIT_USAGE
    policy_cfg = policy_mod.PolicyConfig(**policy_raw)
    cfg = eval_mod.ExperimentConfig(
        train=train_cfg, policy=policy_cfg, view=view,
        cloud_count=raw.get("cloud_count", 10000),
        edge_threshold=raw.get("edge_threshold", 0.05),
        tail_density=raw.get("tail_density", 0.3),
        start_count=raw.get("start_count", 8),
        start_radius=raw.get("start_radius", 1.2),
        seed=args.seed)
    report = eval_mod.run_experiment(scene, args.variants, cfg)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report_path = outdir / "report.json"
    report.write_json(report_path, include_timings=False)
    csv_path = outdir / "report.csv"
    report.write_csv(csv_path)
    manifest.add_output(report_path)
    manifest.add_output(csv_path)
    manifest.write(outdir / "report")
    failed = [n for n, v in report.variants.items() if v.failed]
    print(f"report at {report_path}" + (f" (failed variants: {failed})" if failed else ""))
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    model = field_mod.init_model(args.width, args.depth, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    config = policy_mod.PolicyConfig(goal=np.array([0.9, 0.0, 0.0]))
    points = rng.uniform(-1.0, 1.0, size=(args.evals, 3))
    policy_mod.modulated_velocity(model, points[0], config)  # warm up
    samples = np.empty(args.evals)
    for i, x in enumerate(points):
        t0 = time.perf_counter()
        policy_mod.modulated_velocity(model, x, config)
        samples[i] = time.perf_counter() - t0
    ms = np.sort(samples) * 1e3
    median = float(np.median(ms))
    print(f"per-step modulated velocity, width {args.width} depth {args.depth}, "
          f"{args.evals} evals:")
    print(f"  median {median:.4f} ms | mean {ms.mean():.4f} ms | "
          f"p90 {ms[int(0.9 * len(ms))]:.4f} ms | max {ms.max():.4f} ms")
    print(f"  budget (<1 ms median): {'PASS' if median < 1.0 else 'FAIL'}")
    return EXIT_OK if median < 1.0 else EXIT_NUMERIC


_HANDLERS = {
    "ingest": cmd_ingest,
    "scene": cmd_scene,
    "train": cmd_train,
    "trace": cmd_trace,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return _HANDLERS[args.command](args, argv)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (cloud_mod.CloudParseError, scenes_mod.SceneParseError,
            trainer_mod.CheckpointVersionError, trainer_mod.CheckpointCorruptError,
            json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except (cloud_mod.EmptyCloudError, cloud_mod.ZeroExtentError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (field_mod.NumericError, cloud_mod.AlignmentError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    raise SystemExit(main())
