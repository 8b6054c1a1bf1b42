"""Command line entry point.

Subcommands: gen-synthetic, refine, fuse, export-ply, eval-iou, report.
Settings come from built-in defaults, then an optional ``--config`` file of
key=value lines, then flags.
"""

import argparse
from dataclasses import dataclass, fields, replace
import logging
from pathlib import Path
import sys
import time

from . import dataset_io
from .dataset_io import SequenceError, MapFormatError
from .depth_proc import HoleFillConfig, fill_holes
from .eval import comparison_rows, dataset_mask_iou, format_csv, format_table, refinement_report
from .mask_refine import RefineConfig, refine_all
from .panoptic_tsdf import CameraIntrinsics, LabeledRgbdFrame, PanopticVoxelMap, WEIGHTINGS

log = logging.getLogger("panrefine")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    voxel_size: float = 0.05
    truncation: float = 0.2
    grid_size: int = 1024
    threshold: float = 1e-6
    padding: float = 3.0
    min_samples: int = 32
    min_bandwidth: float = 0.0
    hole_kernel: int = 5
    hole_sigma: float = 1.0
    refine: bool = True
    color_by: str = "instance"
    weighting: str = "constant"
    band: float = 0.05
    workers: int = 1

    def validate(self) -> "RunConfig":
        try:
            self.refine_config()
            self.hole_config()
            PanopticVoxelMap(self.voxel_size, self.truncation, weighting=self.weighting)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.color_by not in ("instance", "class"):
            raise ConfigError("color_by must be 'instance' or 'class'")
        if not self.band > 0:
            raise ConfigError("band must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        return self

    def refine_config(self) -> RefineConfig:
        return RefineConfig(self.grid_size, self.threshold, self.padding, self.min_samples, self.min_bandwidth)

    def hole_config(self) -> HoleFillConfig:
        return HoleFillConfig(self.hole_kernel, self.hole_sigma)


def _coerce(name: str, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip(), _CONFIG_TYPES[key])
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = replace(cfg, **read_config_file(args.config))
    overrides = {}
    for name in _CONFIG_TYPES:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = _coerce(name, value, _CONFIG_TYPES[name])
    return replace(cfg, **overrides).validate()


def _guard_output(dataset: Path, output: Path):
    dataset, output = dataset.resolve(), output.resolve()
    if output == dataset or dataset in output.parents:
        raise ConfigError(f"output {output} lies inside the input dataset {dataset}")


# -- subcommands ------------------------------------------------------------

def cmd_gen_synthetic(args, cfg):
    intr = CameraIntrinsics(args.fx, args.fx, (args.width - 1) / 2, (args.height - 1) / 2, args.width, args.height, args.depth_scale)
    trajectory = dataset_io.default_trajectory(args.scene, args.frames)
    spec = dataset_io.SyntheticSceneSpec(
        args.scene, trajectory, intr,
        depth_sigma=args.depth_sigma, hole_probability=args.hole_prob,
        leak_probability=args.leak_prob, leak_radius=args.leak_radius, seed=args.seed,
    )
    dataset_io.generate_synthetic(spec, args.out)
    log.info("generated %d frames in %s", args.frames, args.out)


def _refined_frames(seq, cfg):
    refine_cfg = cfg.refine_config().with_resolution(1.0 / seq.intrinsics.depth_scale)
    for frame in seq.frames(with_rgb=False):
        start = time.perf_counter()
        depth = fill_holes(frame.depth, cfg.hole_config())
        if cfg.refine:
            result = refine_all(frame.masks, depth, refine_cfg, cfg.workers)
        else:
            result = None
        log.info("frame %d: prepared in %.1f ms", frame.index, 1e3 * (time.perf_counter() - start))
        yield frame, depth, result


def cmd_refine(args, cfg):
    seq = dataset_io.load_sequence(args.dataset)
    out = Path(args.out)
    _guard_output(Path(args.dataset), out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, refine=True)
    stats_lines = ["frame,masks,refined,skipped_stuff,skipped_too_few_samples,skipped_degenerate"]
    all_masks = []
    for frame, _depth, result in _refined_frames(seq, cfg):
        all_masks.append(result.masks)
        skipped = result.skipped
        stats_lines.append(
            f"{frame.index},{len(result.results)},{result.refined_count},"
            f"{skipped.get('stuff', 0)},{skipped.get('too_few_samples', 0)},{skipped.get('degenerate', 0)}"
        )
    dataset_io.write_refined_masks(all_masks, out, seq.intrinsics.shape)
    (out / "refine_stats.csv").write_text("\n".join(stats_lines) + "\n")


def fuse_sequence(seq, cfg: RunConfig, refine_fn=None) -> PanopticVoxelMap:
    """Hole-fill, optionally refine, and integrate every frame of a sequence.

    `refine_fn(masks, depth)` replaces the built-in refinement when given.
    """
    vmap = PanopticVoxelMap(cfg.voxel_size, cfg.truncation, weighting=cfg.weighting)
    for frame, depth, result in _refined_frames(seq, replace(cfg, refine=cfg.refine and refine_fn is None)):
        if refine_fn is not None:
            masks = refine_fn(frame.masks, depth)
        else:
            masks = result.masks if result is not None else frame.masks
        start = time.perf_counter()
        stats = vmap.integrate_frame(LabeledRgbdFrame(depth, masks, seq.intrinsics, frame.pose))
        log.info("frame %d: %d voxels updated in %.1f ms", frame.index, stats.updated, 1e3 * (time.perf_counter() - start))
    return vmap


def cmd_fuse(args, cfg):
    if args.no_refine:
        cfg = replace(cfg, refine=False)
    seq = dataset_io.load_sequence(args.dataset)
    _guard_output(Path(args.dataset), Path(args.map))
    vmap = fuse_sequence(seq, cfg)
    dataset_io.save_map(vmap, args.map)
    log.info("wrote %d voxels to %s", vmap.voxel_count, args.map)


def cmd_export_ply(args, cfg):
    vmap = dataset_io.load_map(args.map)
    points = vmap.extract_surface_points(cfg.band)
    dataset_io.export_ply(points, args.out, cfg.color_by)
    log.info("wrote %d points to %s", len(points), args.out)


def cmd_eval_iou(args, cfg):
    manifest = dataset_io.read_manifest(args.dataset)
    pred = dataset_io.read_mask_dir(args.pred, manifest)
    gt_dir = args.gt if args.gt else Path(args.dataset) / "gt_mask"
    gt = dataset_io.read_mask_dir(gt_dir, manifest)
    report = dataset_mask_iou(pred, gt, "predicted", things_only=not args.all_classes)
    rows = comparison_rows([report])
    print(format_table(rows))
    print(f"matched={report.matched} unmatched={report.unmatched}")
    if args.csv:
        Path(args.csv).write_text(format_csv(rows))


def cmd_report(args, cfg):
    seq = dataset_io.load_sequence(args.dataset)
    if not seq.manifest.has_ground_truth:
        raise SequenceError(f"{args.dataset} has no gt_mask directory")
    rows = refinement_report(seq, cfg.refine_config(), cfg.hole_config(), cfg.workers)
    print(format_table(rows))
    if args.csv:
        Path(args.csv).write_text(format_csv(rows))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("-v", "--verbose", action="store_true", help="per-frame progress on stderr")
    common.add_argument("--voxel-size", dest="voxel_size", type=float)
    common.add_argument("--truncation", type=float)
    common.add_argument("--grid-size", dest="grid_size", type=int)
    common.add_argument("--threshold", type=float)
    common.add_argument("--padding", type=float)
    common.add_argument("--min-samples", dest="min_samples", type=int)
    common.add_argument("--min-bandwidth", dest="min_bandwidth", type=float, help="kernel width floor in meters (the depth unit is always applied)")
    common.add_argument("--hole-kernel", dest="hole_kernel", type=int)
    common.add_argument("--hole-sigma", dest="hole_sigma", type=float)
    common.add_argument("--weighting", choices=WEIGHTINGS)
    common.add_argument("--workers", type=int)

    parser = argparse.ArgumentParser(prog="panrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic RGB-D sequence")
    p.add_argument("--scene", choices=dataset_io.SCENE_KINDS, default="boxes-room")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--fx", type=float, default=525.0)
    p.add_argument("--depth-scale", dest="depth_scale", type=float, default=1000.0)
    p.add_argument("--depth-sigma", dest="depth_sigma", type=float, default=0.003)
    p.add_argument("--hole-prob", dest="hole_prob", type=float, default=0.01)
    p.add_argument("--leak-prob", dest="leak_prob", type=float, default=0.3)
    p.add_argument("--leak-radius", dest="leak_radius", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("refine", parents=[common], help="write refined mask images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("fuse", parents=[common], help="fuse a sequence into a PVM1 map")
    p.add_argument("--dataset", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--no-refine", dest="no_refine", action="store_true")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("export-ply", parents=[common], help="export map surface points as PLY")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--color-by", dest="color_by", choices=("instance", "class"))
    p.add_argument("--band", type=float)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("eval-iou", parents=[common], help="mask IOU of predicted vs ground-truth images")
    p.add_argument("--dataset", required=True, help="dataset whose manifest labels the segments")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", help="defaults to <dataset>/gt_mask")
    p.add_argument("--all-classes", dest="all_classes", action="store_true", help="score stuff segments too")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval_iou)

    p = sub.add_parser("report", parents=[common], help="IOU without vs with refinement")
    p.add_argument("--dataset", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except (ConfigError, SequenceError, MapFormatError, ValueError, OSError) as exc:
        print(f"panrefine {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
