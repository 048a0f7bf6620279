"""Command-line entry point: ``cubemap-vo <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import sys
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import __version__
from .calib import DEFAULT_ACTIVE_FACES, CubemapCamera, parse_face, read_ocamcalib, unproject_points
from .epipolar import CorrespondenceArrays, RansacConfig, decompose_essential, ransac_essential
from .errors import CubemapError, ParseError
from .evaluation import ate_rmse, read_trajectory, write_trajectory
from .optim import MetricKind
from .remap import build_remap_table, compose_cross, read_pgm, remap_image, write_pgm
from .sim import PipelineConfig, SceneConfig, bench_metrics, gen_scene, run_vo

FACE_SIZE_CHOICES = (450, 550, 650)
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _face_size(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 64 <= value <= 4096:
        raise argparse.ArgumentTypeError(f"face size must lie in [64, 4096], got {value}")
    return value


def _active_faces(text: str):
    try:
        return tuple(parse_face(t) for t in text.split(",") if t.strip())
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _metric_list(text: str):
    try:
        return [MetricKind.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cubemap-vo", description="Fisheye cubemap geometry and synthetic VO.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, out_required=False):
        sp.add_argument("--out", default="." if not out_required else None,
                        required=out_required, help="output directory")
        sp.add_argument("--faces", type=_face_size, default=650,
                        help=f"face size S in pixels (tested: {FACE_SIZE_CHOICES})")
        sp.add_argument("--active-faces", type=_active_faces, default=DEFAULT_ACTIVE_FACES,
                        help="comma-separated subset of front,left,right,up,down,back")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("remap", help="fisheye PGM -> cubemap face PGMs")
    sp.add_argument("--calib", required=True)
    sp.add_argument("--in", dest="inputs", required=True)
    common(sp)

    sp = sub.add_parser("init", help="two-view essential-matrix initialization")
    sp.add_argument("--in", dest="inputs", nargs=2, required=True, metavar=("OBS1", "OBS2"),
                    help="CSV files with columns [id,]face,u,v")
    sp.add_argument("--th", type=float, default=1.0)
    common(sp)

    sp = sub.add_parser("vo", help="synthetic visual odometry run")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--metric", type=MetricKind.parse, default=MetricKind.RU)
    sp.add_argument("--th", type=float, default=1.0)
    common(sp)

    sp = sub.add_parser("bench-metrics", help="ATE per optimization metric")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--metric", type=_metric_list,
                    default=[MetricKind.RU, MetricKind.RT, MetricKind.RF],
                    help="comma-separated metrics")
    sp.add_argument("--runs", type=int, default=20, help="consecutive seeds from --seed")
    sp.add_argument("--th", type=float, default=1.0)
    common(sp)

    sp = sub.add_parser("ate", help="ATE RMSE between two TUM trajectories")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    return p


# --------------------------------------------------------------------------
# Reports


def _format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "%.6g" % v
    return str(v)


def emit_report(results: Iterable) -> str:
    """CSV text with a header row; floats carry 6 significant digits."""
    rows = [dataclasses.asdict(r) if dataclasses.is_dataclass(r) else dict(r) for r in results]
    if not rows:
        raise ValueError("report needs at least one record")
    header = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_value(row[k]) for k in header])
    return buf.getvalue()


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Subcommands


def _camera(args) -> CubemapCamera:
    return CubemapCamera(args.faces, args.active_faces)


def cmd_remap(args) -> int:
    intr = read_ocamcalib(args.calib)
    cam = _camera(args)
    src = read_pgm(args.inputs)
    faces = remap_image(build_remap_table(intr, cam), src)
    out = _out_dir(args.out)
    for face, img in faces.items():
        write_pgm(out / f"{face.name.lower()}.pgm", img)
    write_pgm(out / "cubemap_cross.pgm", compose_cross(faces, cam.face_size))
    print(f"wrote {len(faces)} faces of {cam.face_size}x{cam.face_size} to {out}")
    return EXIT_OK


def read_observation_csv(path: str):
    """Rows ``[id,]face,u,v``; returns ``(ids or None, faces, uv)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise ParseError(f"{path}: no rows")
    header = [h.strip().lower() for h in rows[0]]
    if not {"face", "u", "v"} <= set(header):
        raise ParseError(f"{path}: header must contain face,u,v")
    col = {h: i for i, h in enumerate(header)}
    ids, faces, uv = [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            faces.append(int(parse_face(r[col["face"]].strip())))
            uv.append((float(r[col["u"]]), float(r[col["v"]])))
            if "id" in col:
                ids.append(int(r[col["id"]]))
        except (ValueError, IndexError, KeyError) as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return (np.array(ids) if "id" in col else None), np.array(faces), np.array(uv, float)


def cmd_init(args) -> int:
    cam = _camera(args)
    ids1, f1, uv1 = read_observation_csv(args.inputs[0])
    ids2, f2, uv2 = read_observation_csv(args.inputs[1])
    if ids1 is not None and ids2 is not None:
        common, i1, i2 = np.intersect1d(ids1, ids2, return_indices=True)
    else:
        if len(f1) != len(f2):
            raise ParseError("observation files without ids must have equal row counts")
        common = np.arange(len(f1))
        i1 = i2 = common
    data = CorrespondenceArrays(unproject_points(cam, f1[i1], uv1[i1]),
                                unproject_points(cam, f2[i2], uv2[i2]),
                                f1[i1], uv1[i1], f2[i2], uv2[i2])
    model, mask, iters = ransac_essential(data, RansacConfig(th=args.th, seed=args.seed), cam)
    R, t = decompose_essential(model, data.subset(mask))
    out = _out_dir(args.out)
    np.savetxt(out / "essential.csv", model.E, delimiter=",", fmt="%.17g")
    np.savetxt(out / "motion.csv", np.column_stack([R, t]), delimiter=",", fmt="%.17g",
               header="r0,r1,r2,t", comments="")
    (out / "inliers.csv").write_text(emit_report(
        [{"id": int(k), "inlier": bool(m)} for k, m in zip(common, mask)]))
    print(f"inliers {int(mask.sum())}/{len(mask)} after {iters} iterations")
    return EXIT_OK


def cmd_vo(args) -> int:
    cfg = SceneConfig.load(args.scene, seed=args.seed, face_size=args.faces)
    scene = gen_scene(cfg)
    result = run_vo(scene, PipelineConfig(metric=args.metric, th=args.th, seed=args.seed))
    out = _out_dir(args.out)
    write_trajectory(out / "trajectory.txt", result.trajectory)
    write_trajectory(out / "groundtruth.txt", scene.ground_truth)
    (out / "stats.csv").write_text(emit_report(result.stats))
    ate = ate_rmse(result.trajectory, scene.ground_truth)
    print(f"ate_rmse {ate:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    cfg = SceneConfig.load(args.scene, seed=args.seed, face_size=args.faces)
    seeds = range(args.seed, args.seed + args.runs)
    records = bench_metrics(cfg, args.metric, seeds, PipelineConfig(th=args.th))
    out = _out_dir(args.out)
    text = emit_report(records)
    (out / "metrics.csv").write_text(text)
    for m in args.metric:
        recs = [r for r in records if r.metric == m.value]
        ok = [r.ate_rmse for r in recs if not r.failed and math.isfinite(r.ate_rmse)]
        med = float(np.median(ok)) if ok else math.inf
        print(f"{m.value} median_ate {med:.6g} failures {len(recs) - len(ok)}")
    return EXIT_OK


def cmd_ate(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    print(f"ate_rmse {ate_rmse(est, gt):.6f}")
    return EXIT_OK


COMMANDS: Mapping = {
    "remap": cmd_remap,
    "init": cmd_init,
    "vo": cmd_vo,
    "bench-metrics": cmd_bench,
    "ate": cmd_ate,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (CubemapError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
