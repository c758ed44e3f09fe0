"""Command line entry point: ``sspfit {fit,extract,eval,demo2d}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    NonFiniteGradient,
    NonFiniteLoss,
    NonFiniteParameters,
    SSPError,
)
from .extract import extract, sdf_slice, save_slice
from .field import load_checkpoint
from .fileio import read_mesh
from .metrics import DEFAULT_TAU, evaluate_points, sample_mesh_surface
from .partition import build_voxel_grid, partition_space, write_label_mask
from .pointcloud import (
    KnnIndex,
    NormalizationTransform,
    PointCloud,
    estimate_unoriented_normals,
    load_point_cloud,
    normalize_to_cube,
)
from .trainer import ABLATIONS, TrainConfig, Trainer, known_voxel_margin

log = logging.getLogger("sspfit")

EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def build_config(profile: str, dim: int, config_path=None, seed=None, iters=None, disable=()) -> TrainConfig:
    """Profile defaults, then the JSON config file, then explicit flags."""
    cfg = TrainConfig.profile(profile, dim=dim)
    if config_path is not None:
        try:
            overrides = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        merged = cfg.to_dict()
        for key, value in overrides.items():
            if key not in merged:
                raise ConfigError(f"{config_path}: unknown key {key!r}")
            if isinstance(merged[key], dict) and isinstance(value, dict):
                unknown = set(value) - set(merged[key])
                if unknown:
                    raise ConfigError(f"{config_path}: unknown keys {sorted(unknown)} in {key!r}")
                merged[key].update(value)
            else:
                merged[key] = value
        try:
            cfg = TrainConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{config_path}: {exc}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed, network=replace(cfg.network, seed=seed))
    if iters is not None:
        cfg = replace(cfg, iterations=iters)
    if disable:
        cfg = replace(cfg, disable=tuple(sorted(set(cfg.disable) | set(disable))))
    cfg = replace(cfg, network=replace(cfg.network, dim=dim))
    return cfg


def _guarantee(field, pe, grid_for_probe, checked: bool):
    margins = known_voxel_margin(field, grid_for_probe, pe)
    eps = grid_for_probe.epsilon
    info = {
        "epsilon": eps,
        "known_voxels": int(len(margins)),
        "fraction_above_minus_eps": float(np.mean(margins > -eps)) if len(margins) else 1.0,
        "min_known_value": float(margins.min()) if len(margins) else None,
    }
    if checked:
        info["status"] = "pass" if info["fraction_above_minus_eps"] == 1.0 else "fail"
    else:
        info["status"] = "unchecked"
    return info


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    inp = Path(args.input)
    if not inp.is_file():
        raise FileNotFoundError(f"input not found: {inp}")
    cfg = build_config(args.profile, args.dim, args.config, args.seed, args.iters, args.disable or ())
    ckpt = Path(args.output_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    stem = ckpt.with_suffix("")

    raw = load_point_cloud(inp, dim=args.dim)
    pc, tf = normalize_to_cube(raw)
    if pc.normals is None and args.estimate_normals:
        pc = estimate_unoriented_normals(pc, k=min(32, len(pc) - 1))

    manifest = {
        "command": "fit",
        "argv": sys.argv[1:],
        "input": str(inp),
        "input_sha256": _digest(inp),
        "seed": cfg.seed,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "transform": tf.to_dict(),
    }
    write_json(f"{stem}.config.json", cfg.to_dict())
    write_json(f"{stem}.manifest.json", manifest)

    trainer = Trainer(pc, cfg)
    write_label_mask(f"{stem}.labels.raw", trainer.grid)
    extra = {"transform": tf.to_dict(), "dim": pc.dim}
    result = trainer.run(log_path=f"{stem}.log.csv", checkpoint_path=ckpt, extra=extra,
                         progress_every=args.progress_every)
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["final_loss"] = result.log[-1]
    manifest["grid_resolution"] = result.grid.resolution
    write_json(f"{stem}.manifest.json", manifest)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_extract(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    field, pe, extra = load_checkpoint(ckpt)
    dim = args.dim or field.config.dim
    if dim != field.config.dim:
        raise ConfigError(f"checkpoint is {field.config.dim}-d, --dim {dim} requested")
    mesh = extract(field, dim, args.resolution, pe)
    if mesh.empty:
        log.warning("empty surface: no zero crossing found")
    if args.denormalize and "transform" in extra:
        tf = NormalizationTransform.from_dict(extra["transform"])
        mesh.vertices = tf.invert(mesh.vertices)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh.save(out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {out}")
    return 0


def _load_surface(path, n, rng, dim):
    """Points and normals sampled from a mesh, or read from a point file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"not found: {path}")
    if path.suffix.lower() == ".obj" or (path.suffix.lower() == ".ply" and _ply_has_faces(path)):
        verts, faces = read_mesh(path)
        return sample_mesh_surface(verts, faces, n, rng)
    pc = load_point_cloud(path, dim=dim)
    if pc.normals is None:
        pc = estimate_unoriented_normals(pc, k=min(32, len(pc) - 1))
    return pc.points, pc.normals


def _ply_has_faces(path) -> bool:
    with open(path, "rb") as fh:
        for line in fh:
            if line.startswith(b"element face"):
                return int(line.split()[2]) > 0
            if line.strip() == b"end_header":
                return False
    return False


def cmd_eval(args) -> int:
    rng = np.random.default_rng(args.seed)
    pred, pred_n = _load_surface(args.pred, args.samples, rng, 3)
    gt, gt_n = _load_surface(args.gt, args.samples, rng, 3)
    report = evaluate_points(pred, pred_n, gt, gt_n, args.tau)
    out = report.to_dict()
    for k in ("cd_l1", "nc", "f_score"):
        print(f"{k}: {out[k]:.6g}")
    if args.report:
        write_json(args.report, out)
    return 0


# ---------------------------------------------------------------------------
# 2D demo
# ---------------------------------------------------------------------------

def _arc(center, radius, t0, t1, n, rng, inward=False):
    t = rng.uniform(t0, t1, n)
    d = np.stack([np.cos(t), np.sin(t)], axis=1)
    return np.asarray(center) + radius * d, -d if inward else d


def demo_shape(shape: str, n: int, rng: np.random.Generator) -> PointCloud:
    """Synthetic 2D point sets with unoriented normals."""
    if shape == "circle":
        pts, nrm = _arc((0, 0), 0.9, 0, 2 * np.pi, n, rng)
    elif shape == "square":
        s = rng.uniform(-0.7, 0.7, n)
        side = rng.integers(0, 4, n)
        pts = np.zeros((n, 2))
        nrm = np.zeros((n, 2))
        for k, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1)]):
            m = side == k
            pts[m, axis] = 0.7 * sign
            pts[m, 1 - axis] = s[m]
            nrm[m, axis] = sign
    elif shape == "two-blobs":
        n1 = int(n * 0.6)
        a, na = _arc((-0.4, 0.1), 0.45, 0, 2 * np.pi, n1, rng)
        b, nb = _arc((0.55, -0.2), 0.3, 0, 2 * np.pi, n - n1, rng)
        pts, nrm = np.vstack([a, b]), np.vstack([na, nb])
    elif shape == "fig1b-contour":
        # crescent (disk minus offset disk) with a small interior cavity
        c_out, r_out = np.array([0.0, 0.0]), 0.85
        c_in, r_in = np.array([0.35, 0.0]), 0.6
        cav_c, cav_r = np.array([-0.55, 0.0]), 0.12
        pts, nrm = [], []
        while sum(len(p) for p in pts) < n:
            a, na = _arc(c_out, r_out, 0, 2 * np.pi, n, rng)
            keep = np.linalg.norm(a - c_in, axis=1) > r_in
            pts.append(a[keep]); nrm.append(na[keep])
            b, nb = _arc(c_in, r_in, 0, 2 * np.pi, n // 2, rng)
            keep = np.linalg.norm(b - c_out, axis=1) < r_out
            pts.append(b[keep]); nrm.append(nb[keep])
            c, nc = _arc(cav_c, cav_r, 0, 2 * np.pi, n // 8, rng)
            pts.append(c); nrm.append(nc)
        pts, nrm = np.vstack(pts), np.vstack(nrm)
        sel = rng.choice(len(pts), n, replace=False)
        pts, nrm = pts[sel], nrm[sel]
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return PointCloud(pts, nrm)


def run_demo2d(shape="circle", supervision="semi-signed", out_dir=None, n_points=500,
               iterations=2000, seed=0, profile="test", resolution=256, disable=()):
    """Fit a synthetic 2D shape end to end and write rasters and contours.

    Returns a report dict; the sign-known guarantee is only checked when
    signed supervision is active.
    """
    rng = np.random.default_rng(seed)
    raw = demo_shape(shape, n_points, rng)
    pc, tf = normalize_to_cube(raw)
    disable = set(disable)
    if supervision == "unsigned-only":
        disable.add("signed")
    elif supervision != "semi-signed":
        raise ConfigError(f"unknown supervision {supervision!r}")
    cfg = build_config(profile, 2, seed=seed, iters=iterations, disable=tuple(disable))
    trainer = Trainer(pc, cfg)
    result = trainer.run()
    # probe grid: the partition the signed loss would use, also for unsigned runs
    probe = build_voxel_grid(pc, trainer.grid.resolution)
    partition_space(probe)
    mesh = extract(result.field, 2, resolution, result.pe)
    report = {
        "shape": shape,
        "supervision": supervision,
        "disabled": sorted(cfg.disable),
        "iterations": iterations,
        "grid_resolution": trainer.grid.resolution,
        "final_loss": result.log[-1],
        "known_guarantee": _guarantee(result.field, result.pe, probe, "signed" not in cfg.disable),
        "contour_vertices": int(len(mesh.vertices)),
    }
    if shape == "circle" and len(mesh.vertices):
        # the analytic circle mapped through the normalization
        center = tf.apply(np.zeros((1, 2)))[0]
        radius = 0.9 * tf.scale
        report["max_radial_error"] = float(np.max(np.abs(np.linalg.norm(mesh.vertices - center, axis=1) - radius)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = KnnIndex(pc)
        coords = -1.0 + (np.arange(resolution) + 0.5) * 2.0 / resolution
        cc, rr = np.meshgrid(coords, coords, indexing="xy")
        gt_u, _ = index.nearest(np.stack([cc.ravel(), rr.ravel()], axis=1))
        save_slice(out / "gt_unsigned.pfm", gt_u.reshape(resolution, resolution))
        save_slice(out / "fitted_sdf.pfm", sdf_slice(result.field, resolution=resolution, pe=result.pe, dim=2))
        save_slice(out / "fitted_abs.pfm", np.abs(sdf_slice(result.field, resolution=resolution, pe=result.pe, dim=2)))
        if not mesh.empty:
            mesh.save(out / "contour.svg")
            mesh.save(out / "contour.csv")
        if "signed" not in cfg.disable:
            write_label_mask(out / "labels.raw", probe)
        write_json(out / "config.json", cfg.to_dict())
        write_json(out / "report.json", report)
    return report, result, mesh


def cmd_demo2d(args) -> int:
    report, _, _ = run_demo2d(args.shape, args.supervision, args.output_dir, args.points,
                              args.iters, args.seed, args.profile, args.resolution, args.disable or ())
    print(json.dumps(report, indent=2, default=_json_default))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sspfit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a neural SDF to a point cloud")
    f.add_argument("--input", required=True)
    f.add_argument("--output-checkpoint", required=True)
    f.add_argument("--config")
    f.add_argument("--profile", choices=["clean", "noisy", "test"], default="clean")
    f.add_argument("--seed", type=int)
    f.add_argument("--iters", type=int)
    f.add_argument("--dim", type=int, choices=[2, 3], default=3)
    f.add_argument("--disable", action="append", choices=ABLATIONS)
    f.add_argument("--estimate-normals", action="store_true",
                   help="PCA normals when the input has none")
    f.add_argument("--progress-every", type=int, default=0)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("extract", help="extract the zero level set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--resolution", type=int)
    e.add_argument("--output", required=True)
    e.add_argument("--dim", type=int, choices=[2, 3])
    e.add_argument("--denormalize", action="store_true",
                   help="map vertices back to the input coordinate frame")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="score a reconstruction against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--samples", type=int, default=40000)
    v.add_argument("--tau", type=float, default=DEFAULT_TAU)
    v.add_argument("--report")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo2d", help="2D ghost-surface demonstration")
    d.add_argument("--shape", choices=["circle", "square", "two-blobs", "fig1b-contour"], default="circle")
    d.add_argument("--supervision", choices=["unsigned-only", "semi-signed"], default="semi-signed")
    d.add_argument("--output-dir", required=True)
    d.add_argument("--points", type=int, default=500)
    d.add_argument("--iters", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--profile", choices=["clean", "noisy", "test"], default="test")
    d.add_argument("--resolution", type=int, default=256)
    d.add_argument("--disable", action="append", choices=ABLATIONS)
    d.set_defaults(func=cmd_demo2d)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLoss, NonFiniteGradient, NonFiniteParameters) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SSPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
