"""Command-line entry point: simulate, track, evaluate, ablate.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import config as config_mod
from . import metrics as metrics_mod
from . import simulator as sim_mod
from . import tracker as trk_mod
from .config import ConfigError, RunConfig
from .geometry import GeometryError
from .metrics import JointTrajectory, MetricsError
from .model import ModelError, joint_positions, pose_mesh
from .simulator import SimulatorError
from .tracker import TrackerError

VALIDATION_ERRORS = (ConfigError, GeometryError, ModelError, SimulatorError,
                     TrackerError, MetricsError)


@click.group()
def main():
    """Event-camera simulation and EM contour tracking toolkit."""


def _fail(exc, code):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _load(config_path, **overrides) -> RunConfig:
    return config_mod.load_config(config_path, overrides=overrides)


def _write_pgm(path, image: np.ndarray):
    """8-bit PGM from a float image (nan/inf map to 0)."""
    img = np.nan_to_num(image, nan=0.0, posinf=0.0, neginf=0.0)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = (scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _dump_modalities(out: Path, modalities):
    for i, frame in enumerate(modalities):
        _write_pgm(out / f"depth_{i:05d}.pgm",
                   np.where(np.isfinite(frame.depth), frame.depth, 0.0))
        _write_pgm(out / f"normal_{i:05d}.pgm",
                   0.5 * (frame.normals[..., 2] + 1.0))
        if frame.motion_field is not None:
            mf = frame.motion_field
            with open(out / f"motion_{i:05d}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["y", "x", "vx", "vy"])
                ys, xs = np.nonzero(np.any(mf != 0, axis=-1))
                for y, x in zip(ys, xs):
                    writer.writerow([y, x, f"{mf[y, x, 0]:.6f}", f"{mf[y, x, 1]:.6f}"])


def _simulate(cfg: RunConfig, seed=None):
    trajectory = cfg.make_trajectory(seed=seed)
    background = cfg.make_background()
    sim_cfg = cfg.simulator if seed is None else replace(cfg.simulator, rng_seed=seed)
    return sim_mod.simulate_sequence(
        cfg.template, trajectory, cfg.camera, sim_cfg, background,
        shading=cfg.shading, record_modalities=cfg.dump_modalities)


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def cmd_simulate(config_path, out_dir, seed):
    """Simulate an event stream and ground truth from a run config."""
    try:
        cfg = _load(config_path, output_dir=out_dir, seed=seed)
    except VALIDATION_ERRORS as exc:
        _fail(exc, 1)
    try:
        events, records, modalities = _simulate(cfg)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        sim_mod.write_events_csv(events, out / "events.csv")
        sim_mod.write_ground_truth(records, out / "gt.jsonl")
        if modalities is not None:
            _dump_modalities(out, modalities)
        duration = records[-1].t - records[0].t
        click.echo(f"{len(events)} events over {duration:.6f} s "
                   f"({len(records)} samples) -> {out}")
    except VALIDATION_ERRORS as exc:
        _fail(exc, 2)


def _read_initial_theta(path, pose_dim):
    """Initial pose from a ground-truth JSONL file or a {'theta': [...]} JSON."""
    path = Path(path)
    if path.suffix == ".jsonl":
        records = sim_mod.read_ground_truth(path)
        if not records:
            raise TrackerError(f"{path}: no ground-truth records")
        theta = records[0].theta
    else:
        with open(path) as fh:
            theta = np.asarray(json.load(fh)["theta"], dtype=float)
    if theta.shape != (pose_dim,):
        raise TrackerError(
            f"initial pose has dim {theta.shape[0]}, template expects {pose_dim}")
    return theta


def _write_trajectory(path, template, trajectory):
    with open(path, "w") as fh:
        for t_mid, theta in trajectory:
            fh.write(json.dumps({
                "t": t_mid,
                "theta": np.asarray(theta).tolist(),
                "joints": joint_positions(template, theta).tolist(),
            }) + "\n")


def _write_diagnostics(path, diagnostics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["buffer", "em_iters", "grad_evals", "inliers",
                         "final_objective", "coasted"])
        for i, d in enumerate(diagnostics):
            writer.writerow([i, d.em_iters, d.grad_evals, d.inlier_count,
                             f"{d.final_objective:.9g}", int(d.coasted)])


@main.command("track")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--events", "events_path", required=True, type=click.Path())
@click.option("--init", "init_path", required=True,
              help="Ground-truth JSONL (first record) or JSON with a theta field.")
@click.option("--out", "out_dir", default=None)
@click.option("--association", type=click.Choice(trk_mod.ASSOCIATIONS), default=None)
@click.option("--variant", type=click.Choice(trk_mod.E_VARIANTS), default=None)
@click.option("--variant-m", type=click.Choice(trk_mod.M_VARIANTS), default=None)
@click.option("--buffer-size", type=int, default=None)
def cmd_track(config_path, events_path, init_path, out_dir, association,
              variant, variant_m, buffer_size):
    """Track an event stream from a known initial pose."""
    try:
        cfg = _load(config_path, output_dir=out_dir, association=association,
                    variant_e=variant, variant_m=variant_m,
                    buffer_size=buffer_size)
    except VALIDATION_ERRORS as exc:
        _fail(exc, 1)
    try:
        ep = Path(events_path)
        events = (sim_mod.read_events_binary(ep) if ep.suffix == ".bin"
                  else sim_mod.read_events_csv(ep))
        theta0 = _read_initial_theta(init_path, cfg.template.pose_dim)
        trajectory, diagnostics = trk_mod.track_stream(
            events, theta0, cfg.template, cfg.camera, cfg.likelihood, cfg.em,
            cfg.buffer_size, prior_weight=cfg.prior_weight)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_trajectory(out / "trajectory.jsonl", cfg.template, trajectory)
        _write_diagnostics(out / "diagnostics.csv", diagnostics)
        click.echo(f"{len(trajectory)} poses from {len(events)} events -> {out}")
    except VALIDATION_ERRORS as exc:
        _fail(exc, 2)


def _trajectories_from_files(trajectory_path, gt_path):
    est_rows = []
    with open(trajectory_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                est_rows.append((float(doc["t"]), np.asarray(doc["joints"], dtype=float)))
            except (KeyError, ValueError) as exc:
                raise MetricsError(f"{trajectory_path}:{lineno}: {exc}") from exc
    if not est_rows:
        raise MetricsError(f"{trajectory_path}: empty trajectory")
    gt_records = sim_mod.read_ground_truth(gt_path)
    if not gt_records:
        raise MetricsError(f"{gt_path}: empty ground truth")
    est = JointTrajectory(times=np.array([t for t, _ in est_rows]),
                          joints=np.stack([j for _, j in est_rows]))
    gt = JointTrajectory(times=np.array([r.t for r in gt_records]),
                         joints=np.stack([r.joints for r in gt_records]))
    return est, gt


@main.command("evaluate")
@click.option("--trajectory", "trajectory_path", required=True, type=click.Path())
@click.option("--gt", "gt_path", required=True, type=click.Path())
@click.option("--out", "out_dir", default=".")
def cmd_evaluate(trajectory_path, gt_path, out_dir):
    """Evaluate a reconstructed trajectory against ground truth."""
    try:
        est, gt = _trajectories_from_files(trajectory_path, gt_path)
        report = metrics_mod.evaluate(est, gt)
    except VALIDATION_ERRORS as exc:
        _fail(exc, 1)
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as fh:
            json.dump(report, fh, indent=2)
        with open(out / "pck_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold_mm", "pck"])
            for tau, p in zip(report["pck_thresholds_mm"], report["pck"]):
                writer.writerow([tau, f"{p:.6f}"])
        click.echo(f"MPJPE mean {report['mpjpe_mean_mm']:.3f} mm, "
                   f"median {report['mpjpe_median_mm']:.3f} mm, "
                   f"AUC {report['auc']:.4f}")
    except OSError as exc:
        _fail(exc, 2)


ABLATION_VARIANTS = [
    ("E3M2", "E3", "M2"),
    ("E2_normal-M2", "E2_normal", "M2"),
    ("E2_longitudinal-M2", "E2_longitudinal", "M2"),
    ("E3-M1_lateral", "E3", "M1_lateral"),
]


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None)
@click.option("--sort", "sort_rows", is_flag=True,
              help="Sort the table by mean MPJPE ascending.")
def cmd_ablate(config_path, out_dir, sort_rows):
    """Run the likelihood-variant x association ablation over seeded sequences."""
    try:
        cfg = _load(config_path, output_dir=out_dir)
        if not cfg.sequence_seeds:
            raise ConfigError("ablate needs a non-empty 'sequence_seeds' list")
    except VALIDATION_ERRORS as exc:
        _fail(exc, 1)
    try:
        sequences = []
        for seed in cfg.sequence_seeds:
            events, records, _ = _simulate(cfg, seed=seed)
            gt = JointTrajectory(times=np.array([r.t for r in records]),
                                 joints=np.stack([r.joints for r in records]))
            sequences.append((seed, events, records, gt))

        rows = []
        for label, variant_e, variant_m in ABLATION_VARIANTS:
            for association in trk_mod.ASSOCIATIONS:
                em = replace(cfg.em, variant_e=variant_e, variant_m=variant_m,
                             association=association)
                errs, aucs = [], []
                for seed, events, records, gt in sequences:
                    trajectory, _ = trk_mod.track_stream(
                        events, records[0].theta, cfg.template, cfg.camera,
                        cfg.likelihood, em, cfg.buffer_size,
                        prior_weight=cfg.prior_weight)
                    est = JointTrajectory(
                        times=np.array([t for t, _ in trajectory]),
                        joints=np.stack([joint_positions(cfg.template, th)
                                         for _, th in trajectory]))
                    report = metrics_mod.evaluate(est, gt)
                    errs.append(report["mpjpe_mean_mm"])
                    aucs.append(report["auc"])
                name = label + "-" + association
                if label == "E3M2" and association == cfg.em.association:
                    name += " (default)"
                rows.append((name, float(np.mean(errs)), float(np.mean(aucs))))

        if sort_rows:
            rows.sort(key=lambda r: r[1])
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "mpjpe_mean_mm", "auc"])
            for name, err, a in rows:
                writer.writerow([name, f"{err:.6f}", f"{a:.6f}"])
        width = max(len(r[0]) for r in rows)
        lines = [f"{'variant'.ljust(width)}  {'MPJPE(mm)':>10}  {'AUC':>8}"]
        for name, err, a in rows:
            lines.append(f"{name.ljust(width)}  {err:>10.4f}  {a:>8.4f}")
        table = "\n".join(lines)
        (out / "ablation.txt").write_text(table + "\n")
        click.echo(table)
    except VALIDATION_ERRORS as exc:
        _fail(exc, 2)


if __name__ == "__main__":
    main()
