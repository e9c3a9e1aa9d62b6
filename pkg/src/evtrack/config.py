"""Run configuration: loading, validation, and built-in motion generators.

A single TOML or JSON file describes a full run: camera intrinsics, the
simulator block, the template (built-in name or JSON path), the motion
trajectory (explicit keyframes or a named generator), and the tracker
block. Every numeric field is validated against its domain invariants at
load time, before any computation starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import GeometryError, PinholeCamera
from .model import KinematicTemplate, ModelError, get_builtin_template, load_template
from .simulator import ShadingConfig, SimulatorConfig, SimulatorError
from .tracker import (EmConfig, LikelihoodParams, TrackerError,
                      default_likelihood_params)

__all__ = ["ConfigError", "RunConfig", "load_config", "generate_trajectory"]


class ConfigError(ValueError):
    """Raised with a field-level diagnostic on invalid configuration."""


@dataclass
class RunConfig:
    camera: PinholeCamera
    template: KinematicTemplate
    simulator: SimulatorConfig
    shading: ShadingConfig
    background_spec: dict
    trajectory_spec: dict
    likelihood: LikelihoodParams
    em: EmConfig
    buffer_size: int
    prior_weight: float
    output_dir: str
    seed: int
    sequence_seeds: list[int]
    dump_modalities: bool
    eval_max_time_gap: float | None

    def make_background(self) -> np.ndarray:
        from .simulator import load_background, make_textured_background

        spec = self.background_spec
        if "path" in spec:
            bg = load_background(spec["path"])
            if bg.shape != (self.camera.height, self.camera.width):
                raise ConfigError(
                    f"background {spec['path']} is {bg.shape[::-1]}, camera is "
                    f"{self.camera.width}x{self.camera.height}")
            return bg
        return make_textured_background(self.camera.width, self.camera.height,
                                        seed=int(spec.get("seed", self.seed)))

    def make_trajectory(self, seed: int | None = None):
        return generate_trajectory(self.template, self.trajectory_spec,
                                   seed=self.seed if seed is None else seed)


def _read_document(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml
        except ImportError:
            import tomli as toml
        try:
            return toml.loads(text)
        except toml.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def _section(doc: dict, name: str, required=True) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing config section '{name}'")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be a table/object")
    return sec


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Load and validate a run configuration file.

    `overrides` maps dotted keys from CLI flags (e.g. "em.association",
    "buffer_size", "seed", "output_dir") onto the document.
    """
    doc = _read_document(path)
    base = Path(path).parent

    cam_doc = _section(doc, "camera")
    try:
        camera = PinholeCamera(
            fx=float(cam_doc["fx"]), fy=float(cam_doc["fy"]),
            cx=float(cam_doc["cx"]), cy=float(cam_doc["cy"]),
            width=int(cam_doc["width"]), height=int(cam_doc["height"]))
    except KeyError as exc:
        raise ConfigError(f"camera: missing field {exc}") from exc
    except GeometryError as exc:
        raise ConfigError(f"camera: {exc}") from exc

    tmpl_doc = doc.get("template", "finger3")
    try:
        if isinstance(tmpl_doc, str):
            template = get_builtin_template(tmpl_doc)
        else:
            tpath = base / tmpl_doc["path"]
            if not tpath.exists():
                raise ConfigError(f"template file not found: {tpath}")
            template = load_template(tpath)
    except ModelError as exc:
        raise ConfigError(f"template: {exc}") from exc

    sim_doc = _section(doc, "simulator", required=False)
    try:
        simulator = SimulatorConfig(**{k: sim_doc[k] for k in sim_doc
                                       if k not in ("background",)})
    except (TypeError, SimulatorError) as exc:
        raise ConfigError(f"simulator: {exc}") from exc

    shade_doc = _section(doc, "shading", required=False)
    try:
        shading = ShadingConfig(
            albedo=float(shade_doc.get("albedo", 0.85)),
            ambient=float(shade_doc.get("ambient", 0.35)),
            light_dir=tuple(shade_doc.get("light_dir", (0.3, -0.5, 0.8))))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"shading: {exc}") from exc

    bg_doc = _section(doc, "background", required=False)
    if "path" in bg_doc:
        bg_path = base / bg_doc["path"]
        if not bg_path.exists():
            raise ConfigError(f"background image not found: {bg_path}")
        bg_doc = dict(bg_doc, path=str(bg_path))

    traj_doc = _section(doc, "trajectory")
    if "keyframes" not in traj_doc and "generator" not in traj_doc:
        raise ConfigError("trajectory: need either 'keyframes' or 'generator'")

    trk_doc = _section(doc, "tracker", required=False)
    lik_doc = trk_doc.get("likelihood")
    try:
        likelihood = (default_likelihood_params(template) if lik_doc is None
                      else LikelihoodParams(**lik_doc))
        em_doc = dict(trk_doc.get("em", {}))
        if overrides:
            for key in ("variant_e", "variant_m", "association"):
                if overrides.get(key) is not None:
                    em_doc[key] = overrides[key]
        em = EmConfig(**em_doc)
    except (TypeError, TrackerError) as exc:
        raise ConfigError(f"tracker: {exc}") from exc

    buffer_size = int(trk_doc.get("buffer_size", 300))
    if overrides and overrides.get("buffer_size") is not None:
        buffer_size = int(overrides["buffer_size"])
    if buffer_size < 1:
        raise ConfigError("tracker: buffer_size must be at least 1")
    prior_weight = float(trk_doc.get("prior_weight", 0.01))
    if prior_weight < 0:
        raise ConfigError("tracker: prior_weight must be non-negative")

    seed = int(doc.get("seed", 0))
    if overrides and overrides.get("seed") is not None:
        seed = int(overrides["seed"])
    output_dir = str(doc.get("output_dir", "out"))
    if overrides and overrides.get("output_dir") is not None:
        output_dir = str(overrides["output_dir"])

    seq_seeds = doc.get("sequence_seeds", [])
    if not isinstance(seq_seeds, list):
        raise ConfigError("sequence_seeds must be a list of integers")

    eval_doc = _section(doc, "evaluation", required=False)
    gap = eval_doc.get("max_time_gap")

    return RunConfig(
        camera=camera, template=template, simulator=simulator, shading=shading,
        background_spec=bg_doc, trajectory_spec=traj_doc, likelihood=likelihood,
        em=em, buffer_size=buffer_size, prior_weight=prior_weight,
        output_dir=output_dir, seed=seed,
        sequence_seeds=[int(s) for s in seq_seeds],
        dump_modalities=bool(doc.get("dump_modalities", False)),
        eval_max_time_gap=None if gap is None else float(gap),
    )


# --- motion generators --------------------------------------------------

def _smooth_random_walk(dim, duration, num_keys, step_scale, rng,
                        samples_per_second=80):
    """Cubic-spline-smoothed random walk through `num_keys` control poses."""
    key_times = np.linspace(0.0, duration, num_keys)
    steps = rng.normal(0.0, step_scale, size=(num_keys - 1, dim))
    control = np.vstack([np.zeros(dim), np.cumsum(steps, axis=0)])
    spline = CubicSpline(key_times, control, axis=0)
    n = max(int(duration * samples_per_second), 2 * num_keys)
    times = np.linspace(0.0, duration, n + 1)
    values = spline(times)
    return [(float(t), values[i]) for i, t in enumerate(times)]


def generate_trajectory(template: KinematicTemplate, spec: dict, seed: int):
    """Keyframe list for the simulator from a trajectory specification.

    Explicit keyframes pass through; named generators are `sweep` (linear
    single-joint ramp), `pca_random` (smooth random walk over all pose
    coefficients), and `arm_hand` (random walk with separate elbow and hand
    amplitudes, for templates whose first 3 coefficients are raw elbow
    angles).
    """
    if "keyframes" in spec:
        keys = [(float(t), np.asarray(th, dtype=float)) for t, th in spec["keyframes"]]
        for _, th in keys:
            if th.shape != (template.pose_dim,):
                raise ConfigError(
                    f"keyframe pose has dim {th.shape[0]}, template expects "
                    f"{template.pose_dim}")
        return keys

    gen = spec["generator"]
    duration = float(spec.get("duration", 0.5))
    if duration <= 0:
        raise ConfigError("trajectory: duration must be positive")
    rng = np.random.default_rng(seed)
    dim = template.pose_dim

    if gen == "sweep":
        joint = int(spec.get("joint", 0))
        if not (0 <= joint < dim):
            raise ConfigError(f"trajectory: sweep joint {joint} out of range")
        amplitude = float(spec.get("amplitude", 1.0))
        theta1 = np.zeros(dim)
        theta1[joint] = amplitude
        return [(0.0, np.zeros(dim)), (duration, theta1)]

    if gen == "pca_random":
        num_keys = int(spec.get("num_keyframes", 6))
        step = float(spec.get("amplitude", 0.4))
        return _smooth_random_walk(dim, duration, max(num_keys, 2), step, rng)

    if gen == "arm_hand":
        num_keys = int(spec.get("num_keyframes", 6))
        hand_step = float(spec.get("amplitude", 0.4))
        elbow_step = float(spec.get("elbow_amplitude", 0.15))
        if dim < 4:
            raise ConfigError("trajectory: arm_hand needs >= 4 pose dims")
        keys = _smooth_random_walk(dim, duration, max(num_keys, 2), hand_step, rng)
        scale = elbow_step / hand_step if hand_step > 0 else 0.0
        return [(t, np.concatenate([th[:3] * scale, th[3:]])) for t, th in keys]

    raise ConfigError(f"trajectory: unknown generator {gen!r}")
