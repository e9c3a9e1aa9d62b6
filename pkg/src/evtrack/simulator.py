"""Event-stream synthesis from animated skinned meshes.

The pipeline per sample instant: rasterize the posed mesh over a static
background (z-buffered, Lambertian shading, log brightness), compute the
per-pixel 2D motion field toward a lookahead pose, choose the next sample
time so that the fastest pixel moves at most a fixed budget, and compare
consecutive log-brightness images against per-pixel noisy contrast
thresholds to emit events. Salt-and-pepper noise events are drawn uniformly
over the sensor with timestamps uniform in the sample interval.

Ground-truth pose/joint records are emitted once per sample instant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .model import KinematicTemplate, PosedMesh, joint_positions, pose_mesh
from .geometry import PinholeCamera

__all__ = [
    "SimulatorError",
    "SimulatorConfig",
    "ShadingConfig",
    "Event",
    "EVENT_DTYPE",
    "FrameModalities",
    "GroundTruthRecord",
    "render",
    "motion_field",
    "adaptive_dt",
    "generate_events",
    "simulate_sequence",
    "write_events_csv",
    "read_events_csv",
    "write_events_binary",
    "read_events_binary",
    "write_ground_truth",
    "read_ground_truth",
    "load_background",
    "make_textured_background",
]

EVENT_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

LOG_EPS = 1e-4


class SimulatorError(ValueError):
    """Raised on invalid simulator configuration or inputs."""


@dataclass(frozen=True)
class SimulatorConfig:
    c_pos: float = 0.5
    c_neg: float = 0.5
    threshold_sigma: float = 0.0004
    sp_rate: float = 1e-5
    max_pixel_disp: float = 1.0
    rng_seed: int = 0
    dt_min: float = 1e-5
    dt_max: float = 0.05
    reference_memory: bool = False

    def __post_init__(self):
        if self.c_pos <= 0 or self.c_neg <= 0:
            raise SimulatorError("contrast thresholds must be positive")
        if self.threshold_sigma < 0:
            raise SimulatorError("threshold_sigma must be non-negative")
        if not (0.0 <= self.sp_rate <= 1.0):
            raise SimulatorError("sp_rate must lie in [0, 1]")
        if self.max_pixel_disp <= 0:
            raise SimulatorError("max_pixel_disp must be positive")
        if not (0 < self.dt_min <= self.dt_max):
            raise SimulatorError("require 0 < dt_min <= dt_max")


@dataclass(frozen=True)
class ShadingConfig:
    albedo: float = 0.85
    ambient: float = 0.35
    light_dir: tuple[float, float, float] = (0.3, -0.5, 0.8)


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    polarity: int


@dataclass
class FrameModalities:
    """Per-sample rendered channels plus rasterizer maps for correspondence."""

    log_brightness: NDArray[np.float64]   # (H, W)
    depth: NDArray[np.float64]            # (H, W), inf on background
    normals: NDArray[np.float64]          # (H, W, 3), zero on background
    motion_field: NDArray[np.float64] | None = None   # (H, W, 2) px/s
    face_index: NDArray[np.int64] = field(default=None, repr=False)
    barycentric: NDArray[np.float64] = field(default=None, repr=False)

    @property
    def object_mask(self) -> NDArray[np.bool_]:
        return np.isfinite(self.depth)


@dataclass
class GroundTruthRecord:
    t: float
    theta: NDArray[np.float64]
    joints: NDArray[np.float64]


def _shade(normals: NDArray[np.float64], shading: ShadingConfig) -> NDArray[np.float64]:
    """Lambertian intensity in [0, 1] for unit face normals (..., 3)."""
    light = np.asarray(shading.light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    lam = np.abs(normals @ light)
    return np.clip(shading.albedo * (shading.ambient + (1.0 - shading.ambient) * lam),
                   0.0, 1.0)


def render(mesh: PosedMesh | None, camera: PinholeCamera,
           background: NDArray[np.float64],
           shading: ShadingConfig = ShadingConfig()) -> FrameModalities:
    """Z-buffered rasterization of a posed mesh over a static background.

    Background pixels carry the background intensity; object pixels are
    shaded with a flat Lambertian term from the winning face. Log brightness
    is ln(intensity + eps).
    """
    h, w = background.shape
    if (w, h) != (camera.width, camera.height):
        raise SimulatorError("background dimensions must match the camera resolution")
    depth = np.full((h, w), np.inf)
    face_index = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))

    if mesh is not None and len(mesh.faces) > 0:
        pc = camera.to_camera_frame(mesh.vertices)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = camera.fx * pc[:, 0] / z + camera.cx
            py = camera.fy * pc[:, 1] / z + camera.cy
        tri_px = px[mesh.faces]   # (F, 3)
        tri_py = py[mesh.faces]
        tri_z = z[mesh.faces]
        renderable = np.all(tri_z > 1e-6, axis=1)

        for fi in np.flatnonzero(renderable):
            x0, x1, x2 = tri_px[fi]
            y0, y1, y2 = tri_py[fi]
            det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if abs(det) < 1e-12:
                continue
            xlo = max(int(np.ceil(min(x0, x1, x2))), 0)
            xhi = min(int(np.floor(max(x0, x1, x2))), w - 1)
            ylo = max(int(np.ceil(min(y0, y1, y2))), 0)
            yhi = min(int(np.floor(max(y0, y1, y2))), h - 1)
            if xlo > xhi or ylo > yhi:
                continue
            xs = np.arange(xlo, xhi + 1)
            ys = np.arange(ylo, yhi + 1)
            gx, gy = np.meshgrid(xs, ys)
            l1 = ((gx - x0) * (y2 - y0) - (x2 - x0) * (gy - y0)) / det
            l2 = ((x1 - x0) * (gy - y0) - (gx - x0) * (y1 - y0)) / det
            l0 = 1.0 - l1 - l2
            inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
            if not inside.any():
                continue
            # perspective-correct interpolation via inverse depth
            z0, z1, z2 = tri_z[fi]
            inv_z = l0 / z0 + l1 / z1 + l2 / z2
            zpix = 1.0 / inv_z
            closer = inside & (zpix < depth[ylo:yhi + 1, xlo:xhi + 1])
            if not closer.any():
                continue
            sub_depth = depth[ylo:yhi + 1, xlo:xhi + 1]
            sub_face = face_index[ylo:yhi + 1, xlo:xhi + 1]
            sub_bary = bary[ylo:yhi + 1, xlo:xhi + 1]
            sub_depth[closer] = zpix[closer]
            sub_face[closer] = fi
            b0 = (l0 / z0) * zpix
            b1 = (l1 / z1) * zpix
            b2 = (l2 / z2) * zpix
            sub_bary[closer] = np.stack([b0, b1, b2], axis=-1)[closer]

    mask = face_index >= 0
    normals = np.zeros((h, w, 3))
    intensity = background.astype(float).copy()
    if mesh is not None and mask.any():
        fidx = face_index[mask]
        normals[mask] = mesh.normals[fidx]
        intensity[mask] = _shade(mesh.normals, ShadingConfig() if shading is None else shading)[fidx]

    return FrameModalities(
        log_brightness=np.log(intensity + LOG_EPS),
        depth=depth,
        normals=normals,
        face_index=face_index,
        barycentric=bary,
    )


def motion_field(template: KinematicTemplate, theta_a, theta_b, dt: float,
                 camera: PinholeCamera,
                 frame_a: FrameModalities | None = None,
                 mesh_b: PosedMesh | None = None) -> NDArray[np.float64]:
    """Per-pixel image velocity (px/s) from pose a to pose b.

    For each pixel owned by a face at pose a, the same surface point (fixed
    barycentric coordinates) is projected at pose b; the field is the pixel
    displacement divided by dt. Zero on background pixels.
    """
    if dt <= 0:
        raise SimulatorError("dt must be positive")
    if frame_a is None:
        mesh_a = pose_mesh(template, theta_a)
        frame_a = render(mesh_a, camera,
                         np.zeros((camera.height, camera.width)))
    if mesh_b is None:
        mesh_b = pose_mesh(template, theta_b)

    h, w = frame_a.depth.shape
    out = np.zeros((h, w, 2))
    mask = frame_a.face_index >= 0
    if not mask.any():
        return out
    fidx = frame_a.face_index[mask]
    bc = frame_a.barycentric[mask]                      # (M, 3)
    tri_b = mesh_b.vertices[mesh_b.faces[fidx]]         # (M, 3, 3)
    pts_b = np.einsum("mk,mki->mi", bc, tri_b)
    proj_b = camera.project(pts_b)                      # (M, 2)
    ys, xs = np.nonzero(mask)
    cur = np.stack([xs.astype(float), ys.astype(float)], axis=-1)
    vel = (proj_b - cur) / dt
    vel[~np.isfinite(vel)] = 0.0
    out[mask] = vel
    return out


def adaptive_dt(field: NDArray[np.float64], budget: float,
                dt_min: float, dt_max: float) -> float:
    """Sample interval so the fastest pixel moves at most `budget` pixels."""
    if budget <= 0:
        raise SimulatorError("displacement budget must be positive")
    speed = float(np.max(np.linalg.norm(field, axis=-1))) if field.size else 0.0
    if speed <= 0.0:
        return dt_max
    return float(np.clip(budget / speed, dt_min, dt_max))


def generate_events(prev_log: NDArray[np.float64], cur_log: NDArray[np.float64],
                    t_prev: float, t_cur: float, config: SimulatorConfig,
                    rng: np.random.Generator) -> NDArray:
    """Events between two log-brightness samples, time-sorted.

    Per pixel the contrast thresholds are redrawn from N(c, sigma) (clamped
    below at 1e-6); one event fires per pixel and polarity when the change
    exceeds the threshold, stamped at t_cur. Salt-and-pepper events fire per
    pixel with probability sp_rate, with uniform random polarity and a
    timestamp uniform in [t_prev, t_cur].
    """
    if prev_log.shape != cur_log.shape:
        raise SimulatorError("image shapes differ")
    if t_cur <= t_prev:
        raise SimulatorError("t_cur must exceed t_prev")
    h, w = cur_log.shape
    diff = cur_log - prev_log

    if config.threshold_sigma > 0:
        c_pos = rng.normal(config.c_pos, config.threshold_sigma, size=(h, w))
        c_neg = rng.normal(config.c_neg, config.threshold_sigma, size=(h, w))
        c_pos = np.maximum(c_pos, 1e-6)
        c_neg = np.maximum(c_neg, 1e-6)
    else:
        c_pos = config.c_pos
        c_neg = config.c_neg

    ys_p, xs_p = np.nonzero(diff >= c_pos)
    ys_n, xs_n = np.nonzero(-diff >= c_neg)

    chunks = []
    if len(xs_p):
        ev = np.empty(len(xs_p), dtype=EVENT_DTYPE)
        ev["t"] = t_cur
        ev["x"] = xs_p
        ev["y"] = ys_p
        ev["p"] = 1
        chunks.append(ev)
    if len(xs_n):
        ev = np.empty(len(xs_n), dtype=EVENT_DTYPE)
        ev["t"] = t_cur
        ev["x"] = xs_n
        ev["y"] = ys_n
        ev["p"] = -1
        chunks.append(ev)

    if config.sp_rate > 0:
        hit = rng.random((h, w)) < config.sp_rate
        ys_s, xs_s = np.nonzero(hit)
        if len(xs_s):
            ev = np.empty(len(xs_s), dtype=EVENT_DTYPE)
            ev["t"] = rng.uniform(t_prev, t_cur, size=len(xs_s))
            ev["x"] = xs_s
            ev["y"] = ys_s
            ev["p"] = np.where(rng.random(len(xs_s)) < 0.5, 1, -1)
            chunks.append(ev)

    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    out = np.concatenate(chunks)
    return out[np.argsort(out["t"], kind="stable")]


def _interp_theta(keyframes, t):
    """Piecewise-linear pose interpolation over (time, theta) keyframes."""
    times = np.array([k[0] for k in keyframes])
    idx = int(np.searchsorted(times, t, side="right")) - 1
    idx = max(0, min(idx, len(keyframes) - 2))
    t0, th0 = keyframes[idx]
    t1, th1 = keyframes[idx + 1]
    a = 0.0 if t1 == t0 else np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
    return (1 - a) * np.asarray(th0, dtype=float) + a * np.asarray(th1, dtype=float)


def simulate_sequence(template: KinematicTemplate, trajectory, camera: PinholeCamera,
                      config: SimulatorConfig, background: NDArray[np.float64],
                      shading: ShadingConfig = ShadingConfig(),
                      record_modalities: bool = False):
    """Simulate an event stream for a keyframed pose trajectory.

    `trajectory` is a list of (time, theta) keyframes with strictly
    increasing times; poses change linearly between keyframes. Returns
    (events, ground_truth_records, modalities) where modalities is a list of
    FrameModalities when `record_modalities` is set, else None.
    """
    if len(trajectory) < 2:
        raise SimulatorError("trajectory needs at least 2 keyframes")
    times = [k[0] for k in trajectory]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise SimulatorError("keyframe times must be strictly increasing")

    rng = np.random.default_rng(config.rng_seed)
    t = float(times[0])
    t_end = float(times[-1])
    theta = _interp_theta(trajectory, t)
    mesh = pose_mesh(template, theta)
    frame = render(mesh, camera, background, shading)
    reference_log = frame.log_brightness.copy()

    events = []
    records = [GroundTruthRecord(t=t, theta=theta,
                                 joints=joint_positions(template, theta))]
    modalities = [] if record_modalities else None

    while t < t_end - 1e-12:
        # lookahead to the end of the current linear segment (or dt_max),
        # so the velocity estimate is exact for the step actually taken
        t_la = min(t + config.dt_max, t_end)
        for kt in times:
            if t + 1e-12 < kt < t_la:
                t_la = float(kt)
                break
        theta_la = _interp_theta(trajectory, t_la)
        field = motion_field(template, theta, theta_la, t_la - t, camera,
                             frame_a=frame)
        dt = adaptive_dt(field, config.max_pixel_disp, config.dt_min, config.dt_max)
        # also bound the projected vertex motion directly: the per-pixel field
        # can undersample the fastest vertex
        mesh_la = pose_mesh(template, theta_la)
        pa = camera.project(mesh.vertices)
        pb = camera.project(mesh_la.vertices)
        disp = np.linalg.norm(pb - pa, axis=-1)
        disp = disp[np.isfinite(disp)]
        if disp.size and disp.max() > 0:
            v_speed = disp.max() / (t_la - t)
            dt = min(dt, max(config.max_pixel_disp / v_speed, config.dt_min))
        t_next = min(t + dt, t_end)
        # never step across a keyframe: velocity is only constant in between
        for kt in times:
            if t + 1e-12 < kt < t_next:
                t_next = kt
                break

        theta_next = _interp_theta(trajectory, t_next)
        mesh_next = pose_mesh(template, theta_next)
        frame_next = render(mesh_next, camera, background, shading)

        prev_log = reference_log if config.reference_memory else frame.log_brightness
        ev = generate_events(prev_log, frame_next.log_brightness, t, t_next,
                             config, rng)
        if config.reference_memory and len(ev):
            sig = ev["t"] == t_next
            reference_log[ev["y"][sig], ev["x"][sig]] = \
                frame_next.log_brightness[ev["y"][sig], ev["x"][sig]]
        events.append(ev)

        if record_modalities:
            frame.motion_field = field
            modalities.append(frame)

        t, theta, mesh, frame = t_next, theta_next, mesh_next, frame_next
        records.append(GroundTruthRecord(t=t, theta=theta,
                                         joints=joint_positions(template, theta)))

    if record_modalities:
        modalities.append(frame)

    if events:
        stream = np.concatenate(events)
        stream = stream[np.argsort(stream["t"], kind="stable")]
    else:
        stream = np.empty(0, dtype=EVENT_DTYPE)
    return stream, records, modalities


# --- file formats -------------------------------------------------------

def write_events_csv(events: NDArray, path):
    """Event stream CSV: header t,x,y,p with 9-decimal timestamps."""
    with open(path, "w") as fh:
        fh.write("t,x,y,p\n")
        for e in events:
            fh.write(f"{e['t']:.9f},{e['x']},{e['y']},{e['p']}\n")


def read_events_csv(path) -> NDArray:
    events = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t,x,y,p":
            raise SimulatorError(f"{path}: expected header 't,x,y,p', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise SimulatorError(f"{path}:{lineno}: malformed event row {line!r}")
            try:
                events.append((float(parts[0]), int(parts[1]), int(parts[2]),
                               int(parts[3])))
            except ValueError as exc:
                raise SimulatorError(f"{path}:{lineno}: {exc}") from exc
    return np.array(events, dtype=EVENT_DTYPE)


def write_events_binary(events: NDArray, path):
    """Binary stream: little-endian u64 record count, then f64/u16/u16/i8 records."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(events)))
        fh.write(np.ascontiguousarray(events, dtype=EVENT_DTYPE).tobytes())


def read_events_binary(path) -> NDArray:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise SimulatorError(f"{path}: truncated header")
        (count,) = struct.unpack("<Q", raw)
        data = fh.read(count * EVENT_DTYPE.itemsize)
    if len(data) != count * EVENT_DTYPE.itemsize:
        raise SimulatorError(f"{path}: truncated event records")
    return np.frombuffer(data, dtype=EVENT_DTYPE).copy()


def write_ground_truth(records: list[GroundTruthRecord], path):
    """Ground truth JSON lines: one {t, theta, joints} object per sample."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"t": r.t,
                                 "theta": np.asarray(r.theta).tolist(),
                                 "joints": np.asarray(r.joints).tolist()}) + "\n")


def read_ground_truth(path) -> list[GroundTruthRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(GroundTruthRecord(
                    t=float(doc["t"]),
                    theta=np.asarray(doc["theta"], dtype=float),
                    joints=np.asarray(doc["joints"], dtype=float)))
            except (KeyError, ValueError) as exc:
                raise SimulatorError(f"{path}:{lineno}: {exc}") from exc
    return records


def make_textured_background(width: int, height: int, seed: int,
                             smoothing: int = 4, lo: float = 0.1,
                             hi: float = 0.9) -> NDArray[np.float64]:
    """Seeded smooth random texture spanning [lo, hi], for self-contained runs."""
    rng = np.random.default_rng(seed)
    img = rng.random((height, width))
    for _ in range(smoothing):
        img = 0.25 * (np.roll(img, 1, 0) + np.roll(img, -1, 0)
                      + np.roll(img, 1, 1) + np.roll(img, -1, 1))
    mn, mx = img.min(), img.max()
    img = (img - mn) / max(mx - mn, 1e-12)
    return lo + (hi - lo) * img


def load_background(path) -> NDArray[np.float64]:
    """Grayscale background image in [0, 1] from a PGM/PNG file."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=float)
    return arr / 255.0
