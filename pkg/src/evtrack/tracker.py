"""Incremental EM pose reconstruction from event buffers.

Events are aggregated into fixed-count buffers. For each buffer, the E-step
computes soft association probabilities of events to mesh faces from the
contour measurement likelihood (lateral x longitudinal x angular factors),
and the M-step maximizes the expected log-likelihood (lateral + angular
terms only) plus a constant-velocity prior over the pose vector, by gradient
ascent with finite-difference gradients. Buffer-to-buffer, the pose is
extrapolated with the estimated velocity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import _kernels
from .geometry import PinholeCamera, batch_geometry
from .model import KinematicTemplate, PosedMesh, pose_mesh

__all__ = [
    "TrackerError",
    "LikelihoodParams",
    "EmConfig",
    "EventBuffer",
    "AssociationMatrix",
    "MotionPriorState",
    "BufferDiagnostics",
    "sigmoid",
    "log_sigmoid",
    "e_likelihood",
    "m_likelihood_log",
    "e_step",
    "m_step_objective",
    "optimize_buffer",
    "predict_init",
    "track_stream",
    "default_likelihood_params",
]

logger = logging.getLogger(__name__)

E_VARIANTS = ("E3", "E2_normal", "E2_longitudinal")
M_VARIANTS = ("M2", "M1_lateral")
ASSOCIATIONS = ("soft", "hard")


class TrackerError(ValueError):
    """Raised on invalid tracker configuration or failed optimization."""


@dataclass(frozen=True)
class LikelihoodParams:
    """Sharpness parameters of the contour measurement likelihood.

    alpha scales the squared lateral distance (m^2), beta the longitudinal
    distance (m), gamma the angular error (dimensionless). d_lat_max rejects
    outlier events whose sight line passes no face closer than this (m).
    """

    alpha: float
    beta: float
    gamma: float
    d_lat_max: float

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "d_lat_max"):
            if getattr(self, name) <= 0:
                raise TrackerError(f"{name} must be strictly positive")


def default_likelihood_params(template: KinematicTemplate) -> LikelihoodParams:
    """Scene-scale-relative defaults, tuned on the built-in templates."""
    diag = template.bbox_diagonal()
    return LikelihoodParams(
        alpha=(0.02 * diag) ** 2,
        beta=2.0 * diag,
        gamma=0.25,
        d_lat_max=0.05 * diag,
    )


@dataclass(frozen=True)
class EmConfig:
    variant_e: str = "E3"
    variant_m: str = "M2"
    association: str = "soft"
    max_em_iters: int = 16
    expectation_update_tol: float = 0.02
    early_stop_tol: float = 1e-4
    step_size: float = 0.1
    max_grad_iters: int = 12
    grad_mode: str = "finite_difference"
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.variant_e not in E_VARIANTS:
            raise TrackerError(f"variant_e must be one of {E_VARIANTS}")
        if self.variant_m not in M_VARIANTS:
            raise TrackerError(f"variant_m must be one of {M_VARIANTS}")
        if self.association not in ASSOCIATIONS:
            raise TrackerError(f"association must be one of {ASSOCIATIONS}")
        if self.grad_mode not in ("finite_difference",):
            raise TrackerError("grad_mode must be 'finite_difference'")
        for name in ("expectation_update_tol", "early_stop_tol", "step_size",
                     "fd_step"):
            if getattr(self, name) <= 0:
                raise TrackerError(f"{name} must be strictly positive")
        if self.max_em_iters < 1 or self.max_grad_iters < 1:
            raise TrackerError("iteration limits must be at least 1")


@dataclass(frozen=True)
class EventBuffer:
    """Fixed-count, time-sorted window of events."""

    events: NDArray  # structured array with fields t, x, y, p
    t_start: float
    t_end: float

    @property
    def t_mid(self) -> float:
        return 0.5 * (self.t_start + self.t_end)

    def __len__(self):
        return len(self.events)


@dataclass
class AssociationMatrix:
    """Per-buffer soft assignment q(z_i = j); outlier rows are all-zero."""

    q: NDArray[np.float64]          # (N, F)
    inlier_mask: NDArray[np.bool_]  # (N,)

    @property
    def num_inliers(self) -> int:
        return int(self.inlier_mask.sum())


@dataclass(frozen=True)
class MotionPriorState:
    """Constant-velocity prior: penalize k * ||(theta - theta_prev)/dt - v_prev||^2."""

    theta_prev: NDArray[np.float64]
    v_prev: NDArray[np.float64]
    dt: float
    k: float  # positive weight; the penalty is subtracted from the objective

    def __post_init__(self):
        if self.dt <= 0:
            raise TrackerError("prior dt must be positive")

    def log_prior(self, theta: NDArray[np.float64]) -> float:
        v = (np.asarray(theta) - self.theta_prev) / self.dt
        return -self.k * float(np.sum((v - self.v_prev) ** 2))

    def stationary_point(self) -> NDArray[np.float64]:
        return self.theta_prev + self.v_prev * self.dt


@dataclass
class BufferDiagnostics:
    em_iters: int = 0
    grad_evals: int = 0
    inlier_count: int = 0
    final_objective: float = float("nan")
    coasted: bool = False


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """ln sigma(x), stable for large negative arguments."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    out[~pos] = x[~pos] - np.log1p(np.exp(x[~pos]))
    return out


def _e_weights(d_lat, sign, d_long, r_ang, params: LikelihoodParams,
               variant_e: str):
    """Unnormalized E-step likelihood weights; zero where d_long <= 0."""
    w = sigmoid(sign * d_lat ** 2 / params.alpha)
    if variant_e in ("E3", "E2_longitudinal"):
        w = w * np.exp(-np.maximum(d_long, 0.0) / params.beta)
    if variant_e in ("E3", "E2_normal"):
        w = w * np.exp(-r_ang / params.gamma)
    return np.where(d_long > 0, w, 0.0)


def _m_log_weights(d_lat, sign, r_ang, params: LikelihoodParams, variant_m: str):
    """Log measurement weights for the M-step (no longitudinal term)."""
    lw = log_sigmoid(sign * d_lat ** 2 / params.alpha)
    if variant_m == "M2":
        lw = lw - r_ang / params.gamma
    return lw


def e_likelihood(geom, params: LikelihoodParams, variant_e: str = "E3") -> float:
    """Unnormalized measurement likelihood weight for one (event, face) pair."""
    return float(_e_weights(np.float64(geom.d_lat), np.float64(geom.sign),
                            np.float64(geom.d_long), np.float64(geom.r_ang),
                            params, variant_e))


def m_likelihood_log(geom, params: LikelihoodParams, variant_m: str = "M2") -> float:
    """Log measurement weight for one (event, face) pair, M-step form."""
    return float(_m_log_weights(np.float64(geom.d_lat), np.float64(geom.sign),
                                np.float64(geom.r_ang), params, variant_m))


def event_rays(events: NDArray, camera: PinholeCamera):
    """World-frame sight-line origins (N, 3) and unit directions (N, 3)."""
    x = events["x"].astype(float)
    y = events["y"].astype(float)
    d_cam = np.stack([(x - camera.cx) / camera.fx,
                      (y - camera.cy) / camera.fy,
                      np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.r_cam_to_world.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape)
    return origins, d_world


def e_step(buffer: EventBuffer, mesh: PosedMesh, camera: PinholeCamera,
           params: LikelihoodParams, variant_e: str = "E3") -> AssociationMatrix:
    """Soft event-to-face association at the current pose estimate.

    Faces behind the camera (d_long <= 0) get zero weight. Events whose
    minimum lateral distance over associable faces exceeds d_lat_max are
    marked outliers; their rows are all-zero.
    """
    origins, directions = event_rays(buffer.events, camera)
    d_lat, sign, d_long, r_ang = batch_geometry(
        origins, directions, mesh.v0, mesh.v1, mesh.v2, mesh.normals,
        mesh.centroids)
    w = _e_weights(d_lat, sign, d_long, r_ang, params, variant_e)

    valid = d_long > 0
    min_lat = np.where(valid, d_lat, np.inf).min(axis=1)
    inlier = min_lat <= params.d_lat_max

    row_sum = w.sum(axis=1)
    inlier &= row_sum > 0
    q = np.zeros_like(w)
    if inlier.any():
        q[inlier] = w[inlier] / row_sum[inlier, None]
    return AssociationMatrix(q=q, inlier_mask=inlier)


def m_step_objective(buffer: EventBuffer, q: AssociationMatrix, theta,
                     template: KinematicTemplate, camera: PinholeCamera,
                     params: LikelihoodParams, prior: MotionPriorState,
                     variant_m: str = "M2", association: str = "soft") -> float:
    """Expected M-step log-likelihood plus the constant-velocity log prior.

    The association matrix is held fixed; only the geometry depends on theta.
    Hard association replaces the per-event expectation by the argmax face.
    """
    mesh = pose_mesh(template, theta)
    return _objective_with_mesh(buffer.events, q, mesh, camera, params, prior,
                                np.asarray(theta, dtype=float), variant_m,
                                association)


def _objective_with_mesh(events, q: AssociationMatrix, mesh, camera, params,
                         prior, theta, variant_m, association):
    obj = prior.log_prior(theta)
    inlier = q.inlier_mask
    if not inlier.any():
        return obj
    origins, directions = event_rays(events[inlier], camera)
    with_angular = variant_m == "M2"
    if _kernels.HAVE_NUMBA:
        tri = mesh.vertices[mesh.faces]
        if association == "soft":
            obj += _kernels.soft_objective(origins, directions, tri,
                                           mesh.normals, q.q[inlier],
                                           params.alpha, params.gamma,
                                           with_angular)
        else:
            j_star = np.argmax(q.q[inlier], axis=1)
            obj += _kernels.hard_objective(origins, directions, tri,
                                           mesh.normals, j_star,
                                           params.alpha, params.gamma,
                                           with_angular)
        return obj
    d_lat, sign, _, r_ang = batch_geometry(
        origins, directions, mesh.v0, mesh.v1, mesh.v2, mesh.normals,
        mesh.centroids)
    lw = _m_log_weights(d_lat, sign, r_ang, params, variant_m)
    if association == "soft":
        obj += float(np.sum(q.q[inlier] * lw))
    else:
        j_star = np.argmax(q.q[inlier], axis=1)
        obj += float(np.sum(lw[np.arange(len(j_star)), j_star]))
    return obj


def predict_init(theta_prev, v_prev, dt: float) -> NDArray[np.float64]:
    """Constant-velocity pose extrapolation for the next buffer."""
    if dt <= 0:
        raise TrackerError("dt must be positive")
    return np.asarray(theta_prev, dtype=float) + np.asarray(v_prev, dtype=float) * dt


def _fd_gradient(f, theta, h):
    """Central finite-difference gradient of f at theta with step h."""
    g = np.empty_like(theta)
    for d in range(len(theta)):
        step = np.zeros_like(theta)
        step[d] = h
        g[d] = (f(theta + step) - f(theta - step)) / (2 * h)
    return g


def optimize_buffer(buffer: EventBuffer, theta_init, prior: MotionPriorState,
                    template: KinematicTemplate, camera: PinholeCamera,
                    params: LikelihoodParams, config: EmConfig):
    """Alternate E- and M-steps on one event buffer.

    Returns (theta_star, final association matrix, diagnostics). With an
    empty inlier set the optimizer coasts: the closed-form optimum of the
    prior alone, theta_prev + v_prev * dt, is returned.
    """
    theta = np.asarray(theta_init, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise TrackerError("theta_init must be finite")
    diag = BufferDiagnostics()

    best_theta = theta.copy()
    best_obj = -np.inf
    theta_at_e = theta.copy()
    q = None

    for em_iter in range(config.max_em_iters):
        diag.em_iters = em_iter + 1
        mesh = pose_mesh(template, theta)
        q = e_step(buffer, mesh, camera, params, config.variant_e)
        diag.inlier_count = q.num_inliers
        theta_at_e = theta.copy()

        if q.num_inliers == 0:
            logger.warning("buffer [%.6f, %.6f]: all %d events are outliers; "
                           "coasting on the motion prior",
                           buffer.t_start, buffer.t_end, len(buffer))
            theta = prior.stationary_point()
            diag.coasted = True
            diag.final_objective = prior.log_prior(theta)
            return theta, q, diag

        def f(th):
            diag.grad_evals += 1
            obj = m_step_objective(buffer, q, th, template, camera, params,
                                   prior, config.variant_m, config.association)
            if not np.isfinite(obj):
                raise TrackerError("non-finite M-step objective")
            return obj

        obj = f(theta)
        if obj > best_obj:
            best_obj, best_theta = obj, theta.copy()
        theta_outer_prev = theta.copy()

        # inner gradient ascent with fixed associations
        step = config.step_size
        for _ in range(config.max_grad_iters):
            g = _fd_gradient(f, theta, config.fd_step)
            gnorm = np.linalg.norm(g)
            if gnorm == 0:
                break
            improved = False
            s = step
            for _ in range(8):
                cand = theta + s * g / max(gnorm, 1.0)
                cand_obj = f(cand)
                if cand_obj > obj:
                    improved = True
                    break
                s *= 0.5
            if not improved:
                break
            gain = cand_obj - obj
            theta, obj = cand, cand_obj
            step = min(s * 2.0, config.step_size)
            if obj > best_obj:
                best_obj, best_theta = obj, theta.copy()
            if gain < config.early_stop_tol:
                break
            if np.linalg.norm(theta - theta_at_e) > config.expectation_update_tol:
                break  # associations are stale; refresh the E-step

        diag.final_objective = obj
        if np.linalg.norm(theta - theta_outer_prev) < config.early_stop_tol:
            break

    return best_theta, q, diag


def track_stream(events: NDArray, theta0, template: KinematicTemplate,
                 camera: PinholeCamera, params: LikelihoodParams,
                 config: EmConfig, buffer_size: int, prior_weight: float = 0.01):
    """Track a whole event stream buffer by buffer.

    Returns (trajectory, diagnostics) where trajectory is a list of
    (t_mid, theta) stamped at buffer midpoints and diagnostics is one
    BufferDiagnostics per buffer.
    """
    if buffer_size < 1:
        raise TrackerError("buffer_size must be at least 1")
    if len(events) == 0:
        raise TrackerError("empty event stream")
    if len(events) < buffer_size:
        logger.warning("stream has %d events, less than the buffer size %d; "
                       "using a single truncated buffer", len(events), buffer_size)

    theta_prev = np.asarray(theta0, dtype=float)
    v_prev = np.zeros_like(theta_prev)
    t_mid_prev = float(events["t"][0])

    trajectory = []
    diagnostics = []
    for start in range(0, len(events), buffer_size):
        chunk = events[start:start + buffer_size]
        buf = EventBuffer(events=chunk, t_start=float(chunk["t"][0]),
                          t_end=float(chunk["t"][-1]))
        dt = max(buf.t_mid - t_mid_prev, 1e-6)
        prior = MotionPriorState(theta_prev=theta_prev, v_prev=v_prev, dt=dt,
                                 k=prior_weight)
        theta_init = predict_init(theta_prev, v_prev, dt)
        theta_star, _, diag = optimize_buffer(buf, theta_init, prior, template,
                                              camera, params, config)
        trajectory.append((buf.t_mid, theta_star))
        diagnostics.append(diag)
        v_prev = (theta_star - theta_prev) / dt
        theta_prev = theta_star
        t_mid_prev = buf.t_mid
    return trajectory, diagnostics
