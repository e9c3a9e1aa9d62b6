"""Trajectory evaluation: MPJPE, 3D-PCK curve, and AUC.

Estimated joint trajectories are matched to ground truth by nearest
timestamp. All errors are reported in millimeters; the PCK curve uses 51
uniform thresholds over [0, 50] mm by default and its AUC is the
trapezoidal area normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "MetricsError",
    "JointTrajectory",
    "match_trajectories",
    "mpjpe",
    "pck_curve",
    "auc",
    "default_thresholds_mm",
    "evaluate",
]


class MetricsError(ValueError):
    """Raised on mismatched trajectories or invalid thresholds."""


@dataclass
class JointTrajectory:
    """Timestamped joint positions: times (S,), joints (S, J, 3) in meters."""

    times: NDArray[np.float64]
    joints: NDArray[np.float64]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.joints = np.asarray(self.joints, dtype=float)
        if self.joints.ndim != 3 or self.joints.shape[0] != len(self.times):
            raise MetricsError("joints must have shape (samples, joints, 3)")
        if np.any(np.diff(self.times) < 0):
            raise MetricsError("sample times must be non-decreasing")

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]


def match_trajectories(est: JointTrajectory, gt: JointTrajectory,
                       max_time_gap: float | None = None):
    """Pair each estimate with the nearest-in-time ground-truth sample.

    Returns (est_joints, gt_joints) arrays of shape (S, J, 3). Estimates
    farther than `max_time_gap` seconds from any ground-truth sample raise.
    """
    if est.num_joints != gt.num_joints:
        raise MetricsError(
            f"joint count mismatch: estimate has {est.num_joints}, "
            f"ground truth has {gt.num_joints}")
    idx = np.searchsorted(gt.times, est.times)
    idx = np.clip(idx, 1, len(gt.times) - 1)
    left = np.abs(gt.times[idx - 1] - est.times)
    right = np.abs(gt.times[idx] - est.times)
    nearest = np.where(left <= right, idx - 1, idx)
    gap = np.minimum(left, right)
    if max_time_gap is not None and np.any(gap > max_time_gap):
        raise MetricsError(f"temporal match gap exceeds {max_time_gap} s")
    return est.joints, gt.joints[nearest]


def _per_joint_errors_mm(est: JointTrajectory, gt: JointTrajectory,
                         max_time_gap=None) -> NDArray[np.float64]:
    """(S, J) per-sample per-joint Euclidean errors in millimeters."""
    a, b = match_trajectories(est, gt, max_time_gap)
    return 1000.0 * np.linalg.norm(a - b, axis=-1)


def mpjpe(est: JointTrajectory, gt: JointTrajectory,
          max_time_gap: float | None = None) -> tuple[float, float]:
    """Mean and median per-joint position error in millimeters."""
    err = _per_joint_errors_mm(est, gt, max_time_gap)
    return float(err.mean()), float(np.median(err))


def default_thresholds_mm() -> NDArray[np.float64]:
    """51 uniform thresholds: 0, 1, ..., 50 mm."""
    return np.linspace(0.0, 50.0, 51)


def pck_curve(est: JointTrajectory, gt: JointTrajectory, thresholds_mm,
              max_time_gap: float | None = None) -> NDArray[np.float64]:
    """Fraction of (sample, joint) pairs with error <= tau, per threshold."""
    err = _per_joint_errors_mm(est, gt, max_time_gap)
    taus = np.asarray(thresholds_mm, dtype=float)
    return np.array([(err <= tau).mean() for tau in taus])


def auc(pck: NDArray[np.float64], thresholds_mm) -> float:
    """Normalized trapezoidal area under the PCK curve.

    Thresholds must be uniformly spaced; the area is divided by the
    threshold span so a perfect curve scores 1.
    """
    taus = np.asarray(thresholds_mm, dtype=float)
    pck = np.asarray(pck, dtype=float)
    if len(taus) < 2:
        raise MetricsError("need at least two thresholds")
    gaps = np.diff(taus)
    if np.max(np.abs(gaps - gaps[0])) > 1e-9 * max(abs(gaps[0]), 1.0):
        raise MetricsError("thresholds must be uniformly spaced")
    return float(np.trapezoid(pck, taus) / (taus[-1] - taus[0]))


def evaluate(est: JointTrajectory, gt: JointTrajectory,
             thresholds_mm=None, max_time_gap: float | None = None) -> dict:
    """Full metric report: mean/median MPJPE, PCK curve, AUC."""
    taus = default_thresholds_mm() if thresholds_mm is None else np.asarray(thresholds_mm)
    mean_err, median_err = mpjpe(est, gt, max_time_gap)
    pck = pck_curve(est, gt, taus, max_time_gap)
    return {
        "mpjpe_mean_mm": mean_err,
        "mpjpe_median_mm": median_err,
        "auc": auc(pck, taus),
        "pck_thresholds_mm": taus.tolist(),
        "pck": pck.tolist(),
    }
