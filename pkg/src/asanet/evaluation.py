"""Depth metrics, trajectory alignment and odometry drift, inference latency."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

MIN_EVAL_DEPTH = 1e-3
DEPTH_CAP = 80.0
SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class DepthMetrics:
    abs_rel: float | None = None
    sq_rel: float | None = None
    rmse: float | None = None
    rmse_log: float | None = None
    delta1: float | None = None
    delta2: float | None = None
    delta3: float | None = None
    count: int = 0

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    def as_dict(self) -> dict:
        return asdict(self)

    def values(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in METRIC_NAMES], dtype=np.float64)

    @classmethod
    def mean(cls, items) -> "DepthMetrics":
        """Per-image average, as in the usual benchmark tables."""
        items = [m for m in items if not m.is_empty]
        if not items:
            return cls()
        vals = np.mean([m.values() for m in items], axis=0)
        return cls(*map(float, vals), count=sum(m.count for m in items))


def eigen_crop_mask(height: int, width: int) -> np.ndarray:
    """The standard evaluation crop for the Eigen test split."""
    crop = np.array([0.40810811 * height, 0.99189189 * height,
                     0.03594771 * width, 0.96405229 * width]).astype(np.int32)
    mask = np.zeros((height, width), dtype=bool)
    mask[crop[0]:crop[1], crop[2]:crop[3]] = True
    return mask


def depth_metrics(pred, gt, cap: float = DEPTH_CAP, median_scale: bool = True,
                  min_depth: float = MIN_EVAL_DEPTH, mask=None) -> DepthMetrics:
    """Seven standard depth metrics over pixels with ground truth in ``(min_depth, cap]``.

    With ``median_scale`` the prediction is first scaled so its median over
    the valid pixels matches the ground-truth median, then clamped to
    ``[min_depth, cap]``. Returns an empty result (``count == 0``) when no
    pixel is valid.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if cap <= 0:
        raise ValueError("cap must be positive")
    valid = (gt > min_depth) & (gt <= cap)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        return DepthMetrics()
    p = pred[valid]
    g = gt[valid]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, min_depth, cap)

    thresh = np.maximum(g / p, p / g)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
        count=int(valid.sum()),
    )


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Absolute camera-to-world poses, ``N x 4 x 4``, with frame indices."""

    poses: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[1:] != (4, 4):
            raise ValueError(f"poses must be N x 4 x 4, got {self.poses.shape}")
        if self.indices is None:
            self.indices = np.arange(len(self.poses))
        else:
            self.indices = np.asarray(self.indices)
            if np.any(np.diff(self.indices) != 1):
                raise ValueError("frame indices must be contiguous")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3, 3]

    def path_lengths(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def _check_rigid(m: np.ndarray, atol=1e-6):
    r = m[:3, :3]
    if not np.all(np.isfinite(m)):
        raise ValueError("relative pose contains non-finite values")
    if not np.allclose(r.T @ r, np.eye(3), atol=atol) or abs(np.linalg.det(r) - 1) > atol:
        raise ValueError("relative pose rotation is not a proper rotation")
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise ValueError("relative pose is not a homogeneous rigid transform")


def accumulate_trajectory(relative) -> Trajectory:
    """Chain relative poses: ``pose_{k+1} = pose_k @ rel_k``.

    ``rel_k`` is the pose of frame ``k+1`` expressed in the frame of camera
    ``k`` (the inverse of the point transform ``T_{k->k+1}``).
    """
    poses = [np.eye(4)]
    for rel in relative:
        rel = np.asarray(rel, dtype=np.float64)
        _check_rigid(rel)
        poses.append(poses[-1] @ rel)
    return Trajectory(np.stack(poses))


@dataclass
class Alignment:
    scale: float
    transform: np.ndarray
    aligned: Trajectory
    rmse: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.scale, self.transform, self.aligned))


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares similarity ``dst ≈ s R src + t`` for ``N x 3`` point sets.

    Returns ``(s, R, t, rank)`` where ``rank`` is the rank of the cross
    covariance (below 2 means the rotation is unobservable).
    """
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1
    rot = u @ sign @ vt
    var_s = (xs**2).sum() / len(src)
    s = float(np.trace(np.diag(d) @ sign) / var_s) if with_scale else 1.0
    t = mu_d - s * rot @ mu_s
    rank = int(np.sum(d > 1e-10 * max(d[0], 1e-300)))
    return s, rot, t, rank


def apply_similarity(traj: Trajectory, scale: float, transform: np.ndarray) -> Trajectory:
    rot, t = transform[:3, :3], transform[:3, 3]
    poses = traj.poses.copy()
    poses[:, :3, :3] = rot @ traj.poses[:, :3, :3]
    poses[:, :3, 3] = scale * traj.positions @ rot.T + t
    return Trajectory(poses, traj.indices)


def position_rmse(a: Trajectory, b: Trajectory) -> float:
    return float(np.sqrt(np.mean(np.sum((a.positions - b.positions) ** 2, axis=1))))


def align_umeyama_7dof(estimated: Trajectory, reference: Trajectory) -> Alignment:
    """Fit scale, rotation and translation mapping ``estimated`` onto ``reference``.

    Collinear configurations leave the rotation unobservable; those fall
    back to a scale-only fit and are flagged ``degenerate``.
    """
    if len(estimated) != len(reference):
        raise ValueError("trajectories differ in length")
    if len(estimated) < 3:
        raise ValueError("alignment needs at least three poses")
    src, dst = estimated.positions, reference.positions
    s, rot, t, rank = umeyama(src, dst)
    degenerate = rank < 2
    if degenerate:
        denom = float((src**2).sum())
        s = float((src * dst).sum() / denom) if denom > 0 else 1.0
        rot, t = np.eye(3), np.zeros(3)
    transform = np.eye(4)
    transform[:3, :3], transform[:3, 3] = rot, t
    aligned = apply_similarity(estimated, s, transform)
    return Alignment(s, transform, aligned, position_rmse(aligned, reference), degenerate)


@dataclass
class OdometryErrors:
    t_err: float | None = None
    r_err: float | None = None
    segments: int = 0

    @property
    def is_empty(self) -> bool:
        return self.segments == 0


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix; atan2 stays accurate near zero where arccos does not."""
    cos = 0.5 * (np.trace(r) - 1.0)
    sin = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(sin, cos))


def odometry_errors(aligned: Trajectory, reference: Trajectory, lengths=SEGMENT_LENGTHS,
                    step: int = 1) -> OdometryErrors:
    """Average drift over subsequences of fixed path length.

    A segment starting at frame ``i`` ends at the first frame whose
    reference path length reaches ``length``. ``t_err`` is in percent,
    ``r_err`` in degrees per 100 m.
    """
    if len(aligned) != len(reference):
        raise ValueError("trajectories differ in length")
    dist = reference.path_lengths()
    gt, est = reference.poses, aligned.poses
    t_errs, r_errs = [], []
    for first in range(0, len(gt), step):
        for length in lengths:
            hits = np.nonzero(dist >= dist[first] + length)[0]
            if len(hits) == 0:
                continue
            last = int(hits[0])
            delta_gt = np.linalg.inv(gt[first]) @ gt[last]
            delta_est = np.linalg.inv(est[first]) @ est[last]
            err = np.linalg.inv(delta_est) @ delta_gt
            t_errs.append(np.linalg.norm(err[:3, 3]) / length)
            r_errs.append(rotation_angle(err[:3, :3]) / length)
    if not t_errs:
        return OdometryErrors()
    return OdometryErrors(
        t_err=float(np.mean(t_errs) * 100.0),
        r_err=float(np.degrees(np.mean(r_errs)) * 100.0),
        segments=len(t_errs),
    )


def write_pose_file(path, trajectory: Trajectory):
    """One line per frame: the 12 entries of the row-major ``3 x 4`` pose."""
    rows = trajectory.poses[:, :3, :].reshape(len(trajectory), 12)
    np.savetxt(path, rows, fmt="%.9e")


# ---------------------------------------------------------------------------
# latency


def inference_latency(nets, trials: int = 1000, image_size=(192, 640), warmup: int = 10,
                      device="cpu", return_samples: bool = False):
    """Mean wall-clock milliseconds of one odometry forward (encoder + ego decoder)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    h, w = image_size
    g = torch.Generator().manual_seed(0)
    a = torch.rand(1, 3, h, w, generator=g).to(device)
    b = torch.rand(1, 3, h, w, generator=g).to(device)
    was_training = nets.training
    nets.eval()
    samples = []
    with torch.no_grad():
        for _ in range(warmup):
            nets.visual_odometry(a, b)
        for _ in range(trials):
            if device != "cpu" and torch.cuda.is_available():
                torch.cuda.synchronize()
            t0 = time.perf_counter()
            nets.visual_odometry(a, b)
            if device != "cpu" and torch.cuda.is_available():
                torch.cuda.synchronize()
            samples.append((time.perf_counter() - t0) * 1000.0)
    nets.train(was_training)
    mean = float(np.mean(samples))
    return (mean, samples) if return_samples else mean
