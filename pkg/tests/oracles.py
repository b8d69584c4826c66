"""Slow, loop-based reference implementations used as test oracles.

Each one is written from the textbook definition without sharing code with
the package, so agreement is evidence rather than tautology.
"""

import math

import numpy as np
import torch
from scipy.spatial.transform import Rotation


def dynamic_mask_loop(pe_ego, pe_field, ge_ego, ge_field, eta):
    out = np.zeros_like(pe_ego)
    for idx in np.ndindex(*pe_ego.shape):
        if pe_ego[idx] > eta * pe_field[idx] and ge_ego[idx] > eta * ge_field[idx]:
            out[idx] = 1.0
    return out


def merge_loop(err_ego, err_field, mask):
    out = np.empty_like(err_ego)
    for idx in np.ndindex(*err_ego.shape):
        out[idx] = err_field[idx] if mask[idx] == 1.0 else err_ego[idx]
    return out


def depth_metrics_loop(pred, gt, cap=80.0, median_scale=True, min_depth=1e-3):
    p, g = [], []
    for pv, gv in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if min_depth < gv <= cap:
            p.append(pv)
            g.append(gv)
    if not g:
        return None
    if median_scale:
        ratio = float(np.median(g)) / float(np.median(p))
        p = [v * ratio for v in p]
    p = [min(max(v, min_depth), cap) for v in p]
    n = len(g)
    abs_rel = sum(abs(a - b) / b for a, b in zip(p, g)) / n
    sq_rel = sum((a - b) ** 2 / b for a, b in zip(p, g)) / n
    rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)) / n)
    rmse_log = math.sqrt(sum((math.log(a) - math.log(b)) ** 2 for a, b in zip(p, g)) / n)
    ratios = [max(a / b, b / a) for a, b in zip(p, g)]
    deltas = [sum(r < 1.25**k for r in ratios) / n for k in (1, 2, 3)]
    return [abs_rel, sq_rel, rmse, rmse_log, *deltas]


def horn_similarity(src, dst):
    """Closed-form similarity via Horn's unit-quaternion method.

    Returns ``(s, R, t)`` minimising ``sum |dst - (s R src + t)|^2``.
    """
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    m = a.T @ b
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    w, v = np.linalg.eigh(n)
    q = v[:, np.argmax(w)]
    rot = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    s = float(np.sum(b * (a @ rot.T)) / np.sum(a * a))
    t = mu_d - s * rot @ mu_s
    return s, rot, t


def odometry_errors_loop(est, gt, lengths, step=1):
    """Drift per segment, with path lengths summed step by step."""
    dist = [0.0]
    for i in range(1, len(gt)):
        d = gt[i][:3, 3] - gt[i - 1][:3, 3]
        dist.append(dist[-1] + math.sqrt(float(d @ d)))
    t_errs, r_errs = [], []
    for first in range(0, len(gt), step):
        for length in lengths:
            last = None
            for j in range(first, len(gt)):
                if dist[j] >= dist[first] + length:
                    last = j
                    break
            if last is None:
                continue
            dg = np.linalg.solve(gt[first], gt[last])
            de = np.linalg.solve(est[first], est[last])
            err = np.linalg.solve(de, dg)
            t_errs.append(np.linalg.norm(err[:3, 3]) / length)
            r_errs.append(Rotation.from_matrix(err[:3, :3]).magnitude() / length)
    if not t_errs:
        return None
    return 100.0 * float(np.mean(t_errs)), 100.0 * math.degrees(float(np.mean(r_errs)))


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def random_trajectory(rng, n, step=10.0):
    """Smooth-ish random camera path in ``N x 4 x 4`` form."""
    poses = [np.eye(4)]
    for _ in range(n - 1):
        rel = np.eye(4)
        rel[:3, :3] = Rotation.from_rotvec(rng.normal(0, 0.05, 3)).as_matrix()
        rel[:3, 3] = [rng.normal(0, 0.3), rng.normal(0, 0.1), step * (1 + 0.1 * rng.random())]
        poses.append(poses[-1] @ rel)
    return np.stack(poses)


def finite_difference_check(fn, inputs, wrt, rng, num_coords=120, eps=1e-6):
    """Compare autograd against central differences at random coordinates.

    ``fn`` maps the ``inputs`` tuple to a scalar. Returns the largest
    relative error over ``num_coords`` coordinates of ``inputs[wrt]``.
    """
    inputs = [x.detach().clone() for x in inputs]
    x = inputs[wrt].requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(*inputs), x)
    flat = x.detach().view(-1)
    picks = rng.choice(flat.numel(), size=min(num_coords, flat.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            orig = flat[k].item()
            args = list(inputs)
            probe = flat.clone()
            probe[k] = orig + eps
            args[wrt] = probe.view_as(x)
            plus = fn(*args).item()
            probe[k] = orig - eps
            args[wrt] = probe.view_as(x)
            minus = fn(*args).item()
            numeric = (plus - minus) / (2 * eps)
            analytic = grad.reshape(-1)[k].item()
            denom = max(abs(analytic), abs(numeric), 1e-7)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst, len(picks)
