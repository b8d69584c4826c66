"""Training snippets: a synthetic moving-object renderer with exact ground
truth, on-disk synthetic datasets, and KITTI raw/odometry ingestion."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .geometry import CameraIntrinsics, RigidTransform, axis_angle_to_matrix

log = logging.getLogger(__name__)

FRAME_OFFSETS = (-1, 0, 1)
MANIFEST_NAME = "manifest.json"
_MAX_DRAWS = 100


@dataclass
class Snippet:
    """Three frames ``<I_{t-1}, I_t, I_{t+1}>`` with the middle one as target.

    ``frames`` is ``3 x 3 x H x W`` in ``[0, 1]``. Ground truth, when present,
    is the target depth (``H x W`` metres), the relative poses
    ``T_{t->t-1}`` and ``T_{t->t+1}`` as ``4 x 4`` matrices, and the mask of
    target pixels that belong to independently moving objects.
    """

    frames: torch.Tensor
    intrinsics: CameraIntrinsics
    snippet_id: str = ""
    gt_depth: torch.Tensor | None = None
    gt_poses: torch.Tensor | None = None
    moving_mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[:2] != (3, 3):
            raise ValueError(f"frames must be 3 x 3 x H x W, got {tuple(self.frames.shape)}")
        h, w = self.frames.shape[-2:]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("intrinsics image size does not match the frames")

    @property
    def target(self):
        return self.frames[1]

    @property
    def sources(self):
        return [self.frames[0], self.frames[2]]

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_depth is not None


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SpriteSpec:
    """A fronto-parallel textured rectangle; ``center`` is its position in the
    target camera frame, ``velocity`` its translation per frame (metres)."""

    texture_seed: int
    size: tuple[float, float]
    center: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class SyntheticSceneSpec:
    """Background plane plus sprites, seen by a camera moving ``camera_motion``
    (axis-angle, translation: pose of frame t+1 in the frame of t) per step.

    The background plane passes at ``plane_depth[1]`` through the top image
    row and ``plane_depth[0]`` through the bottom row of the target view.
    """

    texture_seed: int
    plane_depth: tuple[float, float] = (12.0, 20.0)
    camera_motion: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    sprites: list[SpriteSpec] = field(default_factory=list)
    texels_per_meter: float = 6.0
    texture_size: int = 256
    texture_sigma: float = 2.5

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["sprites"] = [SpriteSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
                        for s in d.get("sprites", [])]
        for k in ("plane_depth", "camera_motion"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def make_texture(seed: int, size: int = 256, sigma: float = 2.5) -> np.ndarray:
    """Band-limited colour noise, ``size x size x 3`` in ``[0.05, 0.95]``."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((size, size, 3))
    tex = np.stack([gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(3)], -1)
    lo = tex.min(axis=(0, 1), keepdims=True)
    hi = tex.max(axis=(0, 1), keepdims=True)
    return 0.05 + 0.9 * (tex - lo) / (hi - lo)


def _sample_texture(tex: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    coords = np.stack([v.ravel(), u.ravel()])
    out = [map_coordinates(tex[..., c], coords, order=1, mode="grid-wrap") for c in range(3)]
    return np.stack(out, -1).reshape(*u.shape, 3)


def _pose_power(motion: np.ndarray, k: int) -> np.ndarray:
    """Camera-to-world pose of frame ``t + k`` given the per-step motion."""
    step = np.eye(4)
    step[:3, :3] = axis_angle_to_matrix(torch.as_tensor(motion[:3], dtype=torch.float64)).numpy()
    step[:3, 3] = motion[3:6]
    if k == 0:
        return np.eye(4)
    m = step if k > 0 else np.linalg.inv(step)
    out = np.eye(4)
    for _ in range(abs(k)):
        out = out @ m
    return out


class SceneRenderer:
    """Ray-casts the plane and sprites for a camera pose and time step."""

    def __init__(self, spec: SyntheticSceneSpec, K: CameraIntrinsics):
        self.spec = spec
        self.K = K
        near, far = spec.plane_depth
        if not 0 < near <= far:
            raise ValueError(f"invalid plane depth range {spec.plane_depth}")
        # plane n . X = 1 in target-camera coordinates with 1/z linear in y'
        y_top = (0 - K.cy) / K.fy
        y_bot = (K.height - 1 - K.cy) / K.fy
        b = (1 / near - 1 / far) / (y_bot - y_top) if y_bot != y_top else 0.0
        a = 1 / far - b * y_top
        self.plane_normal = np.array([0.0, b, a])
        self.plane_texture = make_texture(spec.texture_seed, spec.texture_size, spec.texture_sigma)
        self.sprite_textures = [
            make_texture(s.texture_seed, spec.texture_size, spec.texture_sigma) for s in spec.sprites
        ]
        ys, xs = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
        self.rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], -1)

    def render(self, cam_to_world: np.ndarray, step: int):
        """Returns ``(image HxWx3, depth HxW, object id HxW)``; id -1 is the plane."""
        rot, origin = cam_to_world[:3, :3], cam_to_world[:3, 3]
        dirs = self.rays @ rot.T
        n = self.plane_normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s_plane = (1.0 - n @ origin) / denom
        s_plane = np.where(np.isfinite(s_plane) & (s_plane > 0), s_plane, np.inf)
        depth = s_plane.copy()
        obj = np.full(depth.shape, -1, dtype=np.int64)
        hits = []
        for j, sp in enumerate(self.spec.sprites):
            c = np.asarray(sp.center) + step * np.asarray(sp.velocity)
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (c[2] - origin[2]) / dirs[..., 2]
            pts = origin + s[..., None] * dirs
            lx = pts[..., 0] - c[0] + sp.size[0] / 2
            ly = pts[..., 1] - c[1] + sp.size[1] / 2
            inside = (s > 0) & (lx >= 0) & (lx <= sp.size[0]) & (ly >= 0) & (ly <= sp.size[1])
            closer = inside & (s < depth)
            depth = np.where(closer, s, depth)
            obj = np.where(closer, j, obj)
            hits.append((lx, ly))
        if not np.isfinite(depth).all():
            raise ValueError("background plane does not cover the whole view")

        tpm = self.spec.texels_per_meter
        pts = origin + depth[..., None] * dirs
        image = _sample_texture(self.plane_texture, pts[..., 0] * tpm, pts[..., 1] * tpm)
        for j, (lx, ly) in enumerate(hits):
            sel = obj == j
            if sel.any():
                image[sel] = _sample_texture(self.sprite_textures[j], lx[sel] * tpm * 3, ly[sel] * tpm * 3)
        # depth along the optical axis equals the ray parameter because rays have unit z
        return image, depth, obj


def generate_synthetic_snippet(spec: SyntheticSceneSpec, K: CameraIntrinsics, snippet_id: str = "",
                               min_in_view: float = 0.8) -> Snippet:
    renderer = SceneRenderer(spec, K)
    motion = np.asarray(spec.camera_motion, dtype=np.float64)
    frames, objs = [], []
    depth_t = None
    for k in FRAME_OFFSETS:
        image, depth, obj = renderer.render(_pose_power(motion, k), k)
        frames.append(image)
        objs.append(obj)
        if k == 0:
            depth_t = depth
    for j, sp in enumerate(spec.sprites):
        for k, obj in zip(FRAME_OFFSETS, objs):
            if not (obj == j).any():
                raise ValueError(
                    f"snippet {snippet_id or '?'}: sprite {j} is out of view in frame t{k:+d}"
                )
    # T_{t->t'} maps target-camera points into source-camera coordinates
    poses = np.stack([np.linalg.inv(_pose_power(motion, k)) for k in (-1, 1)])
    moving_ids = [j for j, sp in enumerate(spec.sprites) if sp.moving]
    moving = np.isin(objs[1], moving_ids)

    snippet = Snippet(
        frames=torch.from_numpy(np.stack(frames).transpose(0, 3, 1, 2).astype(np.float32)),
        intrinsics=K,
        snippet_id=snippet_id,
        gt_depth=torch.from_numpy(depth_t.astype(np.float32)),
        gt_poses=torch.from_numpy(poses),
        moving_mask=torch.from_numpy(moving),
    )
    frac = in_view_fraction(snippet)
    if frac < min_in_view:
        raise ValueError(
            f"snippet {snippet_id or '?'}: camera motion leaves only {frac:.0%} of pixels in view"
        )
    return snippet


def in_view_fraction(snippet: Snippet) -> float:
    """Smallest fraction of target pixels that project inside a source view."""
    from .geometry import reproject

    depth = snippet.gt_depth[None, None].double()
    fracs = []
    for pose in snippet.gt_poses:
        t = RigidTransform.from_matrix(pose[None].double())
        grid = reproject(depth, t, snippet.intrinsics)
        fracs.append(grid.in_view(snippet.intrinsics.width, snippet.intrinsics.height).double().mean().item())
    return min(fracs)


def default_intrinsics(width: int = 192, height: int = 64) -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0 * width / 192, fy=100.0 * width / 192,
                            cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)


def random_scene_spec(rng: np.random.Generator, K: CameraIntrinsics, moving: bool = True,
                      num_sprites: int | None = None) -> SyntheticSceneSpec:
    """Draw a desk-scale scene: forward-moving camera, 1-2 sprites."""
    if num_sprites is None:
        num_sprites = int(rng.integers(1, 3))
    far = float(rng.uniform(14.0, 22.0))
    near = float(far * rng.uniform(0.55, 0.8))
    motion = (
        0.0, float(rng.uniform(-0.01, 0.01)), 0.0,
        float(rng.uniform(-0.15, 0.15)), 0.0, float(rng.uniform(0.3, 0.8)),
    )
    sprites = []
    for j in range(num_sprites):
        z = float(rng.uniform(4.0, 8.0))
        half_w = (K.width / 2) / K.fx * z
        half_h = (K.height / 2) / K.fy * z
        size = (float(rng.uniform(0.15, 0.3) * 2 * half_w), float(rng.uniform(0.4, 0.7) * 2 * half_h))
        center = (float(rng.uniform(-0.5, 0.5) * half_w), float(rng.uniform(-0.3, 0.3) * half_h), z)
        velocity = (0.0, 0.0, 0.0)
        if moving and j == 0:
            speed = float(rng.uniform(0.1, 0.25)) * rng.choice([-1.0, 1.0])
            velocity = (speed, 0.0, float(rng.uniform(-0.2, 0.2)))
        sprites.append(SpriteSpec(int(rng.integers(2**31)), size, center, velocity))
    return SyntheticSceneSpec(texture_seed=int(rng.integers(2**31)), plane_depth=(near, far),
                              camera_motion=motion, sprites=sprites)


# ---------------------------------------------------------------------------
# on-disk synthetic datasets


def save_snippet(path, snippet: Snippet):
    np.savez_compressed(
        path,
        frames=snippet.frames.numpy(),
        intrinsics=np.array(json.dumps(snippet.intrinsics.to_dict())),
        snippet_id=np.array(snippet.snippet_id),
        gt_depth=snippet.gt_depth.numpy(),
        gt_poses=snippet.gt_poses.numpy(),
        moving_mask=snippet.moving_mask.numpy(),
    )


def load_snippet(path) -> Snippet:
    with np.load(path) as z:
        return Snippet(
            frames=torch.from_numpy(z["frames"]),
            intrinsics=CameraIntrinsics(**json.loads(str(z["intrinsics"]))),
            snippet_id=str(z["snippet_id"]),
            gt_depth=torch.from_numpy(z["gt_depth"]),
            gt_poses=torch.from_numpy(z["gt_poses"]),
            moving_mask=torch.from_numpy(z["moving_mask"]),
        )


def build_synthetic_dataset(out_dir, seed: int = 0, num_train: int = 50, num_val: int = 10,
                            width: int = 192, height: int = 64, moving_fraction: float = 0.7,
                            extra_specs: dict | None = None) -> dict:
    """Render and write a synthetic dataset; returns the manifest.

    ``extra_specs`` maps snippet ids to explicit scene dicts and is rendered
    into the training split verbatim.
    """
    out = Path(out_dir)
    K = default_intrinsics(width, height)
    rng = np.random.default_rng(seed)
    entries = []
    plan = [("train", i) for i in range(num_train)] + [("val", i) for i in range(num_val)]
    snippets = []
    for split, i in plan:
        sid = f"{split}_{i:04d}"
        moving = bool(rng.random() < moving_fraction)
        # random draws that violate the view constraints are redrawn
        for _ in range(_MAX_DRAWS):
            spec = random_scene_spec(rng, K, moving=moving)
            try:
                snippets.append((split, sid, spec, generate_synthetic_snippet(spec, K, sid)))
                break
            except ValueError:
                continue
        else:
            raise ValueError(f"snippet {sid}: no valid scene after {_MAX_DRAWS} draws")
    for sid, d in (extra_specs or {}).items():
        spec = SyntheticSceneSpec.from_dict(d)
        snippets.append(("train", sid, spec, generate_synthetic_snippet(spec, K, sid)))

    for split in ("train", "val"):
        (out / split).mkdir(parents=True, exist_ok=True)
    for split, sid, spec, snip in snippets:
        rel = f"{split}/{sid}.npz"
        save_snippet(out / rel, snip)
        entries.append({"id": sid, "split": split, "file": rel, "spec": spec.to_dict(),
                        "moving": bool(snip.moving_mask.any())})
    manifest = {"seed": seed, "width": width, "height": height,
                "intrinsics": K.to_dict(), "snippets": entries}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class SyntheticDataset(torch.utils.data.Dataset):
    def __init__(self, root, split: str = "train", augment: dict | None = None, seed: int = 0):
        self.root = Path(root)
        manifest = json.loads((self.root / MANIFEST_NAME).read_text())
        self.entries = [e for e in manifest["snippets"] if e["split"] == split]
        self.augment = augment or {}
        self.rng = np.random.default_rng(seed)
        self._cache = {}

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e["id"] for e in self.entries]

    def by_id(self, sid: str) -> Snippet:
        for i, e in enumerate(self.entries):
            if e["id"] == sid:
                return self._load(i)
        raise KeyError(sid)

    def _load(self, idx) -> Snippet:
        if idx not in self._cache:
            self._cache[idx] = load_snippet(self.root / self.entries[idx]["file"])
        return self._cache[idx]

    def __getitem__(self, idx) -> Snippet:
        snip = self._load(idx)
        if self.augment:
            snip = augment_snippet(snip, self.rng, **self.augment)
        return snip


def augment_snippet(snippet: Snippet, rng: np.random.Generator, flip: bool = False,
                    color_jitter: bool = False) -> Snippet:
    """Horizontal flip (p=0.5) and brightness/contrast jitter (p=0.5).

    Ground truth is dropped when geometry changes, since poses would need
    mirroring.
    """
    frames = snippet.frames
    K = snippet.intrinsics
    gt = dict(gt_depth=snippet.gt_depth, gt_poses=snippet.gt_poses, moving_mask=snippet.moving_mask)
    if flip and rng.random() < 0.5:
        frames = frames.flip(-1)
        K = CameraIntrinsics(K.fx, K.fy, K.width - 1 - K.cx, K.cy, K.width, K.height)
        gt = dict(gt_depth=None, gt_poses=None, moving_mask=None)
    if color_jitter and rng.random() < 0.5:
        brightness = float(rng.uniform(0.8, 1.2))
        contrast = float(rng.uniform(0.8, 1.2))
        mean = frames.mean(dim=(1, 2, 3), keepdim=True)
        frames = ((frames - mean) * contrast + mean) * brightness
        frames = frames.clamp(0.0, 1.0)
    return Snippet(frames=frames, intrinsics=K, snippet_id=snippet.snippet_id, **gt)


def collate_snippets(snippets: list[Snippet]) -> dict:
    """Stack snippets into batch tensors for the training step."""
    batch = {
        "frames": torch.stack([s.frames for s in snippets], 0),
        "K": torch.stack([s.intrinsics.matrix() for s in snippets], 0),
        "ids": [s.snippet_id for s in snippets],
    }
    if all(s.gt_depth is not None for s in snippets):
        batch["gt_depth"] = torch.stack([s.gt_depth for s in snippets], 0)
        batch["moving_mask"] = torch.stack([s.moving_mask for s in snippets], 0)
        batch["gt_poses"] = torch.stack([s.gt_poses for s in snippets], 0)
    return batch


# ---------------------------------------------------------------------------
# synthetic odometry sequences


def generate_synthetic_sequence(num_frames: int = 120, seed: int = 0, width: int = 192,
                                height: int = 64, step: float = 1.0):
    """A camera sliding past a textured wall along a gently curving path.

    Returns ``(frames N x 3 x H x W, cam_to_world N x 4 x 4, intrinsics)``.
    """
    K = default_intrinsics(width, height)
    rng = np.random.default_rng(seed)
    spec = SyntheticSceneSpec(texture_seed=int(rng.integers(2**31)), plane_depth=(20.0, 30.0))
    renderer = SceneRenderer(spec, K)
    poses = []
    phase = float(rng.uniform(0, 2 * np.pi))
    for i in range(num_frames):
        pose = np.eye(4)
        yaw = 0.02 * np.sin(i / 15.0 + phase)
        pose[:3, :3] = axis_angle_to_matrix(torch.tensor([0.0, yaw, 0.0], dtype=torch.float64)).numpy()
        pose[:3, 3] = [step * i, 0.0, 2.0 * np.sin(i / 20.0 + phase) - 2.0 * np.sin(phase)]
        poses.append(pose)
    poses = np.stack(poses)
    first_inv = np.linalg.inv(poses[0])
    poses = first_inv[None] @ poses
    frames = [renderer.render(p, 0)[0] for p in poses]
    return (torch.from_numpy(np.stack(frames).transpose(0, 3, 1, 2).astype(np.float32)),
            torch.from_numpy(poses), K)


# ---------------------------------------------------------------------------
# static-frame filtering


def static_frame_mask(frames, threshold: float) -> list[bool]:
    """Keep-flags: a frame is dropped when its mean absolute difference to the
    last kept frame is below ``threshold``. The first frame is always kept."""
    keep = []
    last = None
    for f in frames:
        arr = np.asarray(f, dtype=np.float64)
        if last is None:
            keep.append(True)
            last = arr
            continue
        moved = np.abs(arr - last).mean() >= threshold
        keep.append(bool(moved))
        if moved:
            last = arr
    return keep


def filter_static_frames(frames, threshold: float):
    """Drop near-duplicate frames (approximation of stationary-frame removal)."""
    keep = static_frame_mask(frames, threshold)
    return [f for f, k in zip(frames, keep) if k]


# ---------------------------------------------------------------------------
# KITTI


def read_calib_file(path) -> dict:
    """Parse ``key: v v v`` calibration text into float arrays; non-numeric rows are skipped."""
    data = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, value = line.split(":", 1)
            try:
                data[key.strip()] = np.array([float(x) for x in value.split()])
            except ValueError:
                pass
    return data


def load_velodyne_points(path) -> np.ndarray:
    points = np.fromfile(path, dtype=np.float32).reshape(-1, 4)
    points[:, 3] = 1.0
    return points


def generate_depth_map(calib_dir, velo_path, cam: int = 2) -> np.ndarray:
    """Project a laser scan into camera ``cam``; the nearest return wins per pixel."""
    calib_dir = Path(calib_dir)
    cam2cam = read_calib_file(calib_dir / "calib_cam_to_cam.txt")
    velo2cam = read_calib_file(calib_dir / "calib_velo_to_cam.txt")
    v2c = np.eye(4)
    v2c[:3, :3] = velo2cam["R"].reshape(3, 3)
    v2c[:3, 3] = velo2cam["T"]
    im_w, im_h = cam2cam[f"S_rect_0{cam}"].astype(np.int64)
    rect = np.eye(4)
    rect[:3, :3] = cam2cam["R_rect_00"].reshape(3, 3)
    P = cam2cam[f"P_rect_0{cam}"].reshape(3, 4)
    proj = P @ rect @ v2c

    velo = load_velodyne_points(velo_path)
    velo = velo[velo[:, 0] >= 0]
    pts = velo @ proj.T
    pts[:, :2] /= pts[:, 2:3]
    x = np.round(pts[:, 0]).astype(np.int64) - 1
    y = np.round(pts[:, 1]).astype(np.int64) - 1
    z = pts[:, 2]
    ok = (x >= 0) & (y >= 0) & (x < im_w) & (y < im_h) & (z > 0)
    x, y, z = x[ok], y[ok], z[ok]
    depth = np.zeros((im_h, im_w))
    # write far points first so nearer points overwrite them
    order = np.argsort(-z)
    depth[y[order], x[order]] = z[order]
    return depth


def _read_image(path, size):
    with Image.open(path) as im:
        im = im.convert("RGB")
        native = im.size
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()), native


def _intrinsics_from_projection(P: np.ndarray, width: int, height: int) -> CameraIntrinsics:
    P = P.reshape(3, 4)
    return CameraIntrinsics(fx=P[0, 0], fy=P[1, 1], cx=P[0, 2], cy=P[1, 2], width=width, height=height)


SPLIT_FILES = {
    "eigen_train": ("eigen_zhou", "train_files.txt"),
    "eigen_val": ("eigen_zhou", "val_files.txt"),
    "eigen_test": ("eigen", "test_files.txt"),
    "odom_train": ("odom", "train_files.txt"),
    "odom_val": ("odom", "val_files.txt"),
}
ODOM_TRAIN_SEQUENCES = tuple(range(9))


def read_split(root, split: str, split_dir=None) -> list[tuple[str, int, str]]:
    """Entries ``(folder, frame index, side)`` of a split list."""
    if split not in SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_FILES)}")
    sub, name = SPLIT_FILES[split]
    base = Path(split_dir) if split_dir is not None else Path(root) / "splits"
    path = base / sub / name
    entries = []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        side = parts[2] if len(parts) > 2 else "l"
        entries.append((parts[0], int(parts[1]), side))
    return entries


def _load_entry(root: Path, split: str, entry, size, calib_cache: dict):
    """One split entry as a :class:`Snippet`, or ``None`` if a frame is unreadable."""
    folder, idx, side = entry
    is_odom = split.startswith("odom")
    cam = 2 if side in ("l", "2") else 3
    if is_odom:
        seq_dir = root / "sequences" / f"{int(folder):02d}"
        calib_path = seq_dir / "calib.txt"
        img_dir = seq_dir / f"image_{cam}"
        names = [img_dir / f"{idx + k:06d}.png" for k in FRAME_OFFSETS]
    else:
        calib_path = root / folder.split("/")[0] / "calib_cam_to_cam.txt"
        img_dir = root / folder / f"image_0{cam}" / "data"
        names = [img_dir / f"{idx + k:010d}.png" for k in FRAME_OFFSETS]
    if calib_path not in calib_cache:
        if not calib_path.exists():
            raise ValueError(f"rejected sequence {folder}: missing calibration {calib_path}")
        calib_cache[calib_path] = read_calib_file(calib_path)
    calib = calib_cache[calib_path]

    try:
        loaded = [_read_image(n, size) for n in names]
    except (OSError, ValueError) as exc:
        log.warning("skipping %s %d: %s", folder, idx, exc)
        return None
    native_w, native_h = loaded[1][1]
    P = calib[f"P{cam}"] if is_odom else calib[f"P_rect_0{cam}"]
    K = _intrinsics_from_projection(P, native_w, native_h)
    if size is not None:
        K = K.scaled(*size)
    frames = torch.stack([f for f, _ in loaded])
    gt_depth = None
    if split == "eigen_test":
        velo = root / folder / "velodyne_points" / "data" / f"{idx:010d}.bin"
        if velo.exists():
            gt_depth = torch.from_numpy(generate_depth_map(root / folder.split("/")[0], velo, cam))
        else:
            log.warning("no laser scan for %s %d; snippet has no ground truth", folder, idx)
    return Snippet(frames=frames, intrinsics=K, snippet_id=f"{folder} {idx} {side}", gt_depth=gt_depth)


class KittiDataset(torch.utils.data.Dataset):
    """Indexable view over a KITTI split list; frames are read on access."""

    def __init__(self, root, split: str, size=(640, 192), split_dir=None, augment=None, seed=0):
        self.root = Path(root)
        self.split = split
        self.size = size
        self.entries = read_split(root, split, split_dir)
        self.augment = augment or {}
        self.rng = np.random.default_rng(seed)
        self._calib = {}

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [f"{f} {i} {s}" for f, i, s in self.entries]

    def __getitem__(self, idx) -> Snippet:
        snip = _load_entry(self.root, self.split, self.entries[idx], self.size, self._calib)
        if snip is None:
            # unreadable frame: fall back to the next readable entry
            for k in range(1, len(self.entries)):
                snip = _load_entry(self.root, self.split, self.entries[(idx + k) % len(self.entries)],
                                   self.size, self._calib)
                if snip is not None:
                    break
        if snip is not None and self.augment:
            snip = augment_snippet(snip, self.rng, **self.augment)
        return snip


def load_snippets(root, split: str, size=(640, 192), split_dir=None):
    """Yield 3-frame snippets from a KITTI raw (``eigen_*``) or odometry
    (``odom_*``) tree, resized to ``size = (width, height)``.

    ``eigen_test`` snippets carry projected laser depth (native resolution)
    as ground truth. Sequences without calibration are rejected with
    ``ValueError``; unreadable frames are skipped with a warning.
    """
    root = Path(root)
    calib_cache = {}
    for entry in read_split(root, split, split_dir):
        snip = _load_entry(root, split, entry, size, calib_cache)
        if snip is not None:
            yield snip


def load_odometry_poses(path) -> np.ndarray:
    """Read a 12-floats-per-line pose file into ``N x 4 x 4`` matrices."""
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    poses = np.tile(np.eye(4), (len(rows), 1, 1))
    poses[:, :3, :] = rows.reshape(-1, 3, 4)
    return poses


def load_odometry_sequence(root, sequence: int, size=(640, 192)):
    """Frames, calibrated intrinsics and ground-truth poses (if present)."""
    root = Path(root)
    seq_dir = root / "sequences" / f"{sequence:02d}"
    calib = read_calib_file(seq_dir / "calib.txt")
    names = sorted((seq_dir / "image_2").glob("*.png"))
    frames = []
    native = None
    for n in names:
        img, native = _read_image(n, size)
        frames.append(img)
    K = _intrinsics_from_projection(calib["P2"], *native)
    if size is not None:
        K = K.scaled(*size)
    pose_path = root / "poses" / f"{sequence:02d}.txt"
    poses = torch.from_numpy(load_odometry_poses(pose_path)) if pose_path.exists() else None
    return torch.stack(frames), poses, K


def kitti_root_from_env() -> str | None:
    root = os.environ.get("KITTI_ROOT")
    return root if root and Path(root).exists() else None
