"""Pinhole projection, SE(3) utilities and differentiable warping.

Tensor layout follows the torch convention used throughout the package:
images and maps are ``B x C x H x W``, sampling coordinates are
``B x H x W x 2`` holding ``(x, y)`` pixel positions with pixel centres at
integer coordinates.

Transform convention: ``T_{t->s}`` maps a 3-D point expressed in the target
camera frame into the source camera frame, ``X_s = R X_t + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

MIN_PROJECTED_DEPTH = 1e-3
_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a "
                f"{self.width}x{self.height} image"
            )

    def matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=dtype,
            device=device,
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics after resizing the image to ``width x height``."""
        sx = width / self.width
        sy = height / self.height
        # pixel centres at integer coordinates: c' = (c + 0.5) * s - 0.5
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass
class RigidTransform:
    """Batched rigid transform: ``rotation`` is ``... x 3 x 3``, ``translation`` ``... x 3``."""

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float64, device=None) -> "RigidTransform":
        rot = torch.eye(3, dtype=dtype, device=device).expand(*batch_shape, 3, 3).clone()
        trans = torch.zeros(*batch_shape, 3, dtype=dtype, device=device)
        return cls(rot, trans)

    @classmethod
    def from_matrix(cls, m: torch.Tensor) -> "RigidTransform":
        return cls(m[..., :3, :3], m[..., :3, 3])

    def matrix(self) -> torch.Tensor:
        batch = self.rotation.shape[:-2]
        bottom = torch.zeros(*batch, 1, 4, dtype=self.rotation.dtype, device=self.rotation.device)
        bottom[..., 0, 3] = 1.0
        top = torch.cat([self.rotation, self.translation.unsqueeze(-1)], dim=-1)
        return torch.cat([top, bottom], dim=-2)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        rot = self.rotation @ other.rotation
        trans = (self.rotation @ other.translation.unsqueeze(-1)).squeeze(-1) + self.translation
        return RigidTransform(rot, trans)

    def inverse(self) -> "RigidTransform":
        return invert_transform(self)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform points of shape ``... x 3``."""
        return (self.rotation @ points.unsqueeze(-1)).squeeze(-1) + self.translation

    def detach(self) -> "RigidTransform":
        return RigidTransform(self.rotation.detach(), self.translation.detach())

    def check(self, atol: float = 1e-6) -> None:
        rot = self.rotation
        eye = torch.eye(3, dtype=rot.dtype, device=rot.device)
        if not torch.isfinite(rot).all() or not torch.isfinite(self.translation).all():
            raise ValueError("rigid transform contains non-finite values")
        if (rot.transpose(-1, -2) @ rot - eye).abs().max() > atol:
            raise ValueError("rotation is not orthonormal")
        if (torch.linalg.det(rot) - 1.0).abs().max() > atol:
            raise ValueError("rotation determinant is not +1")


@dataclass
class SampleGrid:
    """Where each target pixel lands in the source view.

    ``coords`` is ``B x H x W x 2`` in source pixels, ``projected_depth`` is
    ``B x 1 x H x W`` (z of the transformed point, clamped) and
    ``behind_camera`` flags pixels whose z had to be clamped.
    """

    coords: torch.Tensor
    projected_depth: torch.Tensor
    behind_camera: torch.Tensor

    def in_view(self, width: int, height: int) -> torch.Tensor:
        x, y = self.coords[..., 0], self.coords[..., 1]
        inside = (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
        return inside.unsqueeze(1) & ~self.behind_camera


def _skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, batched over leading dimensions."""
    theta_sq = (axis_angle * axis_angle).sum(-1, keepdim=True).unsqueeze(-1)
    small = theta_sq < _SMALL_ANGLE**2
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    k = _skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + a * k + b * (k @ k)


def matrix_to_axis_angle(rotation: torch.Tensor) -> torch.Tensor:
    """Matrix logarithm of a rotation, returned as an axis-angle vector.

    Valid for angles in ``[0, pi)``; near ``pi`` the axis is recovered from
    the symmetric part instead of the skew part.
    """
    trace = rotation.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0)
    skew = torch.stack(
        [
            rotation[..., 2, 1] - rotation[..., 1, 2],
            rotation[..., 0, 2] - rotation[..., 2, 0],
            rotation[..., 1, 0] - rotation[..., 0, 1],
        ],
        dim=-1,
    )
    # atan2 keeps the angle accurate at both ends, unlike acos near pi
    sin = skew.norm(dim=-1) / 2.0
    theta = torch.atan2(sin, cos)
    small = theta < 1e-6
    factor = torch.where(small, 0.5 + theta**2 / 12.0, theta / (2.0 * torch.where(small, 1.0, sin)))
    result = factor.unsqueeze(-1) * skew

    near_pi = theta > torch.pi - 1e-3
    if near_pi.any():
        # R + I = 2 n n^T (1 - cos) + ... ; take the dominant column
        eye = torch.eye(3, dtype=rotation.dtype, device=rotation.device)
        sym = (rotation + rotation.transpose(-1, -2)) / 2.0 - cos[..., None, None] * eye
        col = sym.diagonal(dim1=-2, dim2=-1).argmax(-1)
        axis = torch.gather(sym, -1, col[..., None, None].expand(*sym.shape[:-1], 1)).squeeze(-1)
        axis = axis / axis.norm(dim=-1, keepdim=True)
        sign = torch.sign((axis * skew).sum(-1, keepdim=True))
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        result = torch.where(near_pi.unsqueeze(-1), axis * sign * theta.unsqueeze(-1), result)
    return result


def pose_vector_to_transform(vec: torch.Tensor) -> RigidTransform:
    """``... x 6`` (axis-angle radians, translation metres) to a transform."""
    return RigidTransform(axis_angle_to_matrix(vec[..., :3]), vec[..., 3:6])


def transform_to_pose_vector(transform: RigidTransform) -> torch.Tensor:
    return torch.cat([matrix_to_axis_angle(transform.rotation), transform.translation], dim=-1)


def invert_transform(transform: RigidTransform) -> RigidTransform:
    rot_t = transform.rotation.transpose(-1, -2)
    return RigidTransform(rot_t, -(rot_t @ transform.translation.unsqueeze(-1)).squeeze(-1))


def disparity_to_depth(disp: torch.Tensor, min_depth: float = 0.1, max_depth: float = 100.0):
    """Map a sigmoid disparity in (0, 1) to depth in [min_depth, max_depth]."""
    if not 0 < min_depth < max_depth:
        raise ValueError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    if not torch.isfinite(disp).all():
        raise ValueError("disparity map contains non-finite values")
    min_disp = 1.0 / max_depth
    max_disp = 1.0 / min_depth
    return 1.0 / (min_disp + (max_disp - min_disp) * disp)


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``H x W x 2`` grid of ``(x, y)`` pixel coordinates."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def _as_batched_k(K, batch: int, dtype, device) -> torch.Tensor:
    if isinstance(K, CameraIntrinsics):
        K = K.matrix(dtype=dtype, device=device)
    K = K.to(dtype=dtype, device=device)
    if K.dim() == 2:
        K = K.expand(batch, 3, 3)
    return K


def backproject(depth: torch.Tensor, K) -> torch.Tensor:
    """Lift every pixel to a camera-frame point, ``B x H x W x 3``."""
    b, _, h, w = depth.shape
    K = _as_batched_k(K, b, depth.dtype, depth.device)
    grid = pixel_grid(h, w, depth.dtype, depth.device)
    homog = torch.cat([grid, torch.ones_like(grid[..., :1])], dim=-1)
    rays = torch.einsum("bij,hwj->bhwi", torch.linalg.inv(K), homog)
    return rays * depth[:, 0, :, :, None]


def reproject(
    depth: torch.Tensor,
    transform: RigidTransform,
    K,
    residual_translation: torch.Tensor | None = None,
) -> SampleGrid:
    """Project target pixels into the source view.

    ``transform`` is batched over ``B``. ``residual_translation`` (optional,
    ``B x 3 x H x W``) is added per pixel on top of the ego translation,
    giving the per-pixel transform ``(R, t + dt(p))``.
    """
    b, _, h, w = depth.shape
    K = _as_batched_k(K, b, depth.dtype, depth.device)
    points = backproject(depth, K)
    rot = transform.rotation.to(depth.dtype)
    trans = transform.translation.to(depth.dtype)
    moved = torch.einsum("bij,bhwj->bhwi", rot, points) + trans[:, None, None, :]
    if residual_translation is not None:
        moved = moved + residual_translation.permute(0, 2, 3, 1)
    z = moved[..., 2]
    behind = (z <= MIN_PROJECTED_DEPTH).detach()
    z = z.clamp(min=MIN_PROJECTED_DEPTH)
    cam = torch.einsum("bij,bhwj->bhwi", K, moved)
    coords = cam[..., :2] / z.unsqueeze(-1)
    return SampleGrid(coords=coords, projected_depth=z.unsqueeze(1), behind_camera=behind.unsqueeze(1))


def bilinear_sample(source: torch.Tensor, grid, padding: str = "border") -> torch.Tensor:
    """Sample ``source`` (``B x C x H x W``) at pixel coordinates.

    ``grid`` is a :class:`SampleGrid` or a raw ``B x H' x W' x 2`` tensor.
    Out-of-range coordinates follow ``padding`` (``"border"`` or ``"zeros"``).
    """
    if padding not in ("border", "zeros"):
        raise ValueError(f"unknown padding mode {padding!r}")
    coords = grid.coords if isinstance(grid, SampleGrid) else grid
    _, _, h, w = source.shape
    scale = torch.tensor(
        [2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)], dtype=coords.dtype, device=coords.device
    )
    normalized = coords * scale - 1.0
    return F.grid_sample(
        source, normalized.to(source.dtype), mode="bilinear", padding_mode=padding, align_corners=True
    )


def flow_from_projection(
    depth: torch.Tensor,
    transform: RigidTransform,
    K,
    residual_translation: torch.Tensor | None = None,
) -> torch.Tensor:
    """Pixel displacement induced by the (per-pixel) transform, ``B x 2 x H x W``."""
    grid = reproject(depth, transform, K, residual_translation)
    _, _, h, w = depth.shape
    ident = pixel_grid(h, w, depth.dtype, depth.device)
    return (grid.coords - ident).permute(0, 3, 1, 2)
