"""Value types for the hybrid primitive structure and quaternion/covariance math.

Covariances are kept in factored form (positive scales + unit quaternion)
rather than as raw 3x3 matrices so that every stored covariance is symmetric
positive definite by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidModelError


def quat_normalize(q: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize quaternions along the last dim; zero-norm inputs map to identity."""
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    safe = q / norm.clamp_min(eps)
    identity = torch.zeros_like(q)
    identity[..., 0] = 1.0
    return torch.where(norm > eps, safe, identity)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a*b, (w, x, y, z) convention."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix(q: Tensor) -> Tensor:
    """Rotation matrix of a unit quaternion; shape (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def identity_quat(n: int | None = None, dtype=torch.float32) -> Tensor:
    q = torch.zeros(4 if n is None else (n, 4), dtype=dtype)
    q[..., 0] = 1.0
    return q


@dataclass
class FactoredCovariance:
    """Covariance as axis scales (world-unit lengths) plus a rotation quaternion."""

    scales: Tensor  # (3,), strictly positive
    rotation: Tensor  # (4,), unit or near-unit (w, x, y, z)

    def __post_init__(self):
        self.scales = torch.as_tensor(self.scales)
        self.rotation = torch.as_tensor(self.rotation)
        if self.scales.shape != (3,) or self.rotation.shape != (4,):
            raise InvalidModelError("covariance factors must be a 3-vector and a 4-vector")
        if not bool(torch.isfinite(self.scales).all() & torch.isfinite(self.rotation).all()):
            raise InvalidModelError("covariance factors must be finite")
        if bool((self.scales <= 0).any()):
            raise InvalidModelError("covariance scales must be strictly positive")


def densify_covariance(cov: FactoredCovariance) -> Tensor:
    """Expand a factored covariance into its symmetric PSD 3x3 matrix.

    Quaternions off unit norm are renormalized; non-positive scales are
    rejected by the FactoredCovariance constructor.
    """
    q = quat_normalize(cov.rotation)
    rot = quat_to_matrix(q)
    m = rot @ torch.diag(cov.scales**2) @ rot.transpose(-1, -2)
    return 0.5 * (m + m.transpose(-1, -2))


def batch_densify(scales: Tensor, rotations: Tensor) -> Tensor:
    """Vector form of densify_covariance for (N, 3) scales and (N, 4) quaternions."""
    rot = quat_to_matrix(quat_normalize(rotations))
    scaled = rot * (scales**2).unsqueeze(-2)
    m = scaled @ rot.transpose(-1, -2)
    return 0.5 * (m + m.transpose(-1, -2))


@dataclass
class AnchorPrimitive:
    """Sparse reference primitive: geometry plus a reference embedding."""

    location: Tensor  # (3,)
    covariance: FactoredCovariance
    ref_embedding: Tensor  # (ref_embedding_dim,)

    def __post_init__(self):
        self.location = torch.as_tensor(self.location)
        self.ref_embedding = torch.as_tensor(self.ref_embedding)
        if self.location.shape != (3,):
            raise InvalidModelError("anchor location must be a 3-vector")
        if not bool(torch.isfinite(self.location).all()):
            raise InvalidModelError("anchor location must be finite")


@dataclass
class CoupledPrimitive:
    """Residual primitive: a short embedding tied to one anchor."""

    res_embedding: Tensor  # (res_embedding_dim,)
    anchor_index: int

    def __post_init__(self):
        self.res_embedding = torch.as_tensor(self.res_embedding)
        if self.anchor_index < 0:
            raise InvalidModelError("anchor_index must be non-negative")


@dataclass
class Gaussian3D:
    """Renderable primitive derived from an (anchor, coupled) pair."""

    mean: Tensor  # (3,)
    covariance: FactoredCovariance
    color: Tensor  # (3,) in [0, 1]
    opacity: float  # in (0, 1)

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.color = torch.as_tensor(self.color)
        self.opacity = float(self.opacity)
        if bool((self.color < 0).any()) or bool((self.color > 1).any()):
            raise InvalidModelError("color must lie in [0, 1]")
        if not 0.0 < self.opacity < 1.0:
            raise InvalidModelError("opacity must lie strictly inside (0, 1)")


class GaussianBatch:
    """Column-major batch of Gaussians, the unit the rasterizer consumes."""

    def __init__(self, means: Tensor, scales: Tensor, rotations: Tensor, colors: Tensor, opacities: Tensor):
        n = means.shape[0]
        expected = {
            "means": (n, 3),
            "scales": (n, 3),
            "rotations": (n, 4),
            "colors": (n, 3),
            "opacities": (n,),
        }
        for name, tensor in zip(expected, (means, scales, rotations, colors, opacities)):
            if tuple(tensor.shape) != expected[name]:
                raise InvalidModelError(f"{name} has shape {tuple(tensor.shape)}, expected {expected[name]}")
        self.means = means
        self.scales = scales
        self.rotations = rotations
        self.colors = colors
        self.opacities = opacities

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i],
            covariance=FactoredCovariance(self.scales[i], quat_normalize(self.rotations[i])),
            color=self.colors[i].clamp(0.0, 1.0),
            opacity=float(self.opacities[i]),
        )

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian3D]) -> "GaussianBatch":
        return GaussianBatch(
            means=torch.stack([g.mean for g in gaussians]),
            scales=torch.stack([g.covariance.scales for g in gaussians]),
            rotations=torch.stack([g.covariance.rotation for g in gaussians]),
            colors=torch.stack([g.color for g in gaussians]),
            opacities=torch.tensor([g.opacity for g in gaussians], dtype=gaussians[0].mean.dtype),
        )

    def subset(self, index: Tensor) -> "GaussianBatch":
        return GaussianBatch(
            self.means[index], self.scales[index], self.rotations[index], self.colors[index], self.opacities[index]
        )

    @staticmethod
    def concat(batches: list["GaussianBatch"]) -> "GaussianBatch":
        return GaussianBatch(
            torch.cat([b.means for b in batches]),
            torch.cat([b.scales for b in batches]),
            torch.cat([b.rotations for b in batches]),
            torch.cat([b.colors for b in batches]),
            torch.cat([b.opacities for b in batches]),
        )
