"""Software splatting rasterizer and image quality metrics.

Per-pixel front-to-back alpha compositing over depth-sorted Gaussians,
restricted to each primitive's 3-sigma screen bounding box. Everything is
built from differentiable torch ops so the backward pass exactly matches
forward coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidModelError, SceneDataError
from .primitives import GaussianBatch, batch_densify

NEAR_PLANE = 0.01
MAX_PRIMITIVES = 100_000
WEIGHT_CLAMP = 0.999
TRANSMITTANCE_FLOOR = 1e-4
COV2D_REGULARIZATION = 1e-6


@dataclass
class Camera:
    rotation: Tensor  # (3, 3) world-to-camera
    translation: Tensor  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        # Camera extrinsics are tiny; keep them in float64 and cast at use sites.
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float64).reshape(3, 3)
        self.translation = torch.as_tensor(self.translation, dtype=torch.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise SceneDataError("focal lengths must be positive")
        rtr = self.rotation @ self.rotation.T
        if not torch.allclose(rtr, torch.eye(3, dtype=rtr.dtype), atol=1e-4):
            raise SceneDataError("camera rotation must be orthonormal")

    def center(self) -> Tensor:
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(data: dict) -> "Camera":
        return Camera(
            rotation=torch.tensor(data["R"], dtype=torch.float64).reshape(3, 3),
            translation=torch.tensor(data["t"], dtype=torch.float64),
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


def project_gaussians(batch: GaussianBatch, cam: Camera):
    """EWA-style perspective projection of a Gaussian batch.

    Returns (mean2d, cov2d, depth, in_front). Behind-camera primitives are
    flagged, not errors; their outputs are computed at a clamped depth so the
    graph stays finite.
    """
    dtype = batch.means.dtype
    rot = cam.rotation.to(dtype)
    trans = cam.translation.to(dtype)
    cam_pts = batch.means @ rot.T + trans
    depth = cam_pts[:, 2]
    in_front = depth > NEAR_PLANE
    z = depth.clamp_min(NEAR_PLANE)
    x, y = cam_pts[:, 0], cam_pts[:, 1]
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)

    cov3d = batch_densify(batch.scales, batch.rotations)
    cov_cam = rot @ cov3d @ rot.T
    zero = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([cam.fx / z, zero, -cam.fx * x / z**2], dim=-1),
            torch.stack([zero, cam.fy / z, -cam.fy * y / z**2], dim=-1),
        ],
        dim=-2,
    )  # (N, 2, 3)
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    eye = torch.eye(2, dtype=dtype)
    return mean2d, cov2d + COV2D_REGULARIZATION * eye, depth, in_front


class RenderAux:
    """Hooks left behind by rasterize() for gradient-based bookkeeping."""

    def __init__(self, mean2d: Tensor, contributing: Tensor):
        self.mean2d = mean2d
        self.contributing = contributing

    def positional_gradient_norms(self) -> Tensor:
        """Screen-space |d loss / d mean2d| per Gaussian after a backward pass."""
        if self.mean2d.grad is None:
            return torch.zeros(self.mean2d.shape[0], dtype=self.mean2d.dtype)
        return torch.linalg.vector_norm(self.mean2d.grad, dim=-1)


def rasterize(batch: GaussianBatch, cam: Camera, chunk_size: int = 2048, return_aux: bool = False):
    """Render a Gaussian batch to an (H, W, 3) image on a black background."""
    n = len(batch)
    if n > MAX_PRIMITIVES:
        raise InvalidModelError(f"{n} primitives exceeds the rasterizer bound of {MAX_PRIMITIVES}")
    dtype = batch.means.dtype
    h, w = cam.height, cam.width
    image = torch.zeros(h * w, 3, dtype=dtype)
    if n == 0:
        out = image.view(h, w, 3)
        return (out, RenderAux(torch.zeros(0, 2, dtype=dtype), torch.zeros(0, dtype=torch.bool))) if return_aux else out

    mean2d, cov2d, depth, in_front = project_gaussians(batch, cam)
    if return_aux and mean2d.requires_grad:
        mean2d.retain_grad()

    c00 = cov2d[:, 0, 0]
    c01 = cov2d[:, 0, 1]
    c11 = cov2d[:, 1, 1]
    det = c00 * c11 - c01 * c01
    usable = in_front & (det > 0) & torch.isfinite(det)

    # 3-sigma screen bounds; primitives that miss the frame are culled outright.
    with torch.no_grad():
        sx = 3.0 * torch.sqrt(c00.detach().clamp_min(0))
        sy = 3.0 * torch.sqrt(c11.detach().clamp_min(0))
        u, v = mean2d.detach()[:, 0], mean2d.detach()[:, 1]
        on_screen = (u + sx >= 0) & (u - sx <= w - 1) & (v + sy >= 0) & (v - sy <= h - 1)
    active = usable & on_screen
    idx = torch.nonzero(active, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        out = image.view(h, w, 3)
        return (out, RenderAux(mean2d, active)) if return_aux else out
    order = idx[torch.argsort(depth[idx].detach(), stable=True)]

    inv_det = 1.0 / det[order]
    i00 = c11[order] * inv_det
    i01 = -c01[order] * inv_det
    i11 = c00[order] * inv_det
    means = mean2d[order]
    colors = batch.colors[order]
    alphas = batch.opacities[order]
    bx, by = sx[order], sy[order]

    px = torch.arange(w, dtype=dtype).repeat(h)
    py = torch.arange(h, dtype=dtype).repeat_interleave(w)

    transmittance = torch.ones(h * w, dtype=dtype)
    m = order.numel()
    for start in range(0, m, chunk_size):
        end = min(start + chunk_size, m)
        dx = px.unsqueeze(0) - means[start:end, 0].unsqueeze(1)
        dy = py.unsqueeze(0) - means[start:end, 1].unsqueeze(1)
        quad = i00[start:end, None] * dx * dx + 2.0 * i01[start:end, None] * dx * dy + i11[start:end, None] * dy * dy
        footprint = (dx.detach().abs() <= bx[start:end, None]) & (dy.detach().abs() <= by[start:end, None])
        weight = (alphas[start:end, None] * torch.exp(-0.5 * quad)).clamp_max(WEIGHT_CLAMP)
        weight = weight * footprint.to(dtype)
        survive = torch.cumprod(1.0 - weight, dim=0)
        t_before = transmittance.unsqueeze(0) * torch.cat(
            [torch.ones(1, h * w, dtype=dtype), survive[:-1]], dim=0
        )
        gate = (t_before.detach() >= TRANSMITTANCE_FLOOR).to(dtype)
        contrib = weight * t_before * gate
        image = image + contrib.T @ colors[start:end]
        transmittance = transmittance * survive[-1]

    out = image.view(h, w, 3).clamp(0.0, 1.0)
    if return_aux:
        return out, RenderAux(mean2d, active)
    return out


def backprop_rasterize(batch: GaussianBatch, cam: Camera, image_gradient: Tensor) -> dict:
    """Gradients of sum(image * image_gradient) for every Gaussian attribute.

    Also reports per-Gaussian screen-space positional gradient norms, the
    signal the adaptive control mechanisms consume.
    """
    leaves = {
        "means": batch.means.detach().clone().requires_grad_(True),
        "scales": batch.scales.detach().clone().requires_grad_(True),
        "rotations": batch.rotations.detach().clone().requires_grad_(True),
        "colors": batch.colors.detach().clone().requires_grad_(True),
        "opacities": batch.opacities.detach().clone().requires_grad_(True),
    }
    work = GaussianBatch(**leaves)
    image, aux = rasterize(work, cam, return_aux=True)
    loss = (image * image_gradient.to(image.dtype)).sum()
    loss.backward()
    grads = {name: (leaf.grad if leaf.grad is not None else torch.zeros_like(leaf)) for name, leaf in leaves.items()}
    grads["positional"] = aux.positional_gradient_norms()
    return grads


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape or a.ndim != 3 or a.shape[-1] != 3:
        raise SceneDataError(f"image shapes differ or are not HxWx3: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100 dB."""
    _check_pair(a, b)
    mse = float(torch.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: Tensor, b: Tensor, window_size: int = 11, sigma: float = 1.5) -> Tensor:
    """Structural similarity with an 11x11 Gaussian window, valid padding."""
    _check_pair(a, b)
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise SceneDataError("images smaller than the SSIM window")
    dtype = a.dtype
    kernel = _gaussian_window(window_size, sigma, dtype).expand(3, 1, window_size, window_size)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def filt(img):
        return torch.nn.functional.conv2d(img, kernel, groups=3)

    mu_x = filt(x)
    mu_y = filt(y)
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return (num / den).mean()


def distortion(a: Tensor, b: Tensor) -> Tensor:
    """Training distortion: 0.8 * L1 + 0.2 * (1 - SSIM)."""
    _check_pair(a, b)
    return 0.8 * (a - b).abs().mean() + 0.2 * (1.0 - ssim(a, b))
