"""Derivation of renderable Gaussians from (anchor, coupled) primitive pairs.

Geometry comes out of an affine transform on the anchor (translation, per-axis
scaling ratios, rotation composition); appearance is view-dependent through a
small camera-derived embedding. Every head is a single affine map.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .errors import InvalidModelError
from .primitives import identity_quat, quat_multiply, quat_normalize


class PredictionNetworks(nn.Module):
    """Affine heads for geometry offsets and view-dependent appearance.

    Zero weights are the neutral element: no translation, unit scaling ratios,
    identity rotation, mid-gray color, opacity 0.5.
    """

    def __init__(self, feature_dim: int, view_dim: int = 4, dtype=torch.float32):
        super().__init__()
        self.feature_dim = feature_dim
        self.view_dim = view_dim
        self.translation_head = nn.Linear(feature_dim, 3, dtype=dtype)
        self.scaling_head = nn.Linear(feature_dim, 3, dtype=dtype)
        self.rotation_head = nn.Linear(feature_dim, 4, dtype=dtype)
        self.color_head = nn.Linear(view_dim + feature_dim, 3, dtype=dtype)
        self.opacity_head = nn.Linear(view_dim + feature_dim, 1, dtype=dtype)
        for module in self.children():
            nn.init.zeros_(module.weight)
            nn.init.zeros_(module.bias)


def view_embeddings(camera_center: Tensor, locations: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-anchor view embedding: unit direction camera->anchor plus inverse distance."""
    delta = locations - camera_center
    dist = torch.linalg.vector_norm(delta, dim=-1, keepdim=True).clamp_min(eps)
    return torch.cat([delta / dist, 1.0 / dist], dim=-1)


def assemble_prediction_features(ref_embedding: Tensor, res_embedding: Tensor, context: Tensor) -> Tensor:
    """Concatenate reference embedding, residual embedding, and spatial context, in that order."""
    if ref_embedding.shape[:-1] != res_embedding.shape[:-1] or ref_embedding.shape[:-1] != context.shape[:-1]:
        raise InvalidModelError("prediction feature parts must share leading dimensions")
    return torch.cat([ref_embedding, res_embedding, context], dim=-1)


def predict_affine_offsets(zeta: Tensor, nets: PredictionNetworks) -> tuple[Tensor, Tensor, Tensor]:
    """Affine offsets from prediction features: translation, positive scaling ratios, unit quaternion."""
    if zeta.shape[-1] != nets.feature_dim:
        raise InvalidModelError(
            f"prediction features have dim {zeta.shape[-1]}, networks expect {nets.feature_dim}"
        )
    nu_t = nets.translation_head(zeta)
    nu_s = torch.exp(nets.scaling_head(zeta))
    raw = nets.rotation_head(zeta)
    offset = identity_quat(dtype=raw.dtype).to(raw.device)
    nu_r = quat_normalize(raw + offset)
    return nu_t, nu_s, nu_r


def apply_affine(
    location: Tensor, scales: Tensor, rotation: Tensor, nu: tuple[Tensor, Tensor, Tensor]
) -> tuple[Tensor, Tensor, Tensor]:
    """Transform anchor geometry by affine offsets; rotation offset composes on the left."""
    nu_t, nu_s, nu_r = nu
    return location + nu_t, nu_s * scales, quat_multiply(nu_r, rotation)


def predict_appearance(zeta: Tensor, view: Tensor, nets: PredictionNetworks) -> tuple[Tensor, Tensor]:
    """View-dependent color in [0,1]^3 and opacity in (0,1)."""
    if view.shape[-1] != nets.view_dim:
        raise InvalidModelError(f"view embedding has dim {view.shape[-1]}, networks expect {nets.view_dim}")
    fused = torch.cat([view, zeta], dim=-1)
    color = torch.sigmoid(nets.color_head(fused))
    opacity = torch.sigmoid(nets.opacity_head(fused)).squeeze(-1)
    return color, opacity
