"""Scene model container: anchors, coupled residuals, grids, and networks."""

from __future__ import annotations

import copy

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .entropy import EntropyHeads
from .errors import InvalidModelError
from .grid import FeatureGrid
from .prediction import (
    PredictionNetworks,
    apply_affine,
    assemble_prediction_features,
    predict_affine_offsets,
    predict_appearance,
    view_embeddings,
)
from .primitives import (
    AnchorPrimitive,
    CoupledPrimitive,
    FactoredCovariance,
    Gaussian3D,
    GaussianBatch,
    identity_quat,
    quat_normalize,
)


class SceneModel(nn.Module):
    """All learnable state of one static scene.

    Coupled primitives live in a flat (N*K, res_dim) tensor grouped
    contiguously by anchor, so anchor i owns rows [i*K, (i+1)*K). Scales are
    stored as log-scales to keep them positive under gradient steps.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        locations: Tensor,
        bounds_min,
        bounds_max,
        dtype=torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        n = locations.shape[0]
        locations = torch.as_tensor(locations, dtype=dtype)
        if locations.ndim != 2 or locations.shape[1] != 3:
            raise InvalidModelError("anchor locations must have shape (N, 3)")

        def noise(*shape, scale=0.1):
            return scale * torch.randn(*shape, generator=generator, dtype=dtype)

        self.anchor_xyz = nn.Parameter(locations.clone())
        self.anchor_log_scales = nn.Parameter(torch.full((n, 3), -3.5, dtype=dtype))
        self.anchor_rotation = nn.Parameter(identity_quat(n, dtype=dtype))
        self.anchor_embedding = nn.Parameter(noise(n, cfg.ref_embedding_dim))
        self.coupled_embedding = nn.Parameter(noise(n * cfg.k, cfg.res_embedding_dim))
        self.context_grid = FeatureGrid(cfg.context_grid, bounds_min, bounds_max, dtype=dtype)
        self.prior_grid = FeatureGrid(cfg.prior_grid, bounds_min, bounds_max, dtype=dtype)
        with torch.no_grad():
            for grid in (self.context_grid, self.prior_grid):
                grid.tables.uniform_(-1e-4, 1e-4, generator=generator)
        self.networks = PredictionNetworks(cfg.prediction_feature_dim, cfg.view_embedding_dim, dtype=dtype)
        self.entropy = EntropyHeads(cfg, dtype=dtype)
        # Integer hyperprior latents; populated on decoded / quantized models so
        # that re-encoding reproduces the stream byte for byte.
        self.hyper_anchor: Tensor | None = None
        self.hyper_coupled: Tensor | None = None

    @property
    def num_anchors(self) -> int:
        return self.anchor_xyz.shape[0]

    @property
    def num_coupled(self) -> int:
        return self.coupled_embedding.shape[0]

    @property
    def num_primitives(self) -> int:
        return self.num_anchors + self.num_coupled

    @property
    def dtype(self) -> torch.dtype:
        return self.anchor_xyz.dtype

    def validate(self) -> None:
        if self.num_coupled != self.cfg.k * self.num_anchors:
            raise InvalidModelError(
                f"{self.num_coupled} coupled primitives for {self.num_anchors} anchors with K={self.cfg.k}"
            )
        if self.anchor_embedding.shape != (self.num_anchors, self.cfg.ref_embedding_dim):
            raise InvalidModelError("reference embedding table has the wrong shape")
        for name, value in self.named_parameters():
            if not bool(torch.isfinite(value).all()):
                raise InvalidModelError(f"non-finite values in parameter {name}")

    def anchor(self, index: int) -> AnchorPrimitive:
        if not 0 <= index < self.num_anchors:
            raise InvalidModelError(f"anchor index {index} out of range [0, {self.num_anchors})")
        return AnchorPrimitive(
            location=self.anchor_xyz[index].detach().clone(),
            covariance=FactoredCovariance(
                scales=torch.exp(self.anchor_log_scales[index].detach()),
                rotation=quat_normalize(self.anchor_rotation[index].detach()),
            ),
            ref_embedding=self.anchor_embedding[index].detach().clone(),
        )

    def anchor_scales(self) -> Tensor:
        return torch.exp(self.anchor_log_scales)

    def anchor_rotations(self) -> Tensor:
        return quat_normalize(self.anchor_rotation)

    def covariance_values(self) -> Tensor:
        """The 7 coded covariance parameters per anchor: log-scales then quaternion."""
        return torch.cat([self.anchor_log_scales, self.anchor_rotation], dim=-1)

    def clone(self) -> "SceneModel":
        return copy.deepcopy(self)


def group_coupled(model: SceneModel, anchor_index: int) -> list[CoupledPrimitive]:
    """The K coupled primitives of one anchor, in stored order."""
    if not 0 <= anchor_index < model.num_anchors:
        raise InvalidModelError(f"anchor index {anchor_index} out of range [0, {model.num_anchors})")
    k = model.cfg.k
    rows = model.coupled_embedding[anchor_index * k : (anchor_index + 1) * k].detach()
    return [CoupledPrimitive(res_embedding=rows[i].clone(), anchor_index=anchor_index) for i in range(k)]


def derive_batch(model: SceneModel, camera) -> tuple[GaussianBatch, Tensor]:
    """Derive all N*K renderable Gaussians for one camera.

    Returns the batch (coupled storage order) and the anchor index of each
    Gaussian. Differentiable with respect to every model parameter.
    """
    n, k = model.num_anchors, model.cfg.k
    locations = model.anchor_xyz
    context = model.context_grid.query(locations)
    ref = model.anchor_embedding.unsqueeze(1).expand(n, k, -1)
    res = model.coupled_embedding.view(n, k, -1)
    ctx = context.unsqueeze(1).expand(n, k, -1)
    zeta = assemble_prediction_features(ref, res, ctx)

    nu = predict_affine_offsets(zeta, model.networks)
    means, scales, rotations = apply_affine(
        locations.unsqueeze(1),
        model.anchor_scales().unsqueeze(1),
        model.anchor_rotations().unsqueeze(1),
        nu,
    )

    view = view_embeddings(camera.center().to(locations.dtype), locations)
    colors, opacities = predict_appearance(zeta, view.unsqueeze(1).expand(n, k, -1), model.networks)

    batch = GaussianBatch(
        means=means.reshape(n * k, 3),
        scales=scales.reshape(n * k, 3),
        rotations=rotations.reshape(n * k, 4),
        colors=colors.reshape(n * k, 3),
        opacities=opacities.reshape(n * k),
    )
    anchor_ids = torch.arange(n).repeat_interleave(k)
    return batch, anchor_ids


def derive_gaussians(model: SceneModel, anchor_index: int, camera) -> list[Gaussian3D]:
    """Derive the K Gaussians of one anchor (assemble -> affine -> appearance per pair)."""
    if not 0 <= anchor_index < model.num_anchors:
        raise InvalidModelError(f"anchor index {anchor_index} out of range [0, {model.num_anchors})")
    anchor = model.anchor(anchor_index)
    coupled = group_coupled(model, anchor_index)
    context = model.context_grid.query(anchor.location.unsqueeze(0))[0]
    view = view_embeddings(camera.center().to(anchor.location.dtype), anchor.location.unsqueeze(0))[0]
    out = []
    for item in coupled:
        zeta = assemble_prediction_features(anchor.ref_embedding, item.res_embedding, context)
        nu = predict_affine_offsets(zeta, model.networks)
        mean, scales, rotation = apply_affine(
            anchor.location, anchor.covariance.scales, anchor.covariance.rotation, nu
        )
        color, opacity = predict_appearance(zeta, view, model.networks)
        out.append(
            Gaussian3D(
                mean=mean.detach(),
                covariance=FactoredCovariance(scales.detach(), rotation.detach()),
                color=color.detach(),
                opacity=float(opacity),
            )
        )
    return out


class TemporalState:
    """Per-anchor bookkeeping of the streamed dynamic pipeline."""

    def __init__(self, frame_index: int, num_anchors: int):
        self.frame_index = frame_index
        self.dynamic = torch.zeros(num_anchors, dtype=torch.bool)
        self.grad_accum = torch.zeros(num_anchors)
        self.significance_accum = torch.zeros(num_anchors)
        self.motion_confidence = torch.zeros(num_anchors)

    @property
    def num_anchors(self) -> int:
        return self.dynamic.shape[0]

    def validate(self) -> None:
        if bool((self.grad_accum < 0).any()) or bool((self.significance_accum < 0).any()):
            raise InvalidModelError("temporal accumulators must be non-negative")

    def reset_accumulators(self) -> None:
        self.grad_accum.zero_()
        self.significance_accum.zero_()

    def append_anchors(self, count: int, dynamic: bool = True) -> None:
        flag = torch.full((count,), dynamic, dtype=torch.bool)
        self.dynamic = torch.cat([self.dynamic, flag])
        self.grad_accum = torch.cat([self.grad_accum, torch.zeros(count)])
        self.significance_accum = torch.cat([self.significance_accum, torch.zeros(count)])
        self.motion_confidence = torch.cat([self.motion_confidence, torch.ones(count) * float(dynamic)])
