"""Multiresolution hashed feature grid with trilinear interpolation.

One grid class serves three roles in the pipeline: prediction contexts and
entropy priors looked up at anchor locations, and the per-frame residue
fields of the streamed dynamic path.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .config import GridConfig, HASH_PRIMES
from .errors import InvalidModelError

# Offsets of the 8 cell corners in x-fastest order.
_CORNERS = torch.tensor(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
    dtype=torch.int64,
)


def spatial_hash(coords: Tensor, table_size: int) -> Tensor:
    """XOR-fold integer lattice coords (..., 3) into [0, table_size)."""
    h = coords[..., 0] * HASH_PRIMES[0]
    h = h ^ (coords[..., 1] * HASH_PRIMES[1])
    h = h ^ (coords[..., 2] * HASH_PRIMES[2])
    return h & (table_size - 1)


class FeatureGrid(nn.Module):
    """Hashed multi-level feature field over an axis-aligned domain box.

    Lookups clamp to the domain box (temporal deformation can push query
    points slightly outside) and concatenate per-level features coarse
    to fine.
    """

    def __init__(self, cfg: GridConfig, bounds_min, bounds_max, dtype=torch.float32, init_scale: float = 0.0):
        super().__init__()
        resolutions = cfg.resolutions
        if any(b >= a for a, b in zip(resolutions[1:], resolutions[:-1])):
            raise InvalidModelError("grid resolutions must be strictly increasing")
        self.cfg = cfg
        self.register_buffer("bounds_min", torch.as_tensor(bounds_min, dtype=dtype).reshape(3))
        self.register_buffer("bounds_max", torch.as_tensor(bounds_max, dtype=dtype).reshape(3))
        if bool((self.bounds_max <= self.bounds_min).any()):
            raise InvalidModelError("domain bounds must have positive extent on every axis")
        tables = torch.zeros(cfg.levels, cfg.table_size, cfg.feature_dim, dtype=dtype)
        if init_scale > 0.0:
            tables.uniform_(-init_scale, init_scale)
        self.tables = nn.Parameter(tables)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def query(self, positions: Tensor) -> Tensor:
        """Trilinear lookup at (N, 3) world positions -> (N, levels*feature_dim)."""
        if self.cfg.levels == 0:
            raise InvalidModelError("cannot query an empty grid")
        if not bool(torch.isfinite(positions).all()):
            raise InvalidModelError("grid query positions must be finite")
        extent = self.bounds_max - self.bounds_min
        unit = ((positions - self.bounds_min) / extent).clamp(0.0, 1.0)
        corners = _CORNERS.to(positions.device)
        outputs = []
        for level in range(self.cfg.levels):
            res = self.cfg.resolutions[level]
            scaled = unit * res
            base = scaled.floor().long().clamp_(0, res - 1)  # (N, 3)
            frac = scaled - base.to(scaled.dtype)  # in [0, 1]
            corner_coords = base.unsqueeze(1) + corners  # (N, 8, 3)
            slots = spatial_hash(corner_coords, self.cfg.table_size)
            feats = self.tables[level][slots]  # (N, 8, F)
            w = torch.stack(
                [
                    torch.where(corners[:, axis] == 1, frac[:, axis].unsqueeze(1), 1.0 - frac[:, axis].unsqueeze(1))
                    for axis in range(3)
                ],
                dim=0,
            ).prod(dim=0)  # (N, 8)
            outputs.append((feats * w.unsqueeze(-1)).sum(dim=1))
        return torch.cat(outputs, dim=-1)

    def backprop_query(self, positions: Tensor, upstream: Tensor) -> Tensor:
        """Accumulated table gradients for `upstream` flowing into query(positions)."""
        tables = self.tables
        was_grad = tables.requires_grad
        tables.requires_grad_(True)
        out = self.query(positions)
        (grads,) = torch.autograd.grad(out, tables, grad_outputs=upstream, retain_graph=False)
        tables.requires_grad_(was_grad)
        return grads
