import numpy as np
import torch

from splatcodec import Camera, GaussianBatch
from splatcodec.primitives import quat_normalize


def make_camera(width=48, height=48, fx=60.0, z=2.5, dtype=torch.float64):
    return Camera(
        rotation=torch.eye(3, dtype=dtype),
        translation=torch.tensor([0.0, 0.0, z], dtype=dtype),
        fx=fx,
        fy=fx,
        cx=(width - 1) / 2,
        cy=(height - 1) / 2,
        width=width,
        height=height,
    )


def make_batch(n, seed=0, dtype=torch.float64, spread=0.5, scale_lo=0.03, scale_hi=0.12, opacity_hi=0.9):
    rng = np.random.default_rng(seed)
    means = torch.tensor(rng.uniform(-spread, spread, size=(n, 3)), dtype=dtype)
    scales = torch.tensor(rng.uniform(scale_lo, scale_hi, size=(n, 3)), dtype=dtype)
    rotations = quat_normalize(torch.tensor(rng.normal(size=(n, 4)), dtype=dtype))
    colors = torch.tensor(rng.uniform(0.05, 0.95, size=(n, 3)), dtype=dtype)
    opacities = torch.tensor(rng.uniform(0.3, opacity_hi, size=n), dtype=dtype)
    return GaussianBatch(means, scales, rotations, colors, opacities)
