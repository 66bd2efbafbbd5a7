"""splatcodec: rate-constrained codec for anchor-based Gaussian splatting scenes."""

from .config import (
    HASH_PRIMES,
    LAMBDA_PRESETS,
    GridConfig,
    ModelConfig,
    TemporalConfig,
    TrainConfig,
    load_config_file,
    parse_config_text,
)
from .errors import BitstreamError, InvalidModelError, SceneDataError, SplatcodecError
from .grid import FeatureGrid, spatial_hash
from .model import SceneModel, TemporalState, derive_batch, derive_gaussians, group_coupled
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
    densify_covariance,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
)
from .renderer import Camera, backprop_rasterize, distortion, project_gaussians, psnr, rasterize, ssim
from .entropy import (
    EntropyHeads,
    FactorizedBottleneck,
    bottleneck_bits,
    discrete_gaussian_bits,
    model_rate,
    noisy_surrogate,
    quantize,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
