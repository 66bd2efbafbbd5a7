"""Rate model: adaptive scalar quantization, conditional Gaussian entropy
estimation with grid priors and hyperpriors, and a factorized bottleneck for
the hyperprior side information.

The same probabilities drive both the differentiable rate term during
training (additive uniform noise standing in for quantization) and the exact
per-symbol bit costs handed to the arithmetic coder.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .errors import InvalidModelError

# Probability floor aligned with the 16/32-bit precision of the range coder.
PROB_FLOOR = 2.0**-24
MIN_STEP = 1e-4
MIN_SCALE = 1e-6
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def quantize(value: Tensor, step) -> tuple[Tensor, Tensor]:
    """Scalar quantization: (integer index, reconstruction). Ties round to even."""
    step = torch.as_tensor(step, dtype=value.dtype)
    if bool((step <= 0).any()):
        raise InvalidModelError("quantization step must be positive")
    index = torch.round(value / step)
    return index.to(torch.int64), index * step


def noisy_surrogate(value: Tensor, step, noise: Tensor) -> Tensor:
    """Quantization stand-in for training: value + step * u, u in [-1/2, 1/2)."""
    step = torch.as_tensor(step, dtype=value.dtype)
    if bool((step <= 0).any()):
        raise InvalidModelError("quantization step must be positive")
    return value + step * noise


def normal_cdf(x: Tensor) -> Tensor:
    return 0.5 * (1.0 + torch.erf(x * _INV_SQRT2))


def discrete_gaussian_probs(value: Tensor, mean: Tensor, scale: Tensor, step, clamp: bool = True) -> Tensor:
    """Probability mass of a quantization bin of width `step` centered at `value`."""
    step = torch.as_tensor(step, dtype=value.dtype)
    centered = value - mean
    upper = normal_cdf((centered + step / 2) / scale)
    lower = normal_cdf((centered - step / 2) / scale)
    p = upper - lower
    return p.clamp_min(PROB_FLOOR) if clamp else p


def discrete_gaussian_bits(value: Tensor, mean: Tensor, scale: Tensor, step) -> Tensor:
    """Per-element bit cost under the discretized Gaussian, floored probabilities."""
    return -torch.log2(discrete_gaussian_probs(value, mean, scale, step))


class FactorizedBottleneck(nn.Module):
    """Learned per-dimension CDF for unconditioned latents.

    The CDF is piecewise linear and non-decreasing, with knots at the integers
    of [-support, support]; bin masses come from softplus-activated logits so
    the ends pin to exactly 0 and 1.
    """

    def __init__(self, dim: int, support: int, dtype=torch.float32):
        super().__init__()
        if support < 1:
            raise InvalidModelError("bottleneck support must be at least 1")
        self.dim = dim
        self.support = support
        self.logits = nn.Parameter(torch.zeros(dim, 2 * support, dtype=dtype))

    def knot_cdf(self) -> Tensor:
        """CDF values at the integer knots, shape (dim, 2*support + 1)."""
        masses = nn.functional.softplus(self.logits) + 1e-9
        cum = torch.cumsum(masses, dim=-1)
        total = cum[:, -1:].clone()
        zeros = torch.zeros(self.dim, 1, dtype=cum.dtype, device=cum.device)
        return torch.cat([zeros, cum / total], dim=-1)

    def cdf(self, x: Tensor) -> Tensor:
        """Evaluate the CDF at (N, dim) points; clamps outside the support."""
        if x.shape[-1] != self.dim:
            raise InvalidModelError(f"bottleneck expects dim {self.dim}, got {x.shape[-1]}")
        knots = self.knot_cdf()
        t = (x.clamp(-self.support, self.support) + self.support)
        i0 = t.floor().long().clamp_(0, 2 * self.support - 1)
        frac = t - i0.to(t.dtype)
        flat_knots = knots.unsqueeze(0).expand(x.shape[0], -1, -1)
        left = flat_knots.gather(2, i0.unsqueeze(-1)).squeeze(-1)
        right = flat_knots.gather(2, (i0 + 1).unsqueeze(-1)).squeeze(-1)
        return left + frac * (right - left)

    def probs(self, values: Tensor, clamp: bool = True) -> Tensor:
        """Mass of the unit-width bin around each value (integers at coding time)."""
        p = self.cdf(values + 0.5) - self.cdf(values - 0.5)
        return p.clamp_min(PROB_FLOOR) if clamp else p

    def bits(self, values: Tensor) -> Tensor:
        return -torch.log2(self.probs(values))


def bottleneck_bits(quantized: Tensor, model: FactorizedBottleneck) -> Tensor:
    """Total bit cost of integer-quantized latents under the bottleneck."""
    return model.bits(quantized).sum()


class EntropyHeads(nn.Module):
    """All learned pieces of the rate model for one scene.

    Quantization steps are predicted per anchor from the grid priors; entropy
    parameters for embeddings additionally see the hyperprior latents, while
    covariance parameters are conditioned on the priors alone.
    """

    def __init__(self, cfg: ModelConfig, dtype=torch.float32):
        super().__init__()
        prior_dim = cfg.prior_grid.output_dim
        hyper = cfg.hyper_dim
        self.cfg = cfg
        self.param_head_ref = nn.Linear(hyper + prior_dim, 2 * cfg.ref_embedding_dim, dtype=dtype)
        self.param_head_res = nn.Linear(hyper + prior_dim, 2 * cfg.res_embedding_dim, dtype=dtype)
        self.param_head_cov = nn.Linear(prior_dim, 2 * 7, dtype=dtype)
        self.step_head_ref = nn.Linear(prior_dim, 1, dtype=dtype)
        self.step_head_res = nn.Linear(prior_dim, 1, dtype=dtype)
        self.step_head_cov = nn.Linear(prior_dim, 1, dtype=dtype)
        self.hyper_encoder_ref = nn.Linear(cfg.ref_embedding_dim, hyper, dtype=dtype)
        self.hyper_encoder_res = nn.Linear(cfg.res_embedding_dim, hyper, dtype=dtype)
        self.bottleneck_ref = FactorizedBottleneck(hyper, cfg.hyper_support, dtype=dtype)
        self.bottleneck_res = FactorizedBottleneck(hyper, cfg.hyper_support, dtype=dtype)
        self._init_weights()

    def _init_weights(self):
        step_bias = math.log(math.expm1(0.02))
        scale_bias = math.log(math.expm1(1.0))
        for head in (self.param_head_ref, self.param_head_res, self.param_head_cov):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            half = head.bias.shape[0] // 2
            with torch.no_grad():
                head.bias[half:] = scale_bias
        for head in (self.step_head_ref, self.step_head_res, self.step_head_cov):
            nn.init.zeros_(head.weight)
            nn.init.constant_(head.bias, step_bias)

    @staticmethod
    def _split_params(raw: Tensor) -> tuple[Tensor, Tensor]:
        mean, scale = raw.chunk(2, dim=-1)
        return mean, nn.functional.softplus(scale).clamp_min(MIN_SCALE)

    def steps(self, prior: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-anchor quantization steps (ref, res, cov), softplus-activated and floored."""

        def one(head):
            return nn.functional.softplus(head(prior)).clamp_min(MIN_STEP)

        return one(self.step_head_ref), one(self.step_head_res), one(self.step_head_cov)

    def embedding_params(self, which: str, hyper: Tensor, prior: Tensor) -> tuple[Tensor, Tensor]:
        """Gaussian entropy parameters for embeddings from hyperprior + spatial prior."""
        head = self.param_head_ref if which == "ref" else self.param_head_res
        if hyper.shape[-1] != self.cfg.hyper_dim:
            raise InvalidModelError(f"hyperprior dim {hyper.shape[-1]} != {self.cfg.hyper_dim}")
        return self._split_params(head(torch.cat([hyper, prior], dim=-1)))

    def covariance_params(self, prior: Tensor) -> tuple[Tensor, Tensor]:
        """Gaussian entropy parameters for the 7 covariance values, priors only."""
        return self._split_params(self.param_head_cov(prior))

    def encode_hyper(self, which: str, signal: Tensor) -> Tensor:
        encoder = self.hyper_encoder_ref if which == "ref" else self.hyper_encoder_res
        bound = float(self.cfg.hyper_support)
        return encoder(signal).clamp(-bound, bound)


def _uniform_noise(shape, dtype, generator, frozen: bool) -> Tensor:
    if frozen:
        return torch.zeros(shape, dtype=dtype)
    return torch.rand(shape, dtype=dtype, generator=generator) - 0.5


def model_rate(
    model,
    mode: str = "training",
    generator: torch.Generator | None = None,
    detail: bool = False,
    frozen_noise: bool = False,
):
    """Estimated coding cost in bits of all entropy-coded model parameters.

    Training mode perturbs values with uniform noise scaled by the predicted
    steps and stays differentiable end to end; exact mode evaluates the same
    distributions at the quantized values. Anchor locations travel through the
    dedicated location coder and are not part of this estimate, nor are the
    fp16 network/grid sections.
    """
    if mode not in ("training", "exact"):
        raise InvalidModelError(f"unknown rate mode {mode!r}")
    heads: EntropyHeads = model.entropy
    cfg = model.cfg
    n, k = model.num_anchors, cfg.k
    dtype = model.dtype
    if n == 0:
        zero = torch.zeros((), dtype=dtype)
        return (zero, {}) if detail else zero

    prior = model.prior_grid.query(model.anchor_xyz)
    step_ref, step_res, step_cov = heads.steps(prior)
    prior_res = prior.unsqueeze(1).expand(n, k, -1).reshape(n * k, -1)
    step_res_all = step_res.unsqueeze(1).expand(n, k, -1).reshape(n * k, 1)

    ref = model.anchor_embedding
    res = model.coupled_embedding
    cov = model.covariance_values()

    hyper_ref = heads.encode_hyper("ref", ref)
    hyper_res = heads.encode_hyper("res", res)

    if mode == "training":
        ref_vals = noisy_surrogate(ref, step_ref, _uniform_noise(ref.shape, dtype, generator, frozen_noise))
        res_vals = noisy_surrogate(res, step_res_all, _uniform_noise(res.shape, dtype, generator, frozen_noise))
        cov_vals = noisy_surrogate(cov, step_cov, _uniform_noise(cov.shape, dtype, generator, frozen_noise))
        hyper_ref_vals = hyper_ref + _uniform_noise(hyper_ref.shape, dtype, generator, frozen_noise)
        hyper_res_vals = hyper_res + _uniform_noise(hyper_res.shape, dtype, generator, frozen_noise)
    else:
        if model.hyper_anchor is not None:
            hyper_ref_vals = model.hyper_anchor.to(dtype)
            hyper_res_vals = model.hyper_coupled.to(dtype)
        else:
            hyper_ref_vals = quantize(hyper_ref, 1.0)[1]
            hyper_res_vals = quantize(hyper_res, 1.0)[1]
        ref_vals = quantize(ref, step_ref)[1]
        res_vals = quantize(res, step_res_all)[1]
        cov_vals = quantize(cov, step_cov)[1]

    mean_ref, scale_ref = heads.embedding_params("ref", hyper_ref_vals, prior)
    mean_res, scale_res = heads.embedding_params("res", hyper_res_vals, prior_res)
    mean_cov, scale_cov = heads.covariance_params(prior)

    parts = {
        "anchor_embeddings": discrete_gaussian_bits(ref_vals, mean_ref, scale_ref, step_ref).sum(),
        "coupled_embeddings": discrete_gaussian_bits(res_vals, mean_res, scale_res, step_res_all).sum(),
        "anchor_covariances": discrete_gaussian_bits(cov_vals, mean_cov, scale_cov, step_cov).sum(),
        "hyper_anchor": heads.bottleneck_ref.bits(hyper_ref_vals).sum(),
        "hyper_coupled": heads.bottleneck_res.bits(hyper_res_vals).sum(),
    }
    total = sum(parts.values())
    return (total, parts) if detail else total
