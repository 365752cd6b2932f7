"""Instance normalisation with global, spatial and flow-warped modulation.

All layers share one normalisation step: per (sample, channel) statistics
over the spatial axes, with ``eps`` added to the variance under the square
root.  They differ only in how the scale and bias are produced:

* ``adain``  -- one scalar scale/bias per (sample, channel)
* ``sain``   -- full-resolution scale/bias maps
* ``sawn``   -- maps warped by a flow field, scale alpha-blended with the raw
  activations through an occlusion mask
* ``msawn``  -- ``sawn`` inside a binary region, plain ``sain`` outside
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

EPS = 1e-5


class NormVariant(str, enum.Enum):
    SAN = "SAN"  # no warping
    SAWS = "SAWS"  # warp the scale map only
    SAWN = "SAWN"  # warp scale and bias

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ContractError(f"unknown normalisation variant {value!r}") from None


@dataclass(frozen=True)
class InstanceStats:
    mu: np.ndarray  # (B, C)
    sigma: np.ndarray  # (B, C)
    eps: float = EPS

    @property
    def divisor(self):
        return np.sqrt(self.sigma ** 2 + self.eps)


@dataclass(frozen=True)
class ModulationMaps:
    lambda_map: np.ndarray
    beta_map: np.ndarray

    def __post_init__(self):
        if np.shape(self.lambda_map) != np.shape(self.beta_map):
            raise DimensionError(
                f"scale map {np.shape(self.lambda_map)} and bias map "
                f"{np.shape(self.beta_map)} differ in shape")


# ----------------------------------------------------------------------------
# forward


def instance_stats(h, eps=EPS):
    """Spatial mean and (biased) standard deviation per sample and channel."""
    h = T.as_tensor4(h, "h")
    mu = h.mean(axis=(2, 3))
    # mean((h - mu)^2) == mean(h^2) - mu^2, the centred form loses less precision
    var = ((h - mu[:, :, None, None]) ** 2).mean(axis=(2, 3))
    return InstanceStats(mu, np.sqrt(var), eps)


def _normalize(h, eps):
    mu = h.mean(axis=(2, 3), keepdims=True)
    c = h - mu
    d = np.sqrt((c * c).mean(axis=(2, 3), keepdims=True) + eps)
    return c / d, d


def _normalize_vjp(hn, d, g):
    gm = g.mean(axis=(2, 3), keepdims=True)
    ghn = (g * hn).mean(axis=(2, 3), keepdims=True)
    return (g - gm - hn * ghn) / d


def normalized(h, eps=EPS):
    """``(h - mu) / sqrt(sigma^2 + eps)``."""
    return _normalize(T.as_tensor4(h, "h"), eps)[0]


def _same_shape(h, *maps):
    for name, m in maps:
        if np.shape(m) != h.shape:
            raise DimensionError(f"{name} shape {np.shape(m)} does not match activations {h.shape}")


def adain(h, lambda_vec, beta_vec, eps=EPS):
    h = T.as_tensor4(h, "h")
    B, C = h.shape[:2]
    if np.shape(lambda_vec) != (B, C) or np.shape(beta_vec) != (B, C):
        raise DimensionError(
            f"adain: scale {np.shape(lambda_vec)} / bias {np.shape(beta_vec)} must be {(B, C)}")
    hn, _ = _normalize(h, eps)
    return np.asarray(lambda_vec)[:, :, None, None] * hn + np.asarray(beta_vec)[:, :, None, None]


def sain(h, mod, eps=EPS):
    h = T.as_tensor4(h, "h")
    _same_shape(h, ("scale map", mod.lambda_map), ("bias map", mod.beta_map))
    hn, _ = _normalize(h, eps)
    return mod.lambda_map * hn + mod.beta_map


def warp_modulation(mod, flow):
    """Bilinearly warp both modulation maps by ``flow``."""
    return ModulationMaps(T.bilinear_sample(mod.lambda_map, flow),
                          T.bilinear_sample(mod.beta_map, flow))


def _check_occ(h, occ):
    if occ.ndim != 4 or occ.shape[0] != h.shape[0] or occ.shape[2:] != h.shape[2:] \
            or occ.shape[1] not in (1, h.shape[1]):
        raise DimensionError(f"occlusion mask {occ.shape} does not broadcast over {h.shape}")
    if T.is_checked() and (occ.min() < 0.0 or occ.max() > 1.0):
        raise ContractError("occlusion mask values must lie in [0, 1]")


def _sawn_forward(h, lam, beta, flow, occ, variant, eps):
    """Forward pass that also returns the intermediates the adjoint needs."""
    hn, d = _normalize(h, eps)
    if variant is NormVariant.SAN:
        return lam * hn + beta, (hn, d, None, None)
    lam_w = T.bilinear_sample(lam, flow)
    beta_w = T.bilinear_sample(beta, flow) if variant is NormVariant.SAWN else beta
    # the blend puts the raw activations, not a constant, in the scale slot
    scale = lam_w * occ + h * (1.0 - occ)
    return scale * hn + beta_w, (hn, d, lam_w, scale)


def sawn(h, mod, flow, occ, variant=NormVariant.SAWN, eps=EPS):
    """Spatially-adaptive warped normalisation.

    ``SAWN``: ``(warp(lam) * m + h * (1 - m)) * h_norm + warp(beta)``.
    ``SAWS`` keeps the bias un-warped; ``SAN`` ignores flow and mask and is
    exactly :func:`sain`.
    """
    variant = NormVariant.parse(variant)
    h = T.as_tensor4(h, "h")
    _same_shape(h, ("scale map", mod.lambda_map), ("bias map", mod.beta_map))
    if variant is not NormVariant.SAN:
        T._check_flow(h, flow)
        _check_occ(h, occ)
    return _sawn_forward(h, mod.lambda_map, mod.beta_map, flow, occ, variant, eps)[0]


def _check_region(h, region):
    if region.ndim != 4 or region.shape[0] != h.shape[0] or region.shape[2:] != h.shape[2:] \
            or region.shape[1] not in (1, h.shape[1]):
        raise DimensionError(f"region mask {region.shape} does not broadcast over {h.shape}")
    if T.is_checked() and not np.all((region == 0) | (region == 1)):
        raise ContractError("region mask must be binary")


def msawn(h, mod, flow, occ, region, variant=NormVariant.SAWN, eps=EPS):
    """Warped modulation inside ``region``, un-warped spatial modulation outside."""
    variant = NormVariant.parse(variant)
    h = T.as_tensor4(h, "h")
    _same_shape(h, ("scale map", mod.lambda_map), ("bias map", mod.beta_map))
    _check_region(h, region)
    if variant is not NormVariant.SAN:
        T._check_flow(h, flow)
        _check_occ(h, occ)
    warped, (hn, _, _, _) = _sawn_forward(h, mod.lambda_map, mod.beta_map, flow, occ,
                                          variant, eps)
    plain = mod.lambda_map * hn + mod.beta_map
    return warped * region + plain * (1.0 - region)


# ----------------------------------------------------------------------------
# adjoints


def _sawn_vjp(h, lam, beta, flow, occ, variant, eps, g):
    _, (hn, d, lam_w, scale) = _sawn_forward(h, lam, beta, flow, occ, variant, eps)
    if variant is NormVariant.SAN:
        dh = _normalize_vjp(hn, d, g * lam)
        return dh, g * hn, g, np.zeros_like(flow), np.zeros_like(occ)
    dscale = g * hn
    dh = dscale * (1.0 - occ) + _normalize_vjp(hn, d, g * scale)
    docc = T._unbroadcast(dscale * (lam_w - h), occ)
    dlam, dflow = T.bilinear_sample_vjp(lam, flow, dscale * occ)
    if variant is NormVariant.SAWN:
        dbeta, dflow_b = T.bilinear_sample_vjp(beta, flow, g)
        dflow = dflow + dflow_b
    else:
        dbeta = g
    return dh, dlam, dbeta, dflow, docc


def _msawn_vjp(h, lam, beta, flow, occ, region, variant, eps, g):
    gw = g * region
    gp = g * (1.0 - region)
    dh, dlam, dbeta, dflow, docc = _sawn_vjp(h, lam, beta, flow, occ, variant, eps, gw)
    hn, d = _normalize(h, eps)
    dh = dh + _normalize_vjp(hn, d, gp * lam)
    return dh, dlam + gp * hn, dbeta + gp, dflow, docc


def _stats_vjp(h, eps, grads):
    gmu, gsigma = grads
    N = h.shape[2] * h.shape[3]
    mu = h.mean(axis=(2, 3), keepdims=True)
    c = h - mu
    sigma = np.sqrt((c * c).mean(axis=(2, 3), keepdims=True))
    safe = np.where(sigma > 0, sigma, 1.0)
    dsig = np.where(sigma > 0, c / (N * safe), 0.0)
    return (gmu[:, :, None, None] / N + gsigma[:, :, None, None] * dsig,)


def _adain_vjp(h, lam, beta, eps, g):
    hn, d = _normalize(h, eps)
    dh = _normalize_vjp(hn, d, g * lam[:, :, None, None])
    return dh, (g * hn).sum(axis=(2, 3)), g.sum(axis=(2, 3))


def _sain_vjp(h, lam, beta, eps, g):
    hn, d = _normalize(h, eps)
    return _normalize_vjp(hn, d, g * lam), g * hn, g


def _warp_vjp(lam, beta, flow, grads):
    glam, gbeta = grads
    dlam, dflow = T.bilinear_sample_vjp(lam, flow, glam)
    dbeta, dflow_b = T.bilinear_sample_vjp(beta, flow, gbeta)
    return dlam, dbeta, dflow + dflow_b


def normalize_vjp(op_id, inputs, grad_out, eps=EPS, variant=NormVariant.SAWN):
    """Adjoint of a normalisation op.

    Input tuples (all arrays):

    ``instance_stats``  (h,)                         grad_out = (g_mu, g_sigma)
    ``adain``           (h, lambda_vec, beta_vec)
    ``sain``            (h, lambda_map, beta_map)
    ``warp_modulation`` (lambda_map, beta_map, flow) grad_out = (g_lam, g_beta)
    ``sawn``            (h, lambda_map, beta_map, flow, occ)
    ``msawn``           (h, lambda_map, beta_map, flow, occ, region)

    ``sawn`` and ``msawn`` return gradients for h, scale, bias, flow and
    occlusion mask; the region mask is not differentiable.
    """
    variant = NormVariant.parse(variant)
    if op_id == "instance_stats":
        return _stats_vjp(inputs[0], eps, grad_out)
    if op_id == "adain":
        return _adain_vjp(*inputs, eps, grad_out)
    if op_id == "sain":
        return _sain_vjp(*inputs, eps, grad_out)
    if op_id == "warp_modulation":
        return _warp_vjp(*inputs, grad_out)
    if op_id == "sawn":
        return _sawn_vjp(*inputs, variant, eps, grad_out)
    if op_id == "msawn":
        return _msawn_vjp(*inputs, variant, eps, grad_out)
    raise ContractError(f"no adjoint registered for op {op_id!r}")
