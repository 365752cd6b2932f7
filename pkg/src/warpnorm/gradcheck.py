"""Central-difference checks of the hand-written adjoints.

Each registered op bundles a forward, its adjoint and an input sampler.
:func:`check_vjp` contracts the forward output with a random probe, takes
central differences of that scalar with respect to every differentiable
input, and compares them coordinate-wise against the analytic VJP.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import normalize as N
from . import tensor as T
from .errors import ContractError

REL_FLOOR = 1e-8


@dataclass
class GradReport:
    op_id: str
    seed: int
    tol: float
    max_abs: dict = field(default_factory=dict)
    max_rel: dict = field(default_factory=dict)
    worst: tuple | None = None  # (input name, flat index, analytic, numeric)

    @property
    def max_rel_error(self):
        return max(self.max_rel.values(), default=0.0)

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def central_diff(f, x, eps=1e-5):
    """Estimate the gradient of scalar ``f`` at ``x`` coordinate by coordinate.

    ``x`` is perturbed in place and restored, so ``f`` must not keep
    references to it between calls.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractError(f"finite-difference oracle: non-finite value at coordinate "
                                f"{tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


@dataclass(frozen=True)
class OpSpec:
    """Forward, adjoint and input sampler for one checkable op.

    ``forward(*inputs)`` returns an array or a tuple of arrays;
    ``vjp(inputs, grad_out)`` returns one gradient per differentiable input.
    """

    name: str
    forward: Callable
    vjp: Callable
    sample: Callable  # (rng, size) -> tuple of inputs
    names: tuple
    differentiable: tuple
    default_size: tuple = (1, 2, 5, 5)


REGISTRY: dict[str, OpSpec] = {}


def register(spec):
    REGISTRY[spec.name] = spec
    return spec


def random_flow(rng, shape, scale=1.5):
    """Flow values with no coordinate within 0.1 px of an integer.

    Samples near an integer are shifted by +0.25 to keep central differences
    off the interpolation kinks (and, since pixel centres are integers, off
    the clamp boundaries).
    """
    flow = rng.uniform(-scale, scale, size=shape)
    frac = flow - np.round(flow)
    return np.where(np.abs(frac) < 0.1, flow + 0.25, flow)


def _away_from_zero(a, gap=1e-3):
    return np.where(np.abs(a) < gap, a + 10 * gap, a)


def _flow_shape(size):
    return (size[0], 2) + tuple(size[2:])


def _mask_shape(size):
    return (size[0], 1) + tuple(size[2:])


def _pair_sample(rng, size):
    return rng.standard_normal(size), rng.standard_normal(size)


def _register_tensor_ops():
    for name in ("add", "sub", "mul"):
        register(OpSpec(name, T.FORWARDS[name],
                        lambda inputs, g, _n=name: T.tensor_vjp(_n, inputs, g),
                        _pair_sample, ("a", "b"), (True, True)))
    register(OpSpec("scale", lambda a, s: T.scale(a, s[()]),
                    lambda inputs, g: T.tensor_vjp("scale", (inputs[0], inputs[1][()]), g),
                    lambda rng, size: (rng.standard_normal(size), np.array(rng.normal())),
                    ("a", "s"), (True, True)))
    register(OpSpec("relu", T.relu, lambda inputs, g: T.tensor_vjp("relu", inputs, g),
                    lambda rng, size: (_away_from_zero(rng.standard_normal(size)),),
                    ("a",), (True,)))
    register(OpSpec("lerp", T.lerp, lambda inputs, g: T.tensor_vjp("lerp", inputs, g),
                    lambda rng, size: (rng.standard_normal(size), rng.standard_normal(size),
                                       rng.uniform(0, 1, _mask_shape(size))),
                    ("a", "b", "m"), (True, True, True)))

    def conv_sample(rng, size):
        c = size[1]
        return (rng.standard_normal(size), rng.standard_normal((3, c, 3, 3)) / 3,
                rng.standard_normal(3))

    def conv_vjp(inputs, g):
        dx, dk = T.conv2d_vjp(inputs[0], T.ConvKernel(inputs[1], inputs[2]), g)
        return dx, dk.weights, dk.bias

    register(OpSpec("conv2d", lambda x, w, b: T.conv2d(x, T.ConvKernel(w, b)), conv_vjp,
                    conv_sample, ("x", "weights", "bias"), (True, True, True)))
    register(OpSpec("upsample_nearest2x", T.upsample_nearest2x,
                    lambda inputs, g: T.tensor_vjp("upsample_nearest2x", inputs, g),
                    lambda rng, size: (rng.standard_normal(size),), ("x",), (True,)))
    register(OpSpec("avgpool2x", T.avgpool2x,
                    lambda inputs, g: T.tensor_vjp("avgpool2x", inputs, g),
                    lambda rng, size: (rng.standard_normal(size),), ("x",), (True,),
                    default_size=(1, 2, 6, 6)))
    register(OpSpec("bilinear_sample", T.bilinear_sample,
                    lambda inputs, g: T.tensor_vjp("bilinear_sample", inputs, g),
                    lambda rng, size: (rng.standard_normal(size),
                                       random_flow(rng, _flow_shape(size))),
                    ("src", "flow"), (True, True)))


def _maps_sample(rng, size):
    return (rng.standard_normal(size), 1.0 + 0.5 * rng.standard_normal(size),
            rng.standard_normal(size))


def _register_norm_ops():
    size = (1, 2, 6, 6)
    register(OpSpec("instance_stats",
                    lambda h: (lambda s: (s.mu, s.sigma))(N.instance_stats(h)),
                    lambda inputs, g: N.normalize_vjp("instance_stats", inputs, g),
                    lambda rng, sz: (rng.standard_normal(sz),), ("h",), (True,), size))
    register(OpSpec("adain", N.adain, lambda inputs, g: N.normalize_vjp("adain", inputs, g),
                    lambda rng, sz: (rng.standard_normal(sz), rng.standard_normal(sz[:2]),
                                     rng.standard_normal(sz[:2])),
                    ("h", "lambda", "beta"), (True, True, True), size))
    register(OpSpec("sain", lambda h, lam, beta: N.sain(h, N.ModulationMaps(lam, beta)),
                    lambda inputs, g: N.normalize_vjp("sain", inputs, g),
                    _maps_sample, ("h", "lambda", "beta"), (True, True, True), size))

    def warp_fwd(lam, beta, flow):
        w = N.warp_modulation(N.ModulationMaps(lam, beta), flow)
        return w.lambda_map, w.beta_map

    register(OpSpec("warp_modulation", warp_fwd,
                    lambda inputs, g: N.normalize_vjp("warp_modulation", inputs, g),
                    lambda rng, sz: _maps_sample(rng, sz)[1:] + (random_flow(rng, _flow_shape(sz)),),
                    ("lambda", "beta", "flow"), (True, True, True), size))

    def sawn_sample(rng, sz):
        return _maps_sample(rng, sz) + (random_flow(rng, _flow_shape(sz)),
                                        rng.uniform(0.1, 0.9, _mask_shape(sz)))

    for variant in N.NormVariant:
        register(OpSpec(
            f"sawn[{variant.value}]",
            lambda h, lam, beta, flow, occ, _v=variant:
                N.sawn(h, N.ModulationMaps(lam, beta), flow, occ, _v),
            lambda inputs, g, _v=variant: N.normalize_vjp("sawn", inputs, g, variant=_v),
            sawn_sample, ("h", "lambda", "beta", "flow", "occ"), (True,) * 5, size))

    def msawn_sample(rng, sz):
        region = (rng.uniform(size=_mask_shape(sz)) < 0.5).astype(np.float64)
        return sawn_sample(rng, sz) + (region,)

    register(OpSpec(
        "msawn",
        lambda h, lam, beta, flow, occ, region:
            N.msawn(h, N.ModulationMaps(lam, beta), flow, occ, region, N.NormVariant.SAWN),
        lambda inputs, g: N.normalize_vjp("msawn", inputs, g, variant=N.NormVariant.SAWN),
        msawn_sample, ("h", "lambda", "beta", "flow", "occ", "region"),
        (True,) * 5 + (False,), size))


_register_tensor_ops()
_register_norm_ops()

DEFAULT_OPS = tuple(REGISTRY)


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def check_vjp(op_id, input_sizes=None, seeds=range(20), tol=1e-4, eps=1e-5):
    """Compare analytic and finite-difference VJPs of ``op_id`` over ``seeds``.

    Returns one :class:`GradReport` per seed; a failing report carries the
    worst coordinate in ``worst``.
    """
    try:
        spec = REGISTRY[op_id]
    except KeyError:
        raise ContractError(f"unknown op {op_id!r}; registered: {', '.join(REGISTRY)}") from None
    size = tuple(input_sizes) if input_sizes is not None else spec.default_size
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        inputs = [np.array(a, dtype=np.float64) for a in spec.sample(rng, size)]
        outs = _as_tuple(spec.forward(*inputs))
        probes = tuple(rng.standard_normal(np.shape(o)) for o in outs)
        grad_out = probes if len(probes) > 1 else probes[0]
        analytic = spec.vjp(tuple(inputs), grad_out)

        report = GradReport(op_id, int(seed), tol)
        worst_rel = -1.0
        for k, (name, diff) in enumerate(zip(spec.names, spec.differentiable)):
            if not diff:
                continue

            def scalar(xk, _k=k):
                args = list(inputs)
                args[_k] = xk
                return float(sum(np.sum(p * o)
                                 for p, o in zip(probes, _as_tuple(spec.forward(*args)))))

            numeric = central_diff(scalar, inputs[k], eps)
            a = np.broadcast_to(np.asarray(analytic[k], dtype=np.float64), numeric.shape)
            err = np.abs(a - numeric)
            rel = err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
            report.max_abs[name] = float(err.max(initial=0.0))
            report.max_rel[name] = float(rel.max(initial=0.0))
            if rel.size and rel.max() > worst_rel:
                i = int(np.argmax(rel))
                worst_rel = float(rel.flat[i])
                report.worst = (name, i, float(a.flat[i]), float(numeric.flat[i]))
        reports.append(report)
    return reports
