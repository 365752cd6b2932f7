"""Toy pose-transfer generator built around warped normalisation.

Layout (level 0 is full resolution, level ``n - 1`` the coarsest):

* style encoder -- one conv stack shared by all parts, run on each masked
  part image; per level the part codes are concatenated along channels
* conv-block -- one grouped 3x3 conv per level and part, turning part
  code ``j`` into channel group ``j`` of the scale and bias maps
* pose encoder -- conv + ReLU + 2x average pooling per level
* decoder -- coarse to fine: conv, (M-)SAWN, ReLU, upsample; a final conv
  and ``(tanh + 1) / 2`` produce the image

Parameters live in a flat ``dict`` of arrays (``"pose.0.w"``, ...) so the
optimiser and checkpoint code stay generic.  The backward pass is written
out by hand from the per-op adjoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import normalize as N
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .synth import flow_pyramid, scene_pyramid

CHECKPOINT_MAGIC = "warpnorm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    H: int = 64
    W: int = 64
    n_parts: int = 4
    widths: tuple = (32, 64, 128)  # decoder / pose channels, finest first
    style_widths: tuple = (8, 16, 32)  # per-part code channels
    free_params: bool = False  # trainable modulation maps instead of the style encoder
    batch: int = 1  # batch size the free maps are shared across
    dtype: str = "float64"
    eps: float = N.EPS

    @property
    def n_scales(self):
        return len(self.widths)

    def validate(self):
        if len(self.style_widths) != len(self.widths):
            raise ConfigError("widths and style_widths must have one entry per scale")
        for c in self.widths:
            if c % self.n_parts:
                raise ConfigError(f"width {c} not divisible by n_parts={self.n_parts}")
        div = 2 ** (self.n_scales - 1)
        if self.H % div or self.W % div:
            raise ConfigError(f"{self.H}x{self.W} not divisible by {div}")


def level_shape(cfg, k):
    return cfg.H >> k, cfg.W >> k


def init_params(cfg, seed=0):
    """Seeded initial parameters for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    p = {}

    def conv(name, c_in, c_out, bias=True, gain=np.sqrt(2.0), bias_value=0.0):
        k = T.ConvKernel.init(c_in, c_out, rng, gain=gain, bias=bias_value, dtype=dt)
        p[name + ".w"] = k.weights
        if bias:
            p[name + ".b"] = k.bias

    n, P = cfg.n_scales, cfg.n_parts
    for k in range(n):
        conv(f"pose.{k}", 1 if k == 0 else cfg.widths[k - 1], cfg.widths[k])
    if cfg.free_params:
        for k in range(n):
            h, w = level_shape(cfg, k)
            p[f"free.{k}.lambda"] = np.ones((1, cfg.widths[k], h, w), dtype=dt)
            p[f"free.{k}.beta"] = np.zeros((1, cfg.widths[k], h, w), dtype=dt)
    else:
        for k in range(n):
            # part branches carry no bias: an all-zero part gives an all-zero code
            conv(f"style.{k}", 3 if k == 0 else cfg.style_widths[k - 1], cfg.style_widths[k],
                 bias=False)
        for k in range(n):
            g = cfg.widths[k] // P
            for j in range(P):
                conv(f"block.{k}.{j}", cfg.style_widths[k], 2 * g, gain=0.5)
                p[f"block.{k}.{j}.b"][:g] = 1.0
    for k in range(n):
        c_in = cfg.widths[k] if k == n - 1 else cfg.widths[k + 1]
        conv(f"dec.{k}", c_in, cfg.widths[k])
    conv("out", cfg.widths[0], 3, gain=1.0)
    return p


def _kernel(params, name):
    w = params[name + ".w"]
    b = params.get(name + ".b")
    if b is None:
        b = np.zeros(w.shape[0], dtype=w.dtype)
    return T.ConvKernel(w, b)


def _add_kernel_grad(grads, name, dk, has_bias=True):
    grads[name + ".w"] = grads.get(name + ".w", 0) + dk.weights
    if has_bias:
        grads[name + ".b"] = grads.get(name + ".b", 0) + dk.bias


# ----------------------------------------------------------------------------
# style encoder and conv-block


@dataclass
class StyleParams:
    """Per-level part codes and the modulation maps derived from them."""

    codes: list  # level k: (B, n_parts * c_k, H_k, W_k), part-major channel blocks
    maps: list  # level k: ModulationMaps, each (B, C_k, H_k, W_k)
    n_parts: int = 4

    def block(self, k, j):
        c = self.codes[k].shape[1] // self.n_parts
        return self.codes[k][:, j * c:(j + 1) * c]


def _part_images(x, masks):
    """``(B, P, 3, H, W)`` masked part images from ``x (B,3,H,W)`` and masks ``(B,P,H,W)``."""
    return x[:, None] * masks[:, :, None]


def _style_encode_fwd(parts, params, cfg):
    B, P = parts.shape[:2]
    a = parts.reshape((B * P,) + parts.shape[2:])
    codes, cache = [], []
    for k in range(cfg.n_scales):
        if k:
            a = T.avgpool2x(a)
        z, cols = T.conv2d(a, _kernel(params, f"style.{k}"), return_cols=True)
        e = T.relu(z)
        cache.append((a, z, cols))
        codes.append(e.reshape((B, P * e.shape[1]) + e.shape[2:]))
        a = e
    return codes, cache


def _style_encode_bwd(cache, dcodes, params, cfg, grads):
    a_next_grad = None
    for k in reversed(range(cfg.n_scales)):
        a, z, cols = cache[k]
        g = dcodes[k].reshape(z.shape)
        if a_next_grad is not None:
            g = g + a_next_grad
        dz = g * (z > 0)
        da, dk = T.conv2d_vjp(a, _kernel(params, f"style.{k}"), dz, cols=cols, need_dx=k > 0)
        _add_kernel_grad(grads, f"style.{k}", dk, has_bias=False)
        a_next_grad = T.avgpool_vjp(da) if k > 0 else None


def _block_fwd(codes, params, cfg):
    maps, cache = [], []
    P = cfg.n_parts
    for k, s in enumerate(codes):
        c = s.shape[1] // P
        g = cfg.widths[k] // P
        lam, beta, lcache = [], [], []
        for j in range(P):
            blk = s[:, j * c:(j + 1) * c]
            out, cols = T.conv2d(blk, _kernel(params, f"block.{k}.{j}"), return_cols=True)
            lam.append(out[:, :g])
            beta.append(out[:, g:])
            lcache.append((blk, cols))
        maps.append(N.ModulationMaps(np.concatenate(lam, axis=1), np.concatenate(beta, axis=1)))
        cache.append(lcache)
    return maps, cache


def _block_bwd(cache, dmaps, params, cfg, grads, need_codes=True):
    dcodes = []
    P = cfg.n_parts
    for k, lcache in enumerate(cache):
        g = cfg.widths[k] // P
        dlam, dbeta = dmaps[k]
        parts = []
        for j, (blk, cols) in enumerate(lcache):
            dout = np.concatenate([dlam[:, j * g:(j + 1) * g], dbeta[:, j * g:(j + 1) * g]], axis=1)
            dblk, dk = T.conv2d_vjp(blk, _kernel(params, f"block.{k}.{j}"), dout, cols=cols,
                                    need_dx=need_codes)
            _add_kernel_grad(grads, f"block.{k}.{j}", dk)
            parts.append(dblk)
        dcodes.append(np.concatenate(parts, axis=1) if need_codes else None)
    return dcodes


def derive_modulation(codes, params, cfg):
    """Run the grouped conv-block on a list of per-level codes."""
    return _block_fwd(codes, params, cfg)[0]


def extract_region_styles(x_s, region_masks, params, cfg):
    """Encode each masked part with the shared encoder and derive scale/bias maps.

    ``region_masks`` is a :class:`~warpnorm.synth.RegionMasks` or an array
    ``(B, n_parts, H, W)``.
    """
    masks = region_masks.stacked if hasattr(region_masks, "stacked") else np.asarray(region_masks)
    if masks.shape[1] != cfg.n_parts:
        raise ConfigError(f"got {masks.shape[1]} part masks, model expects {cfg.n_parts}")
    if cfg.free_params:
        raise ConfigError("free-parameter models have no style encoder")
    codes, _ = _style_encode_fwd(_part_images(x_s, masks), params, cfg)
    return StyleParams(codes, derive_modulation(codes, params, cfg), cfg.n_parts)


def stpr_mix(style_src, style_ref, j, params, cfg):
    """Swap part ``j``'s code block in from ``style_ref`` at every level and re-derive maps."""
    if not 0 <= j < cfg.n_parts:
        raise ContractError(f"part index {j} out of range [0, {cfg.n_parts})")
    codes = []
    for k, (a, b) in enumerate(zip(style_src.codes, style_ref.codes)):
        if a.shape != b.shape:
            raise DimensionError(f"level {k}: code shapes {a.shape} and {b.shape} differ")
        c = a.shape[1] // cfg.n_parts
        mixed = a.copy()
        mixed[:, j * c:(j + 1) * c] = b[:, j * c:(j + 1) * c]
        codes.append(mixed)
    return StyleParams(codes, derive_modulation(codes, params, cfg), cfg.n_parts)


def free_style(params, cfg, batch=1):
    maps = [N.ModulationMaps(np.repeat(params[f"free.{k}.lambda"], batch, axis=0),
                             np.repeat(params[f"free.{k}.beta"], batch, axis=0))
            for k in range(cfg.n_scales)]
    return StyleParams([None] * cfg.n_scales, maps, cfg.n_parts)


# ----------------------------------------------------------------------------
# pose encoder


def _pose_fwd(p, params, cfg):
    feats, cache = [], []
    a = p
    for k in range(cfg.n_scales):
        if k:
            a = T.avgpool2x(a)
        z, cols = T.conv2d(a, _kernel(params, f"pose.{k}"), return_cols=True)
        h = T.relu(z)
        cache.append((a, z, cols))
        feats.append(h)
        a = h
    return feats, cache


def _pose_bwd(cache, dfeats, params, cfg, grads):
    carry = None
    for k in reversed(range(cfg.n_scales)):
        a, z, cols = cache[k]
        g = dfeats[k] if carry is None else dfeats[k] + carry
        da, dk = T.conv2d_vjp(a, _kernel(params, f"pose.{k}"), g * (z > 0), cols=cols,
                              need_dx=k > 0)
        _add_kernel_grad(grads, f"pose.{k}", dk)
        carry = T.avgpool_vjp(da) if k > 0 else None


def encode_pose(p, params, cfg):
    """Per-level pose features; level ``k`` is ``(B, widths[k], H / 2^k, W / 2^k)``."""
    return _pose_fwd(T.as_tensor4(p, "pose"), params, cfg)[0]


# ----------------------------------------------------------------------------
# decoder


def region_pyramid(region, n_scales):
    """Binary region masks per level: average-pool then threshold at 1/2."""
    levels = [region]
    for _ in range(n_scales - 1):
        levels.append((T.avgpool2x(levels[-1]) >= 0.5).astype(region.dtype))
    return levels


def _decode_fwd(feats, style, pyr, variant, regions, params, cfg):
    n = cfg.n_scales
    if len(feats) != n or len(style.maps) != n or len(pyr.flows) != n:
        raise DimensionError(
            f"scale mismatch: {len(feats)} pose levels, {len(style.maps)} style levels, "
            f"{len(pyr.flows)} flow levels, model has {n}")
    cache = {"levels": [None] * n}
    r = None
    intermediates = []
    for k in reversed(range(n)):
        a = feats[k] if k == n - 1 else T.upsample_nearest2x(r)
        z, cols = T.conv2d(a, _kernel(params, f"dec.{k}"), return_cols=True)
        if k < n - 1:
            z = z + feats[k]
        mod = style.maps[k]
        flow, occ = pyr.flows[k], pyr.occlusions[k]
        if regions is None:
            nz = N.sawn(z, mod, flow, occ, variant, cfg.eps)
        else:
            nz = N.msawn(z, mod, flow, occ, regions[k], variant, cfg.eps)
        r = T.relu(nz)
        cache["levels"][k] = (a, cols, z, nz)
        intermediates.append({"level": k, "h": z, "h_mod": nz})
    y, cols = T.conv2d(r, _kernel(params, "out"), return_cols=True)
    img = 0.5 * (np.tanh(y) + 1.0)
    cache["out"] = (r, cols, img)
    return img, cache, intermediates


def _decode_bwd(cache, dimg, feats, style, pyr, variant, regions, params, cfg, grads):
    n = cfg.n_scales
    r, cols, img = cache["out"]
    dy = dimg * 2.0 * img * (1.0 - img)  # d/dy of (tanh(y)+1)/2 is (1 - tanh^2)/2
    dr, dk = T.conv2d_vjp(r, _kernel(params, "out"), dy, cols=cols)
    _add_kernel_grad(grads, "out", dk)
    dfeats = [np.zeros_like(f) for f in feats]
    dmaps = [None] * n
    for k in range(n):
        a, cols, z, nz = cache["levels"][k]
        dnz = dr * (nz > 0)
        mod = style.maps[k]
        inputs = (z, mod.lambda_map, mod.beta_map, pyr.flows[k], pyr.occlusions[k])
        if regions is None:
            dz, dlam, dbeta, _, _ = N.normalize_vjp("sawn", inputs, dnz, cfg.eps, variant)
        else:
            dz, dlam, dbeta, _, _ = N.normalize_vjp("msawn", inputs + (regions[k],), dnz,
                                                    cfg.eps, variant)
        dmaps[k] = (dlam, dbeta)
        if k < n - 1:
            dfeats[k] += dz
        da, dk = T.conv2d_vjp(a, _kernel(params, f"dec.{k}"), dz, cols=cols)
        _add_kernel_grad(grads, f"dec.{k}", dk)
        if k == n - 1:
            dfeats[k] += da
        else:
            dr = T.upsample_vjp(da)
    return dfeats, dmaps


def decode(pose_feats, style, pyr, variant, params, cfg, region_mask=None):
    """Coarse-to-fine decoding to a ``(B, 3, H, W)`` image in [0, 1]."""
    variant = N.NormVariant.parse(variant)
    regions = None if region_mask is None else region_pyramid(region_mask, cfg.n_scales)
    return _decode_fwd(pose_feats, style, pyr, variant, regions, params, cfg)[0]


# ----------------------------------------------------------------------------
# batched forward / backward for training


@dataclass
class Batch:
    """Model inputs for a set of scenes, already routed for one mode.

    ``parts`` holds masked part images ``(B, P, 3, H, W)`` (part ``j`` may
    come from the reference image in STPR mode); ``regions`` is the M-SAWN
    mask per level or None.
    """

    parts: np.ndarray
    pose: np.ndarray
    pyr: object
    target: np.ndarray
    regions: list | None = None
    replaced: list = field(default_factory=list)
    source_masks: np.ndarray | None = None


def _stack_pyramids(pyrs):
    from .synth import FlowPyramid
    flows = tuple(np.concatenate(f, axis=0) for f in zip(*(p.flows for p in pyrs)))
    occs = tuple(np.concatenate(o, axis=0) for o in zip(*(p.occlusions for p in pyrs)))
    return FlowPyramid(flows, occs)


def make_batch(scenes, cfg, mode="pose_transfer", parts=None, dtype=None):
    """Route scenes into model inputs.

    ``pose_transfer``: styles from ``x_s``, pose ``p_t``, flow ``flow_gt``,
    target ``x_t``.  ``stpr``: styles from ``x_s`` with part ``parts[b]``
    taken from ``x_t`` instead, pose ``p_s``, the inverse flow (source pixel
    to target location), region ``M_s^j`` for M-SAWN, target ``x_s``.
    """
    dt = np.dtype(dtype or cfg.dtype)
    masks_s = np.concatenate([s.region_masks_s.stacked for s in scenes], axis=0)
    x_s = np.concatenate([s.x_s for s in scenes], axis=0)
    part_imgs = _part_images(x_s, masks_s)
    if mode == "pose_transfer":
        b = Batch(part_imgs, np.concatenate([s.p_t for s in scenes]),
                  _stack_pyramids([scene_pyramid(s) for s in scenes]),
                  np.concatenate([s.x_t for s in scenes]), source_masks=masks_s)
    elif mode == "stpr":
        if parts is None or len(parts) != len(scenes):
            raise ContractError("stpr mode needs one replaced part index per scene")
        regions = []
        part_imgs = part_imgs.copy()
        for i, (s, j) in enumerate(zip(scenes, parts)):
            if not 0 <= j < cfg.n_parts:
                raise ContractError(f"part index {j} out of range")
            part_imgs[i, j] = s.x_t[0] * s.region_masks_t[j][0]
            regions.append(s.region_masks_s[j])
        b = Batch(part_imgs, np.concatenate([s.p_s for s in scenes]),
                  _stack_pyramids([scene_pyramid(s, inverse=True) for s in scenes]),
                  x_s, regions=region_pyramid(np.concatenate(regions), cfg.n_scales),
                  replaced=list(parts), source_masks=masks_s)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    cast = lambda a: a.astype(dt, copy=False)
    b.parts, b.pose, b.target = cast(b.parts), cast(b.pose), cast(b.target)
    from .synth import FlowPyramid
    b.pyr = FlowPyramid(tuple(map(cast, b.pyr.flows)), tuple(map(cast, b.pyr.occlusions)))
    if b.regions is not None:
        b.regions = [cast(r) for r in b.regions]
    return b


def generate(batch, params, cfg, variant):
    """Forward pass on a :class:`Batch`; returns ``(image, cache)``."""
    variant = N.NormVariant.parse(variant)
    feats, pcache = _pose_fwd(batch.pose, params, cfg)
    if cfg.free_params:
        style, scache, bcache = free_style(params, cfg, batch.pose.shape[0]), None, None
    else:
        codes, scache = _style_encode_fwd(batch.parts, params, cfg)
        maps, bcache = _block_fwd(codes, params, cfg)
        style = StyleParams(codes, maps, cfg.n_parts)
    img, dcache, inter = _decode_fwd(feats, style, batch.pyr, variant, batch.regions, params, cfg)
    cache = dict(feats=feats, pcache=pcache, style=style, scache=scache, bcache=bcache,
                 dcache=dcache, variant=variant, batch=batch, intermediates=inter)
    return img, cache


def backward(cache, dimg, params, cfg, frozen=()):
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/dimage``.

    Parameters whose name starts with any prefix in ``frozen`` get no
    gradient entry and their sub-networks are skipped where possible.
    """
    grads = {}
    batch = cache["batch"]
    dfeats, dmaps = _decode_bwd(cache["dcache"], dimg, cache["feats"], cache["style"], batch.pyr,
                                cache["variant"], batch.regions, params, cfg, grads)
    if not any("pose".startswith(f) for f in frozen):
        _pose_bwd(cache["pcache"], dfeats, params, cfg, grads)
    if cfg.free_params:
        for k, (dlam, dbeta) in enumerate(dmaps):
            grads[f"free.{k}.lambda"] = dlam.sum(axis=0, keepdims=True)
            grads[f"free.{k}.beta"] = dbeta.sum(axis=0, keepdims=True)
    elif not any("block".startswith(f) for f in frozen):
        need_codes = not any("style".startswith(f) for f in frozen)
        dcodes = _block_bwd(cache["bcache"], dmaps, params, cfg, grads, need_codes)
        if need_codes:
            _style_encode_bwd(cache["scache"], dcodes, params, cfg, grads)
    return {k: v for k, v in grads.items() if not any(k.startswith(f) for f in frozen)}


def forward_full(scene, params, cfg, variant, mode="pose_transfer", part=None):
    """Run one scene end to end; returns ``(image, intermediates)``.

    ``intermediates`` holds the style maps, pose features, flow pyramid and,
    per level, the decoder activations before (``h``) and after (``h_mod``)
    normalisation.
    """
    if mode == "stpr" and part is None:
        raise ContractError("stpr mode needs the replaced part index")
    batch = make_batch([scene], cfg, mode, parts=None if part is None else [part])
    img, cache = generate(batch, params, cfg, variant)
    inter = dict(style=cache["style"], pose_feats=cache["feats"], pyramid=batch.pyr,
                 levels=cache["intermediates"], target=batch.target, regions=batch.regions)
    return img, inter


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, meta=None):
    """Flat little-endian blob behind a plain-text header.

    Header lines: magic + version, ``endian=little``, optional ``meta.*``
    lines, one ``tensor <name> <dtype> <dim,dim,...>`` line per array, then
    ``end``.  Arrays follow in header order.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "endian=little"]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k}={v}")
    blobs = []
    for name, arr in params.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        lines.append(f"tensor {name} {dt.str} {','.join(map(str, a.shape))}")
        blobs.append(a.astype(dt, copy=False).tobytes())
    lines.append("end")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + b"".join(blobs))


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    raw = Path(path).read_bytes()
    pos = 0
    header = []
    try:
        while True:
            nl = raw.index(b"\n", pos)
            line = raw[pos:nl].decode()
            pos = nl + 1
            if line == "end":
                break
            header.append(line)
        magic, version = header[0].split()
        version = int(version)
    except (ValueError, IndexError, UnicodeDecodeError):
        raise ConfigError(f"{path}: not a checkpoint file") from None
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if header[1] != "endian=little":
        raise ConfigError(f"{path}: unsupported byte order {header[1]!r}")
    meta, params = {}, {}
    for line in header[2:]:
        if line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            meta[k] = v
            continue
        _, name, dts, shape = line.split()
        dt = np.dtype(dts)
        shp = tuple(int(s) for s in shape.split(",")) if shape else ()
        n = int(np.prod(shp)) * dt.itemsize
        params[name] = np.frombuffer(raw[pos:pos + n], dtype=dt).reshape(shp).astype(
            dt.newbyteorder("="))
        pos += n
    return params, meta


def cast_params(params, dtype):
    return {k: v.astype(dtype) for k, v in params.items()}


def with_dtype(cfg, dtype):
    return replace(cfg, dtype=np.dtype(dtype).name)
