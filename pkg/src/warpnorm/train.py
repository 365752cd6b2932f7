"""Losses, optimiser and the experiment procedures.

Three procedures are provided:

* :func:`train_pose_transfer` -- fit the generator to move a source person
  into the target pose on freshly generated scenes
* :func:`finetune_stpr` -- self-training part replacement: reconstruct the
  source while one part's code comes from the target image, routed
  through M-SAWN
* :func:`ablate` -- compare SAN / SAWS / SAWN under identical seeds and
  budgets, with an encoder-driven model on held-out scenes and a
  free-parameter model fit under one flow and evaluated under another
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as M
from . import normalize as N
from . import synth as S
from . import tensor as T
from .errors import ConfigError, ContractError, TrainingAborted

DIVERGENCE_LIMIT = 1e3


# ----------------------------------------------------------------------------
# weights and optimiser


@dataclass(frozen=True)
class LossWeights:
    adv: float = 2.0
    recon: float = 5.0
    style: float = 0.5
    content: float = 0.0025

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Parameters without a gradient entry are carried over unchanged.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ContractError(f"gradient {name} has shape {np.shape(g)}, "
                                f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {name}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_new[name], v_new[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - step).astype(p.dtype, copy=False)
    return new_params, replace(state, m=m_new, v=v_new, step=t)


# ----------------------------------------------------------------------------
# pixel losses


def l1_loss(a, b):
    if np.shape(a) != np.shape(b):
        raise ContractError(f"l1: shapes {np.shape(a)} and {np.shape(b)} differ")
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b):
    return np.sign(a - b) / a.size


def masked_l1(a, b, mask):
    """Mean absolute difference over the support of ``mask`` (weights broadcast over channels)."""
    if np.shape(a) != np.shape(b):
        raise ContractError(f"masked_l1: shapes {np.shape(a)} and {np.shape(b)} differ")
    mask = np.broadcast_to(mask, np.shape(a))
    total = mask.sum()
    if total <= 0:
        raise ContractError("masked_l1: mask has empty support")
    return float((mask * np.abs(a - b)).sum() / total)


# ----------------------------------------------------------------------------
# frozen feature projector (style / content losses)


@dataclass(frozen=True)
class FeatureProjector:
    """Two-level frozen random conv stack with no bias terms.

    Level 0 is ``relu(conv(x))`` at full resolution, level 1 is
    ``relu(conv(avgpool(level 0)))``.  Both are positively homogeneous.
    """

    weights: tuple

    @classmethod
    def create(cls, seed=1234, widths=(8, 16), dtype="float64"):
        rng = np.random.default_rng(seed)
        ws, c_in = [], 3
        for c in widths:
            ws.append((rng.standard_normal((c, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in)))
                      .astype(dtype))
            c_in = c
        for w in ws:
            w.setflags(write=False)
        return cls(tuple(ws))

    def _kernel(self, l):
        w = self.weights[l]
        return T.ConvKernel(w, np.zeros(w.shape[0], dtype=w.dtype))

    def features(self, x):
        feats, cache = [], []
        a = x
        for l in range(len(self.weights)):
            if l:
                a = T.avgpool2x(a)
            z, cols = T.conv2d(a, self._kernel(l), return_cols=True)
            f = T.relu(z)
            feats.append(f)
            cache.append((a, z, cols))
            a = f
        return feats, cache

    def backward(self, cache, dfeats):
        carry = None
        dx = None
        for l in reversed(range(len(self.weights))):
            a, z, cols = cache[l]
            g = dfeats[l] if carry is None else dfeats[l] + carry
            da, _ = T.conv2d_vjp(a, self._kernel(l), g * (z > 0), cols=cols)
            if l:
                carry = T.avgpool_vjp(da)
            else:
                dx = da
        return dx


def gram(f):
    """Channel Gram matrices ``(B, C, C)`` normalised by ``C * H * W``."""
    B, C, H, W = f.shape
    fm = f.reshape(B, C, H * W)
    return np.matmul(fm, fm.transpose(0, 2, 1)) / (C * H * W)


def _style_terms(fa, fb):
    loss, grads = 0.0, []
    for a, b in zip(fa, fb):
        B, C, H, W = a.shape
        diff = gram(a) - gram(b)
        loss += float((diff ** 2).sum() / B)
        dg = 2.0 * diff / B
        grads.append((2.0 * np.matmul(dg, a.reshape(B, C, H * W)) / (C * H * W)).reshape(a.shape))
    return loss, grads


def _content_terms(fa, fb):
    loss, grads = 0.0, []
    for a, b in zip(fa, fb):
        loss += float(np.mean((a - b) ** 2))
        grads.append(2.0 * (a - b) / a.size)
    return loss, grads


def gram_style_loss(a, b, proj):
    """Sum over projector levels of the squared Frobenius Gram distance (batch mean)."""
    if np.shape(a) != np.shape(b):
        raise ContractError("gram_style_loss: shapes differ")
    return _style_terms(proj.features(a)[0], proj.features(b)[0])[0]


def content_loss(a, b, proj):
    """Sum over projector levels of the mean squared feature distance."""
    if np.shape(a) != np.shape(b):
        raise ContractError("content_loss: shapes differ")
    return _content_terms(proj.features(a)[0], proj.features(b)[0])[0]


def perceptual_terms(out, target, proj, need_style=True, need_content=True):
    """Style and content losses with their gradient w.r.t. ``out``."""
    fa, cache = proj.features(out)
    fb, _ = proj.features(target)
    zero = [np.zeros_like(f) for f in fa]
    ls, gs = _style_terms(fa, fb) if need_style else (0.0, zero)
    lc, gc = _content_terms(fa, fb) if need_content else (0.0, zero)
    return ls, lc, (gs, gc, cache)


# ----------------------------------------------------------------------------
# least-squares critic


def init_critic(seed=0, widths=(16, 32), dtype="float64"):
    """Three conv layers, each followed by 2x average pooling; the last emits one channel."""
    rng = np.random.default_rng(seed)
    p, c_in = {}, 3
    for l, c in enumerate(tuple(widths) + (1,)):
        k = T.ConvKernel.init(c_in, c, rng, dtype=np.dtype(dtype))
        p[f"critic.{l}.w"], p[f"critic.{l}.b"] = k.weights, k.bias
        c_in = c
    return p


def _critic_layers(cp):
    return sorted({int(k.split(".")[1]) for k in cp})


def critic_forward(cp, x):
    cache = []
    a = x
    layers = _critic_layers(cp)
    for l in layers:
        k = T.ConvKernel(cp[f"critic.{l}.w"], cp[f"critic.{l}.b"])
        z, cols = T.conv2d(a, k, return_cols=True)
        pz = T.avgpool2x(z)
        out = pz if l == layers[-1] else T.relu(pz)
        cache.append((a, k, cols, pz))
        a = out
    return a, cache


def critic_backward(cache, dscore, need_params=True):
    grads, g = {}, dscore
    last = len(cache) - 1
    for l in reversed(range(len(cache))):
        a, k, cols, pz = cache[l]
        if l != last:
            g = g * (pz > 0)
        dz = T.avgpool_vjp(g)
        g, dk = T.conv2d_vjp(a, k, dz, cols=cols)
        if need_params:
            grads[f"critic.{l}.w"], grads[f"critic.{l}.b"] = dk.weights, dk.bias
    return g, grads


def adv_loss(critic_params, real, fake, side):
    """Least-squares adversarial loss for the ``critic`` or the ``generator`` side."""
    d_fake, _ = critic_forward(critic_params, fake)
    if side == "generator":
        return float(np.mean((d_fake - 1.0) ** 2))
    if side == "critic":
        d_real, _ = critic_forward(critic_params, real)
        return float(np.mean((d_real - 1.0) ** 2) + np.mean(d_fake ** 2))
    raise ContractError(f"unknown side {side!r}")


def _critic_update(cp, state, real, fake):
    d_real, c_real = critic_forward(cp, real)
    d_fake, c_fake = critic_forward(cp, fake)
    loss = float(np.mean((d_real - 1.0) ** 2) + np.mean(d_fake ** 2))
    _, g_real = critic_backward(c_real, 2.0 * (d_real - 1.0) / d_real.size)
    _, g_fake = critic_backward(c_fake, 2.0 * d_fake / d_fake.size)
    grads = {k: g_real[k] + g_fake[k] for k in g_real}
    cp, state = adam_step(cp, grads, state)
    return cp, state, loss


def _generator_adv(cp, fake):
    d_fake, cache = critic_forward(cp, fake)
    loss = float(np.mean((d_fake - 1.0) ** 2))
    dimg, _ = critic_backward(cache, 2.0 * (d_fake - 1.0) / d_fake.size, need_params=False)
    return loss, dimg


# ----------------------------------------------------------------------------
# total loss


TERMS = ("adv", "recon", "style", "content")


def total_loss(terms, w=LossWeights()):
    """``adv*w.adv + recon*w.recon + style*w.style + content*w.content``.

    Missing terms count as zero; a non-finite term aborts with its name.
    """
    total = 0.0
    for name in TERMS:
        value = terms.get(name, 0.0)
        if not math.isfinite(value):
            raise TrainingAborted(f"loss term {name!r} is not finite ({value})")
        total += getattr(w, name) * value
    return total


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 300
    batch: int = 4
    H: int = 64
    W: int = 64
    widths: tuple = (32, 64, 128)
    style_widths: tuple = (8, 16, 32)
    variant: str = "SAWN"
    adversarial: bool = False
    lr: float = 1e-3
    critic_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = LossWeights()
    motion: str = "random"
    textures: str = "top:stripes,pants:checker,hair:solid"
    n_heldout: int = 8
    eval_every: int = 50
    dtype: str = "float32"
    projector_seed: int = 1234
    # STPR
    stpr_steps: int = 100
    stpr_lr: float = 1e-4
    freeze_encoders: bool = False
    # ablation
    free_steps: int = 300
    free_map_lr: float = 1e-2
    free_motion_fit: str = "random"
    free_motion_test: str = "random"
    identity_task: bool = False

    def model_config(self, free=False):
        return M.ModelConfig(H=self.H, W=self.W, widths=tuple(self.widths),
                             style_widths=tuple(self.style_widths), free_params=free,
                             dtype=self.dtype)

    def scene_spec(self, motion=None):
        tex = dict(kv.split(":") for kv in self.textures.split(",") if kv)
        m = S.Motion.parse(motion or self.motion)
        return S.SceneSpec(H=self.H, W=self.W, textures=tex, motion=m,
                           n_scales=len(self.widths))


def _coerce(value, typ, name):
    text = value.strip()
    if typ in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if typ in (int, "int"):
        return int(text)
    if typ in (float, "float"):
        return float(text)
    if typ in (tuple, "tuple"):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return text


def parse_config(text, base=None):
    """Parse ``key=value`` lines into a :class:`TrainConfig`.

    Blank lines and ``#`` comments are ignored; loss weights use the keys
    ``lambda_adv``, ``lambda_recon``, ``lambda_style``, ``lambda_content``.
    """
    base = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    updates, wupdates = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("lambda_"):
            wname = key[len("lambda_"):]
            if wname not in TERMS:
                raise ConfigError(f"line {lineno}: unknown loss weight {key!r}")
            wupdates[wname] = float(value)
        elif key in types and key != "weights":
            typ = types[key]
            if key in ("widths", "style_widths"):
                typ = "tuple"
            updates[key] = _coerce(value, typ, key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if wupdates:
        updates["weights"] = replace(base.weights, **wupdates)
    cfg = replace(base, **updates)
    N.NormVariant.parse(cfg.variant)
    cfg.scene_spec().validate()
    cfg.model_config().validate()
    return cfg


def format_config(cfg):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "weights":
            for k, wv in asdict(v).items():
                lines.append(f"lambda_{k}={wv!r}")
        elif isinstance(v, tuple):
            lines.append(f"{f.name}={','.join(map(str, v))}")
        else:
            lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# data


def train_seeds(cfg, step, stream=0):
    base = 1_000_003 * (cfg.seed + 1) + 7_919 * stream
    return [base + step * cfg.batch + i for i in range(cfg.batch)]


def heldout_seeds(cfg):
    return [900_000_000 + 1_000 * cfg.seed + i for i in range(cfg.n_heldout)]


def scenes_for(seeds, spec):
    return [S.gen_scene(s, spec) for s in seeds]


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dict
    trace: list  # one dict per step (plus step 0 evaluation)
    critic: dict | None = None
    heldout_l1: float = float("nan")

    def csv(self):
        return trace_csv(self.trace)


TRACE_COLUMNS = ("step", "adv", "recon", "style", "content", "total", "heldout_l1")


def trace_csv(trace, columns=TRACE_COLUMNS):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in trace:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def evaluate_heldout(params, mcfg, variant, scenes, chunk=4):
    """Mean pose-transfer L1 over ``scenes``."""
    total = 0.0
    for i in range(0, len(scenes), chunk):
        part = scenes[i:i + chunk]
        batch = M.make_batch(part, mcfg, "pose_transfer")
        img, _ = M.generate(batch, params, mcfg, variant)
        total += l1_loss(img, batch.target) * len(part)
    return total / len(scenes)


def _generator_step(batch, params, mcfg, variant, proj, w, critic=None, frozen=()):
    img, cache = M.generate(batch, params, mcfg, variant)
    terms = {"recon": l1_loss(img, batch.target)}
    dimg = w.recon * l1_grad(img, batch.target)
    if w.style or w.content:
        ls, lc, (gs, gc, pcache) = perceptual_terms(img, batch.target, proj,
                                                    w.style > 0, w.content > 0)
        terms["style"], terms["content"] = ls, lc
        dfeats = [w.style * a + w.content * b for a, b in zip(gs, gc)]
        dimg = dimg + proj.backward(pcache, dfeats)
    if critic is not None:
        la, dadv = _generator_adv(critic, img)
        terms["adv"] = la
        dimg = dimg + w.adv * dadv
    terms["total"] = total_loss(terms, w)
    grads = M.backward(cache, dimg.astype(img.dtype, copy=False), params, mcfg, frozen)
    return img, terms, grads


def _check_divergence(terms, trace):
    if terms["total"] > DIVERGENCE_LIMIT:
        raise TrainingAborted(f"loss diverged ({terms['total']:.3g})", trace)


def train_pose_transfer(cfg, params=None, scene_spec=None, heldout=None):
    """Train the encoder-driven generator on freshly generated scenes.

    Returns a :class:`TrainResult`; ``trace[0]`` is the untrained evaluation
    (``step`` 0), later rows are per-step losses with the held-out L1 filled
    in every ``eval_every`` steps and at the end.
    """
    mcfg = cfg.model_config()
    variant = N.NormVariant.parse(cfg.variant)
    spec = scene_spec or cfg.scene_spec()
    params = params if params is not None else M.init_params(mcfg, cfg.seed)
    params = M.cast_params(params, mcfg.dtype)
    proj = FeatureProjector.create(cfg.projector_seed, dtype=mcfg.dtype)
    heldout = heldout if heldout is not None else scenes_for(heldout_seeds(cfg), spec)
    state = OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    critic = cstate = None
    if cfg.adversarial:
        critic = M.cast_params(init_critic(cfg.seed + 17), mcfg.dtype)
        cstate = OptimState(lr=cfg.critic_lr, beta1=cfg.beta1, beta2=cfg.beta2)

    l1 = evaluate_heldout(params, mcfg, variant, heldout)
    trace = [{"step": 0, "heldout_l1": l1}]
    for step in range(1, cfg.steps + 1):
        batch = M.make_batch(scenes_for(train_seeds(cfg, step), spec), mcfg, "pose_transfer")
        img, terms, grads = _generator_step(batch, params, mcfg, variant, proj, cfg.weights,
                                            critic)
        _check_divergence(terms, trace)
        params, state = adam_step(params, grads, state)
        if critic is not None:
            critic, cstate, terms["critic"] = _critic_update(critic, cstate, batch.target, img)
        row = {"step": step, **terms}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row["heldout_l1"] = evaluate_heldout(params, mcfg, variant, heldout)
        trace.append(row)
    return TrainResult(params, trace, critic, trace[-1]["heldout_l1"])


# ----------------------------------------------------------------------------
# STPR


STPR_PARTS = (1, 2, 3)  # top, pants, hair; the background is never swapped


def stpr_eval(params, mcfg, variant, scenes, parts=STPR_PARTS):
    """Texture and preservation errors of part replacement on ``scenes``.

    For every scene and part ``j``: ``target_l1`` is the error inside
    ``M_s^j`` against the reference image warped back to the source pose
    (visible pixels only); ``nontarget_l1`` is the error outside ``M_s^j``
    against the source.
    """
    tgt, non = [], []
    for s in scenes:
        ref = T.bilinear_sample(s.x_t, s.flow_inv)
        visible = (s.occ_inv >= 1.0).astype(np.float64)
        for j in parts:
            batch = M.make_batch([s], mcfg, "stpr", parts=[j])
            img, _ = M.generate(batch, params, mcfg, variant)
            img = img.astype(np.float64)
            region = s.region_masks_s[j]
            tgt.append(masked_l1(img, ref, region * visible))
            non.append(masked_l1(img, s.x_s, 1.0 - region))
    return float(np.mean(tgt)), float(np.mean(non))


def _self_batch(scenes, mcfg, parts):
    """STPR routing with the part swapped in from the source itself and zero flow."""
    batch = M.make_batch(scenes, mcfg, "stpr", parts=parts)
    masks = np.concatenate([s.region_masks_s.stacked for s in scenes], axis=0)
    x_s = np.concatenate([s.x_s for s in scenes], axis=0)
    batch.parts = M._part_images(x_s, masks).astype(batch.parts.dtype)
    zero = np.zeros_like(scenes[0].flow_gt)
    pyr = S.flow_pyramid(np.repeat(zero, len(scenes), 0),
                         np.ones((len(scenes), 1) + zero.shape[2:]), mcfg.n_scales)
    batch.pyr = S.FlowPyramid(tuple(f.astype(batch.parts.dtype) for f in pyr.flows),
                              tuple(o.astype(batch.parts.dtype) for o in pyr.occlusions))
    return batch


@dataclass
class StprResult:
    params: dict
    trace: list
    before: dict
    after: dict

    def csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "before", "after", "ratio"))
        for key in ("target_l1", "nontarget_l1", "heldout_l1"):
            b, a = self.before[key], self.after[key]
            w.writerow((key, _fmt(b), _fmt(a), _fmt(a / b if b else float("nan"))))
        return buf.getvalue()


def finetune_stpr(params, cfg, steps=None, self_replace=False, heldout=None):
    """Finetune a pose-transfer model with self-training part replacement.

    Each step picks one replaced part per scene at random, reconstructs the
    source with that part's code taken from the target image and its region
    routed through M-SAWN.  With ``self_replace`` the part comes from the
    source itself under zero flow, which reduces to plain reconstruction.
    """
    steps = cfg.stpr_steps if steps is None else steps
    mcfg = cfg.model_config()
    variant = N.NormVariant.parse(cfg.variant)
    spec = cfg.scene_spec()
    params = M.cast_params(params, mcfg.dtype)
    proj = FeatureProjector.create(cfg.projector_seed, dtype=mcfg.dtype)
    heldout = heldout if heldout is not None else scenes_for(heldout_seeds(cfg), spec)
    rng = np.random.default_rng(cfg.seed + 4242)
    state = OptimState(lr=cfg.stpr_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    frozen = ("pose", "style", "block") if cfg.freeze_encoders else ()

    def measure(p):
        t, n = stpr_eval(p, mcfg, variant, heldout)
        return {"target_l1": t, "nontarget_l1": n,
                "heldout_l1": evaluate_heldout(p, mcfg, variant, heldout)}

    before = measure(params)
    trace = [{"step": 0, "heldout_l1": before["heldout_l1"]}]
    for step in range(1, steps + 1):
        scenes = scenes_for(train_seeds(cfg, step, stream=1), spec)
        parts = [int(j) for j in rng.choice(STPR_PARTS, size=len(scenes))]
        batch = (_self_batch(scenes, mcfg, parts) if self_replace
                 else M.make_batch(scenes, mcfg, "stpr", parts=parts))
        _, terms, grads = _generator_step(batch, params, mcfg, variant, proj,
                                          replace(cfg.weights, adv=0.0), frozen=frozen)
        _check_divergence(terms, trace)
        params, state = adam_step(params, grads, state)
        trace.append({"step": step, **terms})
    after = measure(params)
    trace[-1]["heldout_l1"] = after["heldout_l1"]
    return StprResult(params, trace, before, after)


# ----------------------------------------------------------------------------
# ablation


ABLATION_COLUMNS = ("mode", "task", "variant", "fit_l1", "eval_l1")


@dataclass
class AblationReport:
    rows: list  # dicts with ABLATION_COLUMNS
    params: dict = field(default_factory=dict)  # (mode, task, variant) -> params

    def get(self, mode, task, variant, key="eval_l1"):
        for r in self.rows:
            if (r["mode"], r["task"], r["variant"]) == (mode, task, variant):
                return r[key]
        raise KeyError((mode, task, variant))

    def csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in ABLATION_COLUMNS])
        return buf.getvalue()


def fit_free(scene, cfg, variant, network=None, steps=None):
    """Fit free modulation maps to one scene with the rest of the model frozen.

    ``network`` supplies the pose encoder and decoder weights (normally the
    encoder-mode run of the same variant); without it a fresh seeded
    initialisation is used.  Only ``free.*`` entries are updated, starting
    from the neutral maps (scale 1, bias 0).
    """
    mcfg = cfg.model_config(free=True)
    fresh = M.init_params(mcfg, cfg.seed)
    params = dict(network) if network is not None else dict(fresh)
    params.update({k: v for k, v in fresh.items() if k.startswith("free.")})
    params = M.cast_params(params, mcfg.dtype)
    proj = FeatureProjector.create(cfg.projector_seed, dtype=mcfg.dtype)
    state = OptimState(lr=cfg.free_map_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    batch = M.make_batch([scene], mcfg, "pose_transfer")
    for _ in range(cfg.free_steps if steps is None else steps):
        _, terms, grads = _generator_step(batch, params, mcfg, variant, proj, cfg.weights,
                                          frozen=("pose", "dec", "out"))
        _check_divergence(terms, [])
        params, state = adam_step(params, grads, state)
    return params


def _free_motions(cfg):
    rng = np.random.default_rng(cfg.seed + 99)
    fit = S.Motion.parse(cfg.free_motion_fit)
    test = S.Motion.parse(cfg.free_motion_test)
    if fit.kind == "random":
        fit = S.random_motion(rng)
    if test.kind == "random":
        test = S.random_motion(rng)
    return fit, test


def ablate(cfg, variants=("SAN", "SAWS", "SAWN"), encoder=True, free=True):
    """Train every variant under identical seeds, data and budgets.

    Encoder mode (task ``misaligned``, and ``identity`` when
    ``cfg.identity_task``): ``fit_l1`` is the last training-batch L1,
    ``eval_l1`` the held-out pose-transfer L1.  Free-parameter mode (task
    ``generalize``): the maps are fit on one scene under flow F1 on top of
    the variant's encoder-mode network; ``fit_l1`` is the error under F1,
    ``eval_l1`` the error when the same maps are driven by an unseen flow F2.
    """
    rows, kept = [], {}
    if encoder:
        tasks = [("misaligned", cfg.motion)]
        if cfg.identity_task:
            tasks.append(("identity", "identity"))
        for task, motion in tasks:
            spec = cfg.scene_spec(motion)
            heldout = scenes_for(heldout_seeds(cfg), spec)
            for v in variants:
                res = train_pose_transfer(replace(cfg, variant=v), scene_spec=spec,
                                          heldout=heldout)
                rows.append({"mode": "encoder", "task": task, "variant": v,
                             "fit_l1": res.trace[-1]["recon"], "eval_l1": res.heldout_l1})
                kept[("encoder", task, v)] = res.params
    if free:
        fit_motion, test_motion = _free_motions(cfg)
        base = S.gen_scene(cfg.seed, cfg.scene_spec("identity"))
        scene_fit = S.retarget(base, fit_motion)
        scene_test = S.retarget(base, test_motion)
        mcfg = cfg.model_config(free=True)
        for v in variants:
            params = fit_free(scene_fit, cfg, v, kept.get(("encoder", "misaligned", v)))
            fit = evaluate_heldout(params, mcfg, v, [scene_fit])
            test = evaluate_heldout(params, mcfg, v, [scene_test])
            rows.append({"mode": "free", "task": "generalize", "variant": v,
                         "fit_l1": fit, "eval_l1": test})
            kept[("free", "generalize", v)] = params
    return AblationReport(rows, kept)
