"""Procedural "person" scenes with exact ground-truth flow.

A scene is a background plus three axis-aligned textured parts (hair, top,
pants).  The target image is the source moved by an analytic motion: each
target pixel reads the bilinearly interpolated source at the location the
backward flow points to.  Pixels whose source location falls outside the
frame are occluded and take the background colour.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from . import tensor as T
from .errors import ConfigError, DimensionError

PART_LABELS = ("background", "top", "pants", "hair")
TEXTURES = ("solid", "stripes", "checker")
MOTIONS = ("identity", "translate", "rotate", "affine", "random")
N_SCALES = 3
MAX_ROTATION_DEG = 30.0


@dataclass(frozen=True)
class Motion:
    kind: str = "identity"
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in MOTIONS:
            raise ConfigError(f"unknown motion {self.kind!r}; expected one of {MOTIONS}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __str__(self):
        return self.kind + ("(" + ",".join(f"{p:g}" for p in self.params) + ")"
                            if self.params else "")

    @classmethod
    def parse(cls, text):
        """Parse ``kind`` or ``kind(p1,p2,...)``."""
        text = text.strip()
        if "(" not in text:
            return cls(text)
        kind, rest = text.split("(", 1)
        body = rest.rstrip(")").strip()
        params = tuple(float(v) for v in body.split(",")) if body else ()
        return cls(kind.strip(), params)


@dataclass(frozen=True)
class SceneSpec:
    H: int = 64
    W: int = 64
    textures: dict = field(default_factory=lambda: {
        "top": "stripes", "pants": "checker", "hair": "solid"})
    motion: Motion = field(default_factory=Motion)
    n_scales: int = N_SCALES

    def validate(self):
        if self.H < 32 or self.W < 32:
            raise ConfigError(f"scene must be at least 32x32, got {self.H}x{self.W}")
        if self.n_scales < 1:
            raise ConfigError("n_scales must be >= 1")
        div = 2 ** (self.n_scales - 1)
        if self.H % div or self.W % div:
            raise ConfigError(f"scene dims {self.H}x{self.W} not divisible by {div}")
        for part, kind in self.textures.items():
            if part not in PART_LABELS[1:]:
                raise ConfigError(f"unknown part {part!r}")
            if kind not in TEXTURES:
                raise ConfigError(f"unknown texture {kind!r} for part {part!r}")


@dataclass(frozen=True)
class RegionMasks:
    """Binary part masks that partition the frame, one ``(1, 1, H, W)`` array per label."""

    masks: tuple
    labels: tuple = PART_LABELS

    @classmethod
    def from_labels(cls, label_map, labels=PART_LABELS):
        return cls(tuple((label_map == j).astype(np.float64)[None, None]
                         for j in range(len(labels))), tuple(labels))

    @property
    def stacked(self):
        return np.concatenate(self.masks, axis=1)

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, j):
        return self.masks[j]


@dataclass(frozen=True)
class FlowPyramid:
    flows: tuple  # finest first, level k is (1, 2, H / 2^k, W / 2^k)
    occlusions: tuple

    def __len__(self):
        return len(self.flows)


@dataclass(frozen=True)
class SynthScene:
    x_s: np.ndarray
    x_t: np.ndarray
    p_s: np.ndarray
    p_t: np.ndarray
    region_masks_s: RegionMasks
    region_masks_t: RegionMasks
    flow_gt: np.ndarray  # target pixel -> source location offset
    occ: np.ndarray
    flow_inv: np.ndarray  # source pixel -> target location offset
    occ_inv: np.ndarray
    background: np.ndarray
    seed: int
    spec: SceneSpec
    motion: Motion


# ----------------------------------------------------------------------------
# flows


def _grid(H, W):
    return np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                       indexing="ij")


def _affine_matrix(kind, params):
    """(A, t) such that the source location is ``c + A (p - c) + t`` in (y, x) order."""
    if kind == "identity":
        return np.eye(2), np.zeros(2)
    if kind == "translate":
        if len(params) != 2:
            raise ConfigError("translate expects (dy, dx)")
        return np.eye(2), np.asarray(params, dtype=np.float64)
    if kind == "rotate":
        if len(params) != 1:
            raise ConfigError("rotate expects (theta_degrees,)")
        theta = params[0]
        if abs(theta) > MAX_ROTATION_DEG:
            raise ConfigError(f"rotation {theta} deg exceeds +/-{MAX_ROTATION_DEG}")
        r = np.deg2rad(theta)
        return np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]]), np.zeros(2)
    if kind == "affine":
        if len(params) != 6:
            raise ConfigError("affine expects (a_yy, a_yx, a_xy, a_xx, ty, tx)")
        A = np.asarray(params[:4], dtype=np.float64).reshape(2, 2)
        if abs(np.linalg.det(A)) < 1e-6:
            raise ConfigError("affine motion is singular")
        return A, np.asarray(params[4:], dtype=np.float64)
    raise ConfigError(f"unknown flow kind {kind!r}")


def gen_flow(kind, params, H, W):
    """Backward-warp displacement field ``(1, 2, H, W)`` for an analytic motion.

    Entry ``(dy, dx)`` at target pixel ``p`` is the source location of ``p``
    minus ``p``; motions act about the frame centre.
    """
    A, t = _affine_matrix(kind, tuple(params))
    yy, xx = _grid(H, W)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    py, px = yy - cy, xx - cx
    sy = cy + A[0, 0] * py + A[0, 1] * px + t[0]
    sx = cx + A[1, 0] * py + A[1, 1] * px + t[1]
    return np.stack([sy - yy, sx - xx])[None]


def inverse_motion(motion):
    """The motion that maps target locations back onto source locations' targets."""
    if motion.kind == "identity":
        return motion
    if motion.kind == "translate":
        return Motion("translate", tuple(-p for p in motion.params))
    if motion.kind == "rotate":
        return Motion("rotate", (-motion.params[0],))
    A, t = _affine_matrix(motion.kind, motion.params)
    Ai = np.linalg.inv(A)
    ti = -Ai @ t
    return Motion("affine", tuple(Ai.ravel()) + tuple(ti))


def random_motion(rng, max_shift=5.0, min_shift=2.0, max_rot=12.0, max_scale=0.08):
    """A misaligning affine motion: rotation, isotropic scaling and translation."""
    theta = np.deg2rad(rng.uniform(-max_rot, max_rot))
    s = 1.0 + rng.uniform(-max_scale, max_scale)
    shift = rng.uniform(min_shift, max_shift, size=2) * rng.choice([-1.0, 1.0], size=2)
    A = s * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return Motion("affine", tuple(A.ravel()) + tuple(shift))


def derive_occlusion(flow):
    """1 where the flow reads inside the frame, ramping to 0 one pixel outside."""
    B, _, H, W = flow.shape
    yy, xx = _grid(H, W)
    sy = yy[None] + flow[:, 0]
    sx = xx[None] + flow[:, 1]
    out = np.maximum.reduce([np.zeros_like(sy), -sy, sy - (H - 1), -sx, sx - (W - 1)])
    return np.clip(1.0 - out, 0.0, 1.0)[:, None]


def flow_pyramid(flow, occ, n_scales=N_SCALES):
    """Average-pool flow and occlusion ``n_scales - 1`` times, halving flow magnitudes."""
    H, W = flow.shape[2:]
    div = 2 ** (n_scales - 1)
    if n_scales < 1 or H % div or W % div:
        raise DimensionError(f"flow {flow.shape} cannot form a {n_scales}-level pyramid")
    flows, occs = [flow], [occ]
    for _ in range(n_scales - 1):
        flows.append(T.avgpool2x(flows[-1]) / 2.0)
        occs.append(T.avgpool2x(occs[-1]))
    return FlowPyramid(tuple(flows), tuple(occs))


# ----------------------------------------------------------------------------
# scenes


def _layout(rng, H, W):
    """Integer label map: 0 background, 1 top, 2 pants, 3 hair."""
    labels = np.zeros((H, W), dtype=np.int64)

    def box(y0, y1, x0, x1):
        j = lambda: rng.integers(-1, 2)
        return (int(y0 * H) + j(), int(y1 * H) + j(), int(x0 * W) + j(), int(x1 * W) + j())

    hair = box(0.14, 0.27, 0.38, 0.62)
    top = box(0.27, 0.56, 0.27, 0.73)
    pants = box(0.56, 0.86, 0.33, 0.67)
    for label, (y0, y1, x0, x1) in ((3, hair), (1, top), (2, pants)):
        labels[y0:y1, x0:x1] = label
    return labels


def _texture(rng, kind, H, W):
    c1 = rng.uniform(0.1, 0.9, size=3)
    if kind == "solid":
        return np.broadcast_to(c1[:, None, None], (3, H, W))
    c2 = rng.uniform(0.1, 0.9, size=3)
    while np.abs(c1 - c2).sum() < 0.6:
        c2 = rng.uniform(0.1, 0.9, size=3)
    yy, xx = _grid(H, W)
    if kind == "stripes":
        period = int(rng.choice([4, 6, 8]))
        coord = [yy, xx, yy + xx][int(rng.integers(3))]
        sel = (coord // (period // 2)) % 2
    else:
        cell = int(rng.integers(3, 6))
        sel = (yy // cell + xx // cell) % 2
    return np.where(sel[None] > 0, c2[:, None, None], c1[:, None, None])


def part_boundaries(label_map):
    """1 on pixels whose right or lower neighbour carries another label."""
    edge = np.zeros(label_map.shape, dtype=np.float64)
    edge[:, :-1] = np.maximum(edge[:, :-1], label_map[:, :-1] != label_map[:, 1:])
    edge[:-1, :] = np.maximum(edge[:-1, :], label_map[:-1, :] != label_map[1:, :])
    return edge


def warp_labels(label_map, flow):
    """Nearest-neighbour label read under ``flow``; off-frame reads become background."""
    H, W = label_map.shape
    yy, xx = _grid(H, W)
    sy = np.rint(yy + flow[0, 0]).astype(np.intp)
    sx = np.rint(xx + flow[0, 1]).astype(np.intp)
    inside = (sy >= 0) & (sy < H) & (sx >= 0) & (sx < W)
    out = label_map[np.clip(sy, 0, H - 1), np.clip(sx, 0, W - 1)]
    return np.where(inside, out, 0)


def render_target(x_s, flow, background):
    """Move ``x_s`` by ``flow``; occluded pixels blend toward the background."""
    occ = derive_occlusion(flow)
    warped = T.bilinear_sample(x_s, flow)
    return occ * warped + (1.0 - occ) * background[None, :, None, None], occ


def gen_scene(seed, spec=None):
    """Deterministically generate one scene from ``seed``."""
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    H, W = spec.H, spec.W
    labels_s = _layout(rng, H, W)
    background = rng.uniform(0.1, 0.9, size=3)
    img = np.broadcast_to(background[:, None, None], (3, H, W)).copy()
    for j, part in enumerate(PART_LABELS[1:], start=1):
        tex = _texture(rng, spec.textures.get(part, "solid"), H, W)
        img = np.where(labels_s[None] == j, tex, img)
    x_s = img[None]

    motion = random_motion(rng) if spec.motion.kind == "random" else spec.motion
    flow = gen_flow(motion.kind, motion.params, H, W)
    inv = inverse_motion(motion)
    flow_inv = gen_flow(inv.kind, inv.params, H, W)
    x_t, occ = render_target(x_s, flow, background)
    labels_t = warp_labels(labels_s, flow)
    return SynthScene(
        x_s=x_s, x_t=x_t,
        p_s=part_boundaries(labels_s)[None, None], p_t=part_boundaries(labels_t)[None, None],
        region_masks_s=RegionMasks.from_labels(labels_s),
        region_masks_t=RegionMasks.from_labels(labels_t),
        flow_gt=flow, occ=occ, flow_inv=flow_inv, occ_inv=derive_occlusion(flow_inv),
        background=background, seed=int(seed), spec=spec, motion=motion)


def retarget(scene, motion):
    """The same source person moved by a different motion."""
    flow = gen_flow(motion.kind, motion.params, scene.spec.H, scene.spec.W)
    inv = inverse_motion(motion)
    flow_inv = gen_flow(inv.kind, inv.params, scene.spec.H, scene.spec.W)
    x_t, occ = render_target(scene.x_s, flow, scene.background)
    labels_s = np.argmax(scene.region_masks_s.stacked[0], axis=0)
    labels_t = warp_labels(labels_s, flow)
    return SynthScene(
        x_s=scene.x_s, x_t=x_t, p_s=scene.p_s, p_t=part_boundaries(labels_t)[None, None],
        region_masks_s=scene.region_masks_s, region_masks_t=RegionMasks.from_labels(labels_t),
        flow_gt=flow, occ=occ, flow_inv=flow_inv, occ_inv=derive_occlusion(flow_inv),
        background=scene.background, seed=scene.seed, spec=scene.spec, motion=motion)


def scene_pyramid(scene, inverse=False):
    if inverse:
        return flow_pyramid(scene.flow_inv, scene.occ_inv, scene.spec.n_scales)
    return flow_pyramid(scene.flow_gt, scene.occ, scene.spec.n_scales)


def save_scene(scene, directory):
    """Write the scene as PPM/PGM rasters plus a ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raster.write_ppm(d / "x_s.ppm", scene.x_s)
    raster.write_ppm(d / "x_t.ppm", scene.x_t)
    raster.write_pgm(d / "p_s.pgm", scene.p_s)
    raster.write_pgm(d / "p_t.pgm", scene.p_t)
    raster.write_pgm(d / "occlusion.pgm", scene.occ)
    fscale = max(float(np.abs(scene.flow_gt).max()), 1e-12)
    raster.write_pgm(d / "flow_dy.pgm", 0.5 + 0.5 * scene.flow_gt[0, 0] / fscale)
    raster.write_pgm(d / "flow_dx.pgm", 0.5 + 0.5 * scene.flow_gt[0, 1] / fscale)
    for name, m in zip(scene.region_masks_s.labels, scene.region_masks_s.masks):
        raster.write_pgm(d / f"mask_s_{name}.pgm", m)
    for name, m in zip(scene.region_masks_t.labels, scene.region_masks_t.masks):
        raster.write_pgm(d / f"mask_t_{name}.pgm", m)
    lines = [
        f"seed={scene.seed}",
        f"H={scene.spec.H}",
        f"W={scene.spec.W}",
        f"n_scales={scene.spec.n_scales}",
        "textures=" + ",".join(f"{k}:{v}" for k, v in sorted(scene.spec.textures.items())),
        f"motion_spec={scene.spec.motion}",
        f"flow_kind={scene.motion.kind}",
        "flow_params=" + ",".join(f"{p:.17g}" for p in scene.motion.params),
        f"flow_heatmap_scale={fscale:.17g}",
    ]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d
