"""Command-line entry point: ``python -m warpnorm <subcommand>``.

Subcommands
-----------
gradcheck   finite-difference check of every registered adjoint
ablate      SAN / SAWS / SAWN comparison, CSV report plus image grids
stpr        pose-transfer pretraining followed by part-replacement finetuning
visualize   flow / warp / occlusion / output panels for one synthetic scene

Exit codes: 0 success, 1 check or acceptance failure, 2 usage or config error.
All outputs go under ``--out`` together with a ``manifest.txt``.
"""
from __future__ import annotations

import argparse
import colorsys
import hashlib
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import gradcheck as G
from . import model as M
from . import raster as R
from . import synth as S
from . import tensor as T
from . import train as TR
from .errors import ConfigError, ContractError, DimensionError, TrainingAborted

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# run manifest


def version_string():
    """``git describe``-style version of the source tree, or the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


@dataclass
class RunManifest:
    subcommand: str
    config_path: str
    seed: int
    out: str
    version: str = field(default_factory=version_string)
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256

    def record(self, path):
        rel = Path(path).relative_to(self.out).as_posix()
        self.artifacts[rel] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def write(self):
        lines = [f"subcommand={self.subcommand}", f"config={self.config_path}",
                 f"seed={self.seed}", f"out={self.out}", f"version={self.version}",
                 f"wall_clock_s={self.wall_clock:.3f}"]
        lines += [f"artifact.{k}={v}" for k, v in sorted(self.artifacts.items())]
        Path(self.out, "manifest.txt").write_text("\n".join(lines) + "\n")


def thread_limit():
    """Parallelism cap from ``WARPNORM_THREADS`` (default 1 for reproducibility)."""
    raw = os.environ.get("WARPNORM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"WARPNORM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"WARPNORM_THREADS must be a positive integer, got {raw!r}")
    return n


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return TR.parse_config(p.read_text())
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _write(manifest, path, data):
    path = Path(path)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)
    manifest.record(path)


def _ppm(manifest, path, img):
    R.write_ppm(path, img)
    manifest.record(path)


def _pgm(manifest, path, img):
    R.write_pgm(path, img)
    manifest.record(path)


# ----------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    ops = G.DEFAULT_OPS
    if args.ops:
        ops = [o for chunk in args.ops for o in chunk.split(",") if o]
        unknown = [o for o in ops if o not in G.REGISTRY]
        if unknown:
            raise UsageError(f"unknown op(s): {', '.join(unknown)}\n"
                             f"available: {', '.join(G.DEFAULT_OPS)}")
    failed = 0
    print(f"{'op':<22}{'seeds':>6}{'max_abs':>12}{'max_rel':>12}{'tol':>10}  status")
    for op in ops:
        reports = G.check_vjp(op, seeds=range(args.seeds), tol=args.tol, eps=args.eps)
        max_abs = max(max(r.max_abs.values(), default=0.0) for r in reports)
        worst = max(reports, key=lambda r: r.max_rel_error)
        ok = all(r.passed for r in reports)
        failed += not ok
        print(f"{op:<22}{len(reports):>6}{max_abs:>12.3e}{worst.max_rel_error:>12.3e}"
              f"{args.tol:>10.1e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            name, idx, a, f = worst.worst
            print(f"    worst: seed={worst.seed} input={name} index={idx} "
                  f"analytic={a:.6e} numeric={f:.6e}")
    print(f"{len(ops) - failed}/{len(ops)} ops passed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        man = RunManifest("gradcheck", "", 0, str(out))
        man.write()
    return EXIT_OK if not failed else EXIT_FAIL


# ----------------------------------------------------------------------------
# ablate


ORDER = ("SAN", "SAWS", "SAWN")


def ordering_checks(report):
    """Pass/fail lines for the expected variant ordering."""
    enc = {v: report.get("encoder", "misaligned", v) for v in ORDER}
    rows = [
        ("encoder_sawn_margin", enc["SAWN"] / enc["SAN"], "<=0.8", enc["SAWN"] < 0.8 * enc["SAN"]),
        ("encoder_saws_band_low", enc["SAWS"] / enc["SAWN"], ">=0.95",
         enc["SAWS"] >= 0.95 * enc["SAWN"]),
        ("encoder_saws_band_high", enc["SAWS"] / enc["SAN"], "<=1.05",
         enc["SAWS"] <= 1.05 * enc["SAN"]),
    ]
    try:
        free = {v: report.get("free", "generalize", v) for v in ORDER}
        rows.append(("free_generalize_ratio", free["SAWN"] / free["SAN"], "<=0.5",
                     free["SAWN"] <= 0.5 * free["SAN"]))
    except KeyError:
        pass
    return rows


def ordering_csv(rows):
    lines = ["check,value,threshold,pass"]
    lines += [f"{n},{v:.6f},{t},{int(ok)}" for n, v, t, ok in rows]
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("ablate", str(args.config), cfg.seed, str(out))
    t0 = time.perf_counter()
    report = TR.ablate(cfg)
    _write(man, out / "ablation.csv", report.csv())
    checks = ordering_checks(report)
    _write(man, out / "ordering.csv", ordering_csv(checks))

    mcfg = cfg.model_config()
    scenes = TR.scenes_for(TR.heldout_seeds(cfg)[:args.grids], cfg.scene_spec())
    for i, s in enumerate(scenes):
        panels = [s.x_s]
        for v in ORDER:
            img, _ = M.generate(M.make_batch([s], mcfg), report.params[("encoder", "misaligned", v)],
                                mcfg, v)
            panels.append(img)
        panels.append(s.x_t)
        _ppm(man, out / f"grid_{i:02d}.ppm", R.hstack_panels(panels))
    for v in ORDER:
        path = out / f"encoder_{v}.ckpt"
        M.save_checkpoint(path, report.params[("encoder", "misaligned", v)],
                          {"variant": v, "seed": cfg.seed})
        man.record(path)
    man.wall_clock = time.perf_counter() - t0
    man.write()
    print(report.csv(), end="")
    for name, value, thr, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} = {value:.4f} ({thr})")
    return EXIT_FAIL if args.strict and not all(c[3] for c in checks) else EXIT_OK


# ----------------------------------------------------------------------------
# stpr


def cmd_stpr(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("stpr", str(args.config), cfg.seed, str(out))
    t0 = time.perf_counter()
    pre = TR.train_pose_transfer(cfg)
    res = TR.finetune_stpr(pre.params, cfg)
    _write(man, out / "pretrain_trace.csv", pre.csv())
    _write(man, out / "finetune_trace.csv", TR.trace_csv(res.trace))
    _write(man, out / "stpr.csv", res.csv())

    mcfg = cfg.model_config()
    scenes = TR.scenes_for(TR.heldout_seeds(cfg)[:args.grids], cfg.scene_spec())
    for i, s in enumerate(scenes):
        rows = []
        for j in TR.STPR_PARTS:
            batch = M.make_batch([s], mcfg, "stpr", parts=[j])
            before, _ = M.generate(batch, pre.params, mcfg, cfg.variant)
            after, _ = M.generate(batch, res.params, mcfg, cfg.variant)
            rows.append(R.hstack_panels([s.x_s, s.x_t, s.region_masks_s[j], before, after]))
        _ppm(man, out / f"pair_{i:02d}.ppm", R.vstack_rows(rows))
    for name, params in (("pretrained", pre.params), ("finetuned", res.params)):
        path = out / f"{name}.ckpt"
        M.save_checkpoint(path, params, {"variant": cfg.variant, "seed": cfg.seed})
        man.record(path)
    man.wall_clock = time.perf_counter() - t0
    man.write()
    print(res.csv(), end="")
    tgt = res.after["target_l1"] / res.before["target_l1"]
    non = res.after["nontarget_l1"] / res.before["nontarget_l1"]
    ok = tgt <= 0.9 and non <= 1.0
    print(f"{'PASS' if tgt <= 0.9 else 'FAIL'} target_l1 ratio = {tgt:.4f} (<=0.9)")
    print(f"{'PASS' if non <= 1.0 else 'FAIL'} nontarget_l1 ratio = {non:.4f} (<=1.0)")
    return EXIT_FAIL if args.strict and not ok else EXIT_OK


# ----------------------------------------------------------------------------
# visualize


def flow_to_rgb(flow, max_mag=None):
    """Hue encodes flow direction, value its magnitude (relative to ``max_mag``)."""
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim == 4:
        f = f[0]
    dy, dx = f[0], f[1]
    mag = np.hypot(dy, dx)
    scale = max_mag if max_mag else max(float(mag.max()), 1e-12)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    val = np.clip(mag / scale, 0.0, 1.0)
    rgb = [colorsys.hsv_to_rgb(h, 1.0, v) for h, v in zip(hue.ravel(), val.ravel())]
    return np.asarray(rgb).T.reshape((3,) + dy.shape)


PANELS = ("input", "flow", "warped", "occlusion", "generated", "target")


def visual_panels(scene, params, mcfg, variant):
    """The six per-scene panels, keyed by :data:`PANELS`."""
    img, _ = M.generate(M.make_batch([scene], mcfg), params, mcfg, variant)
    return {
        "input": scene.x_s[0],
        "flow": flow_to_rgb(scene.flow_gt),
        "warped": T.bilinear_sample(scene.x_s, scene.flow_gt)[0],
        "occlusion": scene.occ[0, 0],
        "generated": img[0].astype(np.float64),
        "target": scene.x_t[0],
    }


def cmd_visualize(args):
    cfg = load_config(args.config) if args.config else TR.TrainConfig()
    if args.motion:
        cfg = replace(cfg, motion=args.motion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("visualize", str(args.config or ""), args.scene_seed, str(out))
    t0 = time.perf_counter()
    mcfg = cfg.model_config()
    if args.checkpoint:
        params, meta = M.load_checkpoint(args.checkpoint)
        variant = meta.get("variant", cfg.variant)
    else:
        params = TR.train_pose_transfer(replace(cfg, steps=args.steps)).params
        variant = cfg.variant
    scene = S.gen_scene(args.scene_seed, cfg.scene_spec())
    panels = visual_panels(scene, M.cast_params(params, mcfg.dtype), mcfg, variant)
    for i, name in enumerate(PANELS):
        path = out / f"{i}_{name}.{'pgm' if name == 'occlusion' else 'ppm'}"
        (_pgm if name == "occlusion" else _ppm)(man, path, panels[name])
    _ppm(man, out / "panels.ppm", R.hstack_panels([panels[n] for n in PANELS]))
    for k, inter in enumerate(sorted(M.forward_full(scene, params, mcfg, variant)[1]["levels"],
                                     key=lambda d: d["level"])):
        for key in ("h", "h_mod"):
            a = inter[key][0].mean(axis=0)
            a = (a - a.min()) / max(float(np.ptp(a)), 1e-12)
            _pgm(man, out / f"level{inter['level']}_{key}.pgm", a)
    man.wall_clock = time.perf_counter() - t0
    man.write()
    print(f"wrote {len(man.artifacts)} files to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="warpnorm", description="Warped normalisation toolkit.")
    p.add_argument("--version", action="version", version=f"warpnorm {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gradcheck", help="check hand-written adjoints by central differences")
    g.add_argument("--ops", action="append", help="comma-separated op names (default: all)")
    g.add_argument("--seeds", type=int, default=20, help="number of random draws per op")
    g.add_argument("--tol", type=float, default=1e-4, help="max per-coordinate relative error")
    g.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    g.add_argument("--out", help="optional output directory for the run manifest")
    g.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (("ablate", cmd_ablate, "compare SAN / SAWS / SAWN"),
                                 ("stpr", cmd_stpr, "pretrain then finetune with part replacement")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--config", required=True, help="key=value config file")
        a.add_argument("--out", required=True, help="output directory")
        a.add_argument("--grids", type=int, default=4, help="number of held-out scenes to render")
        a.add_argument("--strict", action="store_true", help="exit 1 when a check fails")
        a.set_defaults(func=func)

    v = sub.add_parser("visualize", help="dump flow, warp, occlusion and output panels")
    v.add_argument("--scene-seed", type=int, required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config", help="key=value config file (defaults if omitted)")
    v.add_argument("--checkpoint", help="trained parameters; otherwise a short run is trained")
    v.add_argument("--steps", type=int, default=100, help="training steps without --checkpoint")
    v.add_argument("--motion", help="motion override, e.g. identity or translate(2,3)")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=thread_limit()):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
