"""``hbgs`` command line: synth | train | register | render | eval | verify.

Exit codes: 0 success, 1 user error, 2 divergence, 3 verification failure.
Every command that writes a directory also writes the resolved config there
as ``config.json``; wall-clock timings go to a separate ``timing.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .config import ConfigError, RunConfig, load_config
from .errors import CheckpointError, DivergenceError, HbgsError

EXIT_OK, EXIT_USER, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("hbgs")


def _set_threads():
    n = os.environ.get("HBGS_THREADS")
    if not n:
        return
    import numba
    import torch

    try:
        k = max(1, int(n))
    except ValueError:
        raise ConfigError(f"HBGS_THREADS must be an integer, got {n!r}") from None
    torch.set_num_threads(k)
    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("iterations", "reg_iterations"), ("init", "reg_init"),
                      ("train_poses", "train_poses")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if getattr(args, "freeze_poses", False):
        overrides.append("optimize_poses=false")
    if getattr(args, "no_image_features", False):
        overrides.append("use_image_features=false")
    return load_config(args.config, overrides)


def _out_dir(path, cfg: RunConfig | None):
    os.makedirs(path, exist_ok=True)
    if cfg is not None:
        with open(os.path.join(path, "config.json"), "w") as fh:
            fh.write(cfg.dumps())
    return path


def _timing(path, **seconds):
    from .pipeline import write_json

    write_json(os.path.join(path, "timing.json"), {k: round(v, 3) for k, v in seconds.items()})


# commands --------------------------------------------------------------------------

def cmd_synth(args):
    from .pipeline import synthesize
    from .synthetic import SyntheticSceneSpec

    spec = SyntheticSceneSpec(seed=args.seed, n_points=args.points, n_cameras=args.cameras,
                              scene_extent=args.extent, pose_noise_rot_deg=args.rot_noise,
                              pose_noise_trans=args.trans_noise, width=args.width, height=args.height,
                              test_every=args.test_every)
    synthesize(spec, args.out)
    print(f"wrote {spec.n_cameras} views to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .checkpoint import save_state
    from .pipeline import Scene, render_views, train, write_json
    from .report import plot_training

    cfg = _config(args)
    scene = Scene(args.scene, cfg.train_poses, cfg.test_every)
    out = _out_dir(args.out, cfg)
    t0 = time.time()
    with open(os.path.join(out, "log.jsonl"), "w") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["step"] % 100 == 0:
                log.info("step %d level %d total %.5f", rec["step"], rec["level"], rec["total"])

        try:
            state = train(scene, cfg, on_step)
        except DivergenceError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DIVERGED
    elapsed = time.time() - t0
    save_state(state, os.path.join(out, "checkpoint.hbgs"))
    b = scene.bundle
    tr = b.train_indices()
    render_views(state, b, tr, state.camera_poses(), os.path.join(out, "renders"))
    hist = state.history
    summary = dict(steps=state.step, n_anchors=len(state.anchors), initial_total=hist[0]["total"],
                   final_total=hist[-1]["total"], model_hash=state.model_hash(),
                   train_views=[b.names[i] for i in tr], poses=state.poses.tolist())
    if "rot_err_deg" in hist[-1]:
        summary.update(final_rot_err_deg=hist[-1]["rot_err_deg"], final_trans_err=hist[-1]["trans_err"])
    write_json(os.path.join(out, "summary.json"), summary)
    plot_training(hist, os.path.join(out, "figures", "training.png"))
    _timing(out, train=elapsed)
    print(json.dumps(dict(steps=state.step, initial_total=summary["initial_total"],
                          final_total=summary["final_total"])))
    return EXIT_OK


def cmd_register(args):
    from .checkpoint import load_state
    from .pipeline import Scene, register_views, registration_summary, write_json
    from .report import plot_registration

    cfg = _config(args)
    state = load_state(args.checkpoint)
    scene = Scene(args.scene, "noisy", cfg.test_every)
    out = _out_dir(args.out, cfg)
    before = state.model_hash()
    t0 = time.time()
    rows = register_views(state, scene, cfg)
    elapsed = time.time() - t0
    after = state.model_hash()
    for r in rows:
        if r["failed"]:
            print(f"warning: registration diverged for {r['name']}", file=sys.stderr)
    result = dict(iterations=cfg.reg_iterations, views=rows, summary=registration_summary(rows),
                  model_hash_before=before, model_hash_after=after)
    write_json(os.path.join(out, "registered.json"), result)
    if rows and "rot_err_before_deg" in rows[0]:
        plot_registration(rows, os.path.join(out, "figures", "registration.png"))
    _timing(out, register=elapsed)
    print(json.dumps(result["summary"], sort_keys=True))
    return EXIT_OK


def _eval_poses(args, scene, indices):
    from .geometry import CameraPose
    from .pipeline import read_json

    if args.poses is None:
        which = args.pose_set or ("gt" if scene.gt_poses is not None else "noisy")
        return [scene.poses(which)[i] for i in indices]
    by_name = {v["name"]: CameraPose.from_vector(v["pose"]) for v in read_json(args.poses)["views"]}
    missing = [scene.bundle.names[i] for i in indices if scene.bundle.names[i] not in by_name]
    if missing:
        raise ConfigError(f"poses file has no entry for {', '.join(missing)}")
    return [by_name[scene.bundle.names[i]] for i in indices]


def _view_indices(bundle, which):
    return {"train": bundle.train_indices(), "test": bundle.test_indices(), "all": list(range(len(bundle)))}[which]


def cmd_render(args):
    from .checkpoint import load_state
    from .pipeline import Scene, render_views

    cfg = _config(args)
    state = load_state(args.checkpoint)
    scene = Scene(args.scene, "noisy", cfg.test_every)
    idx = _view_indices(scene.bundle, args.views)
    render_views(state, scene.bundle, idx, _eval_poses(args, scene, idx), args.out)
    print(f"rendered {len(idx)} views to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    from .pipeline import Scene, evaluate, run_ablation, write_json
    from .report import plot_ablation

    cfg = _config(args)
    scene = Scene(args.scene, cfg.train_poses, cfg.test_every)
    out = _out_dir(args.out, cfg)
    if args.ablation:
        t0 = time.time()
        rows = run_ablation(scene, cfg, on_row=lambda name, r: log.info("%s seed %d psnr %s", name, r["seed"], r["psnr"]))
        write_json(os.path.join(out, "ablation.json"), dict(rows=rows))
        plot_ablation(rows, os.path.join(out, "figures", "ablation.png"))
        _timing(out, ablation=time.time() - t0)
        for r in rows:
            print(f"{r['name']}: psnr {r['psnr']:.2f} ssim {r['ssim']:.3f} lpips n/a")
        return EXIT_OK
    idx = _view_indices(scene.bundle, args.views)
    if args.images is not None:
        from .metrics import MetricReport
        from .scene_io import read_png

        report = MetricReport()
        for i in idx:
            name = scene.bundle.names[i]
            report.add(name, read_png(os.path.join(args.images, name)), scene.bundle.images[i])
    elif args.checkpoint is not None:
        from .checkpoint import load_state

        state = load_state(args.checkpoint)
        report = evaluate(state, scene.bundle, idx, _eval_poses(args, scene, idx))
    else:
        raise ConfigError("eval needs --checkpoint or --images unless --ablation is given")
    write_json(os.path.join(out, "metrics.json"), report.to_dict())
    print(json.dumps(report.to_dict()["mean"]))
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_suites

    checks = run_suites(args.suite, seed=args.seed or 0)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hbgs", description="Hybrid bundle-adjusting Gaussian splatting at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic scene (ground-truth and noisy poses)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--points", type=int, default=500)
    sp.add_argument("--cameras", type=int, default=12)
    sp.add_argument("--extent", type=float, default=2.0)
    sp.add_argument("--rot-noise", type=float, default=5.0, help="pose rotation noise [deg]")
    sp.add_argument("--trans-noise", type=float, default=0.02, help="pose translation noise [fraction of extent]")
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--test-every", type=int, default=8)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="jointly optimize the scene and training poses")
    sp.add_argument("scene")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--freeze-poses", action="store_true")
    sp.add_argument("--no-image-features", action="store_true")
    sp.add_argument("--train-poses", choices=("noisy", "gt"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("register", help="register held-out views against a frozen checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("scene")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--init", choices=("noisy", "gt"))
    sp.set_defaults(func=cmd_register)

    for name, func, helptext in (("render", cmd_render, "render views of a checkpoint to PNG"),
                                 ("eval", cmd_eval, "PSNR/SSIM report, or the three-row ablation")):
        sp = sub.add_parser(name, help=helptext)
        if name == "render":
            sp.add_argument("checkpoint")
        else:
            sp.add_argument("--checkpoint")
            sp.add_argument("--images", help="directory of PNGs to score instead of rendering a checkpoint")
            sp.add_argument("--ablation", action="store_true")
            sp.add_argument("--steps", type=int)
        sp.add_argument("scene")
        sp.add_argument("--out", required=True)
        common(sp)
        sp.add_argument("--views", choices=("train", "test", "all"), default="test")
        sp.add_argument("--poses", help="registered.json whose poses replace the scene's")
        sp.add_argument("--pose-set", choices=("noisy", "gt"),
                        help="scene pose set used when --poses is absent (default: gt when known)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="gradient and oracle suites")
    sp.add_argument("suite", nargs="*", choices=("gradients", "matching", "metrics", "all"), default=["all"])
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _set_threads()
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, HbgsError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
