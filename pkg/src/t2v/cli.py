"""``t2v`` command line: train, sample, eval, defaults.

Exit codes: 0 success, 1 an eval check failed, 2 usage/config/input error,
3 runtime abort (e.g. non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config, render_defaults
from .training import (TrainingAborted, build_components, loss_ratio, obtain_codec, read_loss_trace, restore,
                       train_config_from, train_loop)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("t2v")


class UsageError(Exception):
    pass


def emit(rows, out=None) -> None:
    """Print ``key<TAB>value`` rows between marker lines; mirror them to ``out`` if given."""
    lines = [f"{k}\t{v}" for k, v in rows]
    print("--- begin report ---")
    for line in lines:
        print(line)
    print("--- end report ---")
    if out is not None:
        Path(out).write_text("key\tvalue\n" + "".join(l + "\n" for l in lines), encoding="utf-8")


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    from . import plotting

    try:
        config = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config not found: {args.config}") from None
    if args.out:
        config = config.with_overrides(**{"run.out_dir": args.out})
    out = Path(config["run.out_dir"])
    tcfg = train_config_from(config)
    codec_report: dict = {}
    if args.resume:
        comp, opt, start = restore(_load_ckpt(args.resume))
        if comp.config.hash() != config.hash():
            raise UsageError("resume checkpoint was produced with a different config")
        history = [r for r in read_loss_trace(out / "loss.csv") if r[0] < start] if (out / "loss.csv").exists() else []
    else:
        comp = build_components(config, codec=obtain_codec(config, codec_report))
        opt, start, history = None, 0, []
    log.info("training %d steps into %s", tcfg.total_steps, out)
    ck, rows = train_loop(comp, tcfg, out_dir=out, opt=opt, start_step=start, history=history)
    report = [("steps", len(rows)), ("checkpoint", out / "final.ckpt"), ("loss_trace", out / "loss.csv"),
              ("config_hash", config.hash()), ("codec_fingerprint", comp.codec.fingerprint())]
    for k in ("psnr_init", "psnr_final"):
        if k in codec_report:
            report.append((f"codec_{k}", f"{codec_report[k]:.3f}"))
    if len(rows) >= 200:
        report.append(("loss_ratio_last100_first100", f"{loss_ratio(rows):.4f}"))
    if rows:
        report.append(("loss_figure", plotting.loss_curve(rows, out / "loss.png")))
    emit(report)
    return EXIT_OK


def cmd_sample(args) -> int:
    from . import plotting
    from .pipeline import export_frames, generate

    ck = _load_ckpt(args.ckpt)
    comp, _, _ = restore(ck, with_optimizer=False)
    cfg = comp.config
    overrides = {}
    if args.steps is not None:
        overrides["sample.steps"] = args.steps
    if args.guidance is not None:
        overrides["sample.guidance"] = args.guidance
    if args.eta is not None:
        overrides["sample.eta"] = args.eta
    effective = cfg.with_overrides(**overrides)
    frames = cfg["data.frames"] if args.frames is None else args.frames
    if frames < 1:
        raise UsageError("--frames must be >= 1")
    try:
        clip = generate(comp, args.prompt, args.seed, frames, effective["sample.steps"],
                        effective["sample.guidance"], effective["sample.eta"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    paths = export_frames(clip, out)
    manifest = {
        "prompt": args.prompt,
        "seed": args.seed,
        "frames": frames,
        "steps": effective["sample.steps"],
        "guidance": effective["sample.guidance"],
        "eta": effective["sample.eta"],
        "config_hash": effective.hash(),
        "files": [p.name for p in paths],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    strip = plotting.filmstrip(clip, out / "filmstrip.png", title=args.prompt)
    emit([("frames", len(paths)), ("out", out), ("manifest", out / "manifest.json"), ("filmstrip", strip),
          ("config_hash", manifest["config_hash"])])
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation, plotting

    ck = _load_ckpt(args.ckpt)
    comp, _, _ = restore(ck, with_optimizer=False)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    figures = []
    if args.suite == "invariants":
        rep = evaluation.invariants(comp)
    elif args.suite == "conditioning":
        rep = evaluation.conditioning(comp)
        if out is not None:
            figures.append(plotting.paired_bars(
                ["true", "shuffled"], [rep.metrics["loss_true_captions"], rep.metrics["loss_shuffled_captions"]],
                out / "conditioning.png", "held-out noise MSE", "captions"))
    else:
        steps = args.steps or comp.config["sample.steps"]
        rep, clips = evaluation.smoothness(comp, steps=steps, guidance=comp.config["sample.guidance"])
        if out is not None:
            figures.append(plotting.paired_bars(
                ["sampled", "shuffled"], [rep.metrics["inter_frame_mse_sampled"], rep.metrics["inter_frame_mse_shuffled"]],
                out / "smoothness.png", "mean inter-frame MSE", "frame order"))
            figures.append(plotting.filmstrips(clips, out / "samples.png"))
    rows = [("suite", rep.suite)] + rep.rows() + [("figure", f) for f in figures]
    rows.append(("result", "pass" if rep.passed else "FAIL"))
    emit(rows, out / f"{rep.suite}.tsv" if out is not None else None)
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def cmd_defaults(args) -> int:
    sys.stdout.write(render_defaults())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2v", description="Desk-scale text-to-video latent diffusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override run.out_dir")
    t.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a clip for a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--eta", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="run an evaluation suite on a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--suite", required=True, choices=("invariants", "conditioning", "smoothness"))
    e.add_argument("--out", help="directory for the report table and figures")
    e.add_argument("--steps", type=int, help="DDIM steps for the smoothness suite")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("defaults", help="print every config key with its default")
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"t2v: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"t2v: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CheckpointError as exc:
        print(f"t2v: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"t2v: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
