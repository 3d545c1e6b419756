"""Command-line entry points: datagen, train, predict, eval, render.

Exit codes: 0 success, 1 runtime failure, 2 usage error. `--config` accepts
a JSON RunConfig whose values override individual flags. The AID_THREADS
environment variable caps evaluation worker parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data, evaluate, gifenc, report
from .checkpoint import load_model
from .config import RunConfig
from .nn import ConfigError
from .training import train_phase

ABLATION_FLAGS = ("no_mc", "no_de", "no_me", "no_llava", "no_adapter",
                  "no_sa", "no_sta", "no_lta", "no_ta")


def _build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then explicit CLI flags, then --config file values."""
    doc = RunConfig().to_dict()
    names = set(doc)
    for key, value in vars(args).items():
        if key in names and value is not None:
            doc[key] = value
    config_path = getattr(args, "config", None)
    if config_path:
        doc.update(json.loads(Path(config_path).read_text()))
    return RunConfig.from_dict(doc)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig; overrides other flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--p-drop-t", dest="p_drop_t", type=float)
    p.add_argument("--p-drop-v", dest="p_drop_v", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag,
                       action="store_const", const=True)


def cmd_datagen(args) -> int:
    manifest = data.generate_corpus(args.out, num=args.num, frames=args.frames,
                                    k=args.k, seed=args.seed)
    train_n = len(manifest.split_items("train"))
    val_n = len(manifest.split_items("val"))
    print(f"wrote {len(manifest.items)} items ({train_n} train / {val_n} val) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _build_config(args)
    if args.steps is not None:
        config = dataclasses.replace(config, train_steps=args.steps)
    stats = train_phase(config, args.corpus, args.phase, args.out,
                        base_ckpt=args.base, quiet=args.quiet)
    smooth = stats.smoothed()
    print(f"{args.phase} training done: {len(stats.losses)} steps, "
          f"smoothed loss {smooth[0]:.4f} -> {smooth[-1]:.4f}, saved {stats.checkpoint}")
    if args.loss_curve:
        report.training_curve(stats.losses, args.loss_curve, title=f"{args.phase} loss")
        print(f"loss curve: {args.loss_curve}")
    return 0


def cmd_predict(args) -> int:
    model, ckpt = load_model(args.ckpt)
    if ckpt.phase != "finetune" and not args.unconditional:
        raise ConfigError(
            f"{args.ckpt} is a base checkpoint; pass --unconditional to sample from it"
        )
    video = data.load_video(args.input)
    k = args.k if args.k is not None else ckpt.config.ref_frames
    instruction = None if args.unconditional else args.instruction
    if instruction is None and not args.unconditional:
        raise ConfigError("predict needs --instruction (or --unconditional)")
    if instruction is not None:
        data.parse_instruction(instruction)  # reject text outside the grammar early
    rng = np.random.default_rng(args.seed)
    scales = ckpt.config.guidance(args.s_v, args.s_t)
    pred = model.predict(video[:k], instruction, rng, scales=scales, steps=args.steps)
    out = Path(args.out)
    data.save_video(pred, out.with_suffix(".aidv"))
    gifenc.write_gif(out.with_suffix(".gif"), pred, fps=args.fps)
    rows = {"truth": video, "prediction": pred} if video.shape[0] == pred.shape[0] else {"prediction": pred}
    report.frame_grid(rows, out.with_suffix(".png"), title=instruction or "unconditional", k=k)
    print(f"wrote {out.with_suffix('.aidv')}, {out.with_suffix('.gif')}, {out.with_suffix('.png')}")
    return 0


def cmd_eval(args) -> int:
    model, ckpt = load_model(args.ckpt)
    rep, results = evaluate.evaluate_model(
        model, args.corpus, ablation=args.ablation, seed=args.seed,
        steps=args.steps, s_v=args.s_v, s_t=args.s_t, subset=args.subset,
        threads=args.threads,
    )
    path = evaluate.write_report(rep, results, args.out)
    print(f"accuracy={rep.instruction_accuracy:.3f} cond_psnr={rep.cond_psnr:.2f}dB "
          f"pred_psnr={rep.pred_psnr:.2f}dB trainable={rep.trainable_param_fraction:.3f} "
          f"-> {path}")
    return 0


def cmd_render(args) -> int:
    video = data.load_video(args.input)
    out = Path(args.out)
    gifenc.write_gif(out.with_suffix(".gif"), video, fps=args.fps)
    report.frame_strip(video, out.with_suffix(".png"))
    print(f"wrote {out.with_suffix('.gif')}, {out.with_suffix('.png')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvp",
        description="Text-guided video prediction on synthetic moving shapes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=512)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train the base model or finetune the added parts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--phase", choices=("base", "finetune"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="base checkpoint (required for finetune)")
    p.add_argument("--steps", type=int)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--loss-curve", help="optional PNG path for the loss curve")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict future frames from reference frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="AIDV video supplying the reference frames")
    p.add_argument("--instruction")
    p.add_argument("--k", type=int, help="reference frame count (default: checkpoint setting)")
    p.add_argument("--s-v", dest="s_v", type=float)
    p.add_argument("--s-t", dest="s_t", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=float, default=4.0)
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--out", required=True, help="output prefix (.aidv/.gif/.png)")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=evaluate.ABLATIONS, default="none")
    p.add_argument("--subset", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s-v", dest="s_v", type=float)
    p.add_argument("--s-t", dest="s_t", type=float)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="render an AIDV video to GIF and PNG strip")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=4.0)
    p.set_defaults(fn=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
