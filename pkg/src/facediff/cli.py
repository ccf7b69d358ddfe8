"""Command-line entry point: ``facediff <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, keys
spelled like the long options with ``-`` or ``_``) and ``--seed``. Flags
given on the command line override the config file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint, formats, synthetic
from .conditioning import AudioFeatureSequence, resample_audio
from .denoiser import PROFILES, make_config
from .mesh_repr import FaceMeshSequence, FaceRepresentation, decompose, render, render_zero_pose
from .sampler import ReferenceSet, sample
from .training import LossWeights, TrainConfig, train_config_dict

log = logging.getLogger("facediff")


class UsageError(Exception):
    """Bad configuration; reported like an argparse error (exit 2)."""


def parse_config_file(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(args: argparse.Namespace, argv: List[str]) -> None:
    """Fill options not given on the command line from ``--config``."""
    sub: argparse.ArgumentParser = args.subparser
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    if args.config:
        given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
        for key, raw in parse_config_file(args.config).items():
            action = actions.get(key)
            if action is None or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if not any(opt in given for opt in action.option_strings):
                setattr(args, key, _convert(action, key, raw))
    for dest in args.required:
        if getattr(args, dest) is None:
            raise UsageError(f"{args.command}: {actions[dest].option_strings[0]} is required")


def _convert(action: argparse.Action, key: str, raw: str):
    if action.nargs == 0:  # store_true / store_false; the key names the dest, so no inversion
        flags = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}
        if raw.lower() not in flags:
            raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
        return flags[raw.lower()]
    try:
        value = action.type(raw) if action.type else raw
    except (TypeError, ValueError):
        raise UsageError(f"config key {key}: bad value {raw!r}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facediff", description="Speech-driven 3D face diffusion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_text, *required):
        # required options may come from --config, so argparse is not told
        # about them; _apply_config checks after merging
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value file with defaults for the options below")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(subparser=p, required=required)
        return p

    p = add("make-synthetic", "generate the procedural talking-head dataset", "out")
    p.add_argument("--out")
    for name in ("num_subjects", "utterances_per_subject", "num_frames", "num_vertices", "audio_dim", "fps", "feature_rate"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    for name in ("lip_gain", "eyelid_amplitude", "pose_amplitude"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)

    p = add("train-sync", "train and freeze the sync expert", "data", "out")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--segment-length", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--k", type=int, default=32)

    p = add("train", "train the denoiser", "data", "out")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--sync-ckpt", help="checkpoint from train-sync (trained on the fly when omitted)")
    p.add_argument("--init", help="resume from this checkpoint")
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--k", type=int, default=TrainConfig.k)
    p.add_argument("--mask-prob", type=float, default=TrainConfig.mask_prob)
    p.add_argument("--diffusion-steps", type=int, default=500)
    p.add_argument("--schedule", choices=("cosine", "linear"), default="cosine")
    p.add_argument("--max-frames", type=int, default=64)
    p.add_argument("--no-masked-conditioning", dest="masked_conditioning", action="store_false")
    p.add_argument("--no-learn-identity", dest="learn_identity", action="store_false")
    p.add_argument("--no-learn-pose", dest="learn_pose", action="store_false")
    for name, default in vars(LossWeights()).items():
        p.add_argument(f"--w-{name}", dest=f"w_{name}", type=float, default=default)
    p.add_argument("--log", help="CSV file receiving per-step losses")

    p = add("sample", "generate a face sequence for one audio track", "ckpt", "audio", "out")
    p.add_argument("--ckpt")
    p.add_argument("--audio", help="DF3A feature file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--s", type=float, default=1.0, help="guidance scale")
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--frames", type=int, help="number of mesh frames (default: audio duration * fps)")
    p.add_argument("--ref-identity", help="DF3D with one frame: identity to keep fixed")
    p.add_argument("--ref-pose", help="DF3A with Z=3: per-frame pose to keep fixed")
    p.add_argument("--ref-motion", help="DF3D: per-frame motion offsets to keep fixed")

    p = add("eval", "evaluate a checkpoint on a dataset directory", "ckpt", "data", "out")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out", help="key=value report file")
    p.add_argument("--subset-size", type=int, default=20)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--k", type=int, default=32)

    p = add("decompose", "split a posed mesh sequence into identity / motion / pose", "mesh", "pose", "data", "out")
    p.add_argument("--mesh")
    p.add_argument("--pose", help="DF3A with Z=3")
    p.add_argument("--data", help="dataset directory providing the rig")
    p.add_argument("--out")
    p.add_argument("--k", type=int, default=32)

    p = add("render", "turn identity / motion / pose files back into a mesh sequence", "identity", "motion", "pose", "data", "out")
    p.add_argument("--identity")
    p.add_argument("--motion")
    p.add_argument("--pose")
    p.add_argument("--data", help="dataset directory providing the rig")
    p.add_argument("--out")
    p.add_argument("--zero-pose", action="store_true", help="skip the head rotation")

    p = add("export-obj", "write one OBJ per frame", "mesh", "topology", "out")
    p.add_argument("--mesh")
    p.add_argument("--topology")
    p.add_argument("--out")
    p.add_argument("--prefix", default="frame")
    return parser


def write_representation(out_dir, rep: FaceRepresentation, rig, fps: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    v = rep.num_vertices
    formats.write_mesh(out / "identity.df3d", FaceMeshSequence(rep.identity.reshape(1, v, 3), fps))
    formats.write_mesh(out / "motion.df3d", FaceMeshSequence(rep.motion.reshape(-1, v, 3), fps))
    formats.write_audio(out / "pose.df3a", AudioFeatureSequence(rep.pose, fps))
    formats.write_mesh(out / "mesh.df3d", render(rep, rig, fps))


def read_representation(identity, motion, pose) -> FaceRepresentation:
    return FaceRepresentation(
        identity=read_identity(identity), motion=formats.read_mesh(motion).flat(), pose=_read_pose(pose)
    )


def _read_pose(path) -> np.ndarray:
    pose = formats.read_audio(path).features
    if pose.shape[1] != 3:
        raise ValueError(f"{path}: pose file must have Z=3, got {pose.shape[1]}")
    return pose


def cmd_make_synthetic(args) -> None:
    keys = {f for f in vars(synthetic.SyntheticConfig()) if f != "seed" and getattr(args, f, None) is not None}
    config = synthetic.SyntheticConfig(seed=args.seed, **{k: getattr(args, k) for k in keys})
    ds = synthetic.generate_synthetic(config, args.out)
    print(f"wrote {len(ds.utterances)} utterances to {args.out}")


def cmd_train_sync(args) -> None:
    from .pipeline import fit_sync_expert

    ds = synthetic.load(args.data)
    expert = fit_sync_expert(ds, k=args.k, seed=args.seed, epochs=args.epochs,
                             segment_length=args.segment_length, lr=args.lr, batch_size=args.batch_size)
    checkpoint.save(args.out, checkpoint.Checkpoint(ds.rig, expert=expert))
    print(f"saved sync expert to {args.out}")


def cmd_train(args) -> None:
    from .pipeline import fit_sync_expert, train_denoiser

    ds = synthetic.load(args.data)
    train = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                        mask_prob=args.mask_prob, k=args.k)
    weights = LossWeights(face=args.w_face, sync=args.w_sync, lip=args.w_lip, pose=args.w_pose)
    model = expert = None
    if args.init:
        prev = checkpoint.load(args.init)
        model, expert = prev.model, prev.expert
        if model is None:
            raise ValueError(f"{args.init} holds no denoiser")
        config = model.config
    else:
        config = make_config(
            args.profile, num_vertices=ds.config.num_vertices, audio_dim=ds.config.audio_dim,
            max_frames=max(args.max_frames, ds.config.num_frames), schedule_kind=args.schedule,
            diffusion_steps=args.diffusion_steps, learn_identity=args.learn_identity,
            learn_pose=args.learn_pose, masked_conditioning=args.masked_conditioning,
        )
    if args.sync_ckpt:
        expert = checkpoint.load(args.sync_ckpt).expert
        if expert is None:
            raise ValueError(f"{args.sync_ckpt} holds no sync expert")
    if expert is None and weights.sync > 0:
        log.info("training a sync expert first")
        expert = fit_sync_expert(ds, k=args.k, seed=args.seed)
    model, trainer = train_denoiser(ds, config, train, weights, expert, model, args.log)
    checkpoint.save(args.out, checkpoint.Checkpoint(
        ds.rig, model, expert, step=model.trained_steps, extra=train_config_dict(train, weights)
    ))
    last = trainer.history[-1]
    print(f"trained {train.steps} steps (total {model.trained_steps}); final loss {last['total']:.5f}; saved {args.out}")


def cmd_sample(args) -> None:
    ckpt = checkpoint.load(args.ckpt)
    if ckpt.model is None:
        raise ValueError(f"{args.ckpt} holds no denoiser")
    audio = formats.read_audio(args.audio)
    n = args.frames or max(1, int(round(audio.duration * args.fps)))
    feats = resample_audio(audio, n, args.fps)
    refs = ReferenceSet(
        identity=read_identity(args.ref_identity) if args.ref_identity else None,
        pose=_read_pose(args.ref_pose) if args.ref_pose else None,
        motion=formats.read_mesh(args.ref_motion).flat() if args.ref_motion else None,
    )
    rep = sample(ckpt.model, feats, refs, args.s, ckpt.schedule, seed=args.seed)
    write_representation(args.out, rep, ckpt.rig, args.fps)
    print(f"wrote {n} frames to {args.out}")


def read_identity(path) -> np.ndarray:
    ident = formats.read_mesh(path)
    if ident.num_frames != 1:
        raise ValueError(f"{path}: identity file must hold exactly one frame")
    return ident.flat()[0]


def cmd_eval(args) -> None:
    from .pipeline import evaluate

    ckpt = checkpoint.load(args.ckpt)
    if ckpt.model is None:
        raise ValueError(f"{args.ckpt} holds no denoiser")
    ds = synthetic.load(args.data)
    report = evaluate(ckpt.model, ds.utterances, ds.rig, args.subset_size, args.s, args.seed, args.k)
    Path(args.out).write_text(report.to_kv())
    print(report.to_table(), end="")


def cmd_decompose(args) -> None:
    rig = synthetic.load_rig(args.data)
    mesh = formats.read_mesh(args.mesh)
    rep = decompose(mesh, _read_pose(args.pose), rig, k=min(args.k, mesh.num_frames), seed=args.seed)
    write_representation(args.out, rep, rig, mesh.fps)
    print(f"wrote identity / motion / pose to {args.out}")


def cmd_render(args) -> None:
    rig = synthetic.load_rig(args.data)
    motion = formats.read_mesh(args.motion)
    rep = read_representation(args.identity, args.motion, args.pose)
    seq = render_zero_pose(rep, motion.fps) if args.zero_pose else render(rep, rig, motion.fps)
    formats.write_mesh(args.out, seq)
    print(f"wrote {seq.num_frames} frames to {args.out}")


def cmd_export_obj(args) -> None:
    paths = formats.export_obj(formats.read_mesh(args.mesh), formats.read_topology(args.topology), args.out, args.prefix)
    print(f"wrote {len(paths)} OBJ files to {args.out}")


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train-sync": cmd_train_sync,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "decompose": cmd_decompose,
    "render": cmd_render,
    "export-obj": cmd_export_obj,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("facediff: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args, argv)
    except (UsageError, OSError) as exc:
        args.subparser.print_usage(sys.stderr)
        print(f"facediff: error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError, IndexError, KeyError, FloatingPointError) as exc:
        print(f"facediff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
