"""Command-line entry point: dataset generation, training, rollouts,
evaluation, serving, and projection debug dumps."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

# honored only if set before the numeric libraries initialize their pools
_threads = os.environ.get("VOXELWORLD_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import numpy as np

from . import evaluate, flow, pipeline, worldsim
from .config import Config, ConfigError, load_config
from .geometry import CameraState
from .models import load_model, VoxelCodec
from .pipeline import (
    CODEC_SEED,
    EpisodeInit,
    ModelBundle,
    PipelineError,
    RolloutConfig,
    TrainConfig,
    checkpoint_hash,
)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed override")


def _config(args) -> Config:
    return load_config(args.config, args.set)


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rollout_config(cfg: Config, seed: int) -> RolloutConfig:
    return RolloutConfig(
        model=cfg.model_config(),
        flow_steps=cfg["flow.steps"], flow_eta=cfg["flow.eta"],
        tau_ctx_world=cfg["flow.tau_ctx_world"],
        tau_ctx_pixel=cfg["flow.tau_ctx_pixel"],
        seed=seed,
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    seed = args.seed if args.seed is not None else cfg["data.seed"]
    dcfg = worldsim.DatasetConfig(
        out_dir=str(out),
        n_traj=args.n_traj if args.n_traj is not None else cfg["data.n_traj"],
        n_steps=args.steps if args.steps is not None else cfg["data.steps"],
        seed=seed,
        dims=cfg["data.dims"],
        frame_side=cfg["data.frame_side"],
        h=cfg["data.h"], w=cfg["data.w"], fov=cfg["data.fov"],
        world_seed=cfg["data.world_seed"],
    )
    worldsim.collect_dataset(dcfg)
    digest = worldsim.dataset_hash(out)
    (out / "gen.json").write_text(json.dumps(
        {"dataset_hash": digest, "config_hash": cfg.hash(), "seed": seed},
        indent=1), encoding="utf-8")
    print(f"dataset {out} hash {digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    dataset = args.data or cfg["train.dataset"]
    if not dataset:
        raise ConfigError("no dataset given (use --data or train.dataset)")
    tcfg = TrainConfig(
        component=args.component,
        dataset=dataset,
        batch_size=cfg["train.batch_size"],
        steps=args.steps if args.steps is not None else cfg["train.steps"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        seed=args.seed if args.seed is not None else cfg["train.seed"],
        p0_drop=cfg["train.p0_drop"],
        cross_aug=cfg["train.cross_aug"],
        ctx_noise_max=cfg["train.ctx_noise_max"],
        drop_w2d=cfg["train.drop_w2d"],
        model=cfg.model_config(),
    )
    pipeline.train(tcfg, out)
    (out / "run.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "component": args.component,
         "checkpoint_hash": checkpoint_hash(out)}, indent=1), encoding="utf-8")
    print(f"trained {args.component} -> {out}")
    return 0


def _load_bundle(args, cfg: Config, rcfg: RolloutConfig) -> ModelBundle:
    if args.oracle:
        return evaluate.build_oracles(cfg["rollout.world_seed"], rcfg.model,
                                      cfg["data.dims"])
    missing = [name for name, path in
               (("world", args.checkpoint_world),
                ("camera", args.checkpoint_camera),
                ("pixel", args.checkpoint_pixel)) if not path]
    if missing:
        raise PipelineError(
            f"missing checkpoints for: {', '.join(missing)} (or use --oracle)")
    codec = VoxelCodec(rcfg.model.m, seed=CODEC_SEED)
    world = load_model(args.checkpoint_world)
    camera = load_model(args.checkpoint_camera, codec)
    pixel = load_model(args.checkpoint_pixel)
    return ModelBundle.learned(world, camera, pixel, rcfg)


def _episode_init(args, cfg: Config, mcfg) -> EpisodeInit:
    world_seed = cfg["rollout.world_seed"]
    grid = worldsim.generate_world(world_seed, cfg["data.dims"])
    agent = worldsim.spawn_agent(grid, fov=cfg["data.fov"])
    anchor = np.floor(agent.position).astype(np.int64)
    if args.init_frame:
        o0 = np.load(args.init_frame).astype(np.float32)
    else:
        o0 = worldsim.render_reference(
            grid, worldsim.camera_from_agent(agent), mcfg.h, mcfg.w)
    c0 = worldsim.frame_local_camera(agent, anchor, mcfg.S)
    w0 = None
    if args.init_world:
        if args.init_world == "truth":
            w0 = worldsim.extract_world_frame(grid, anchor, mcfg.S)
        else:
            w0 = np.load(args.init_world).astype(np.uint16)
    return EpisodeInit(o_init=o0, c_init=c0, w_init=w0)


def _load_edits(path) -> dict:
    """Edit script: [{"step": t, "cells": [[[x,y,z], class], ...]}, ...]"""
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    edits: dict = {}
    for entry in entries:
        step = int(entry["step"])
        cells = [(tuple(int(v) for v in cell), int(cls))
                 for cell, cls in entry["cells"]]
        edits.setdefault(step, []).extend(cells)
    return edits


def cmd_rollout(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    seed = args.seed if args.seed is not None else cfg["rollout.seed"]
    rcfg = _rollout_config(cfg, seed)
    bundle = _load_bundle(args, cfg, rcfg)
    init = _episode_init(args, cfg, rcfg.model)

    steps = args.steps if args.steps is not None else cfg["rollout.steps"]
    if args.actions:
        actions = np.load(args.actions).astype(np.uint8)
    else:
        actions = worldsim.run_policy(cfg["rollout.policy"],
                                      cfg["rollout.policy_seed"], steps)
    edits = _load_edits(args.edit) if args.edit else None

    buffers = pipeline.rollout(init, actions, bundle, rcfg, edits=edits)
    meta = {
        "seed": seed,
        "world_seed": cfg["rollout.world_seed"],
        "config_hash": cfg.hash(),
        "mode": "oracle" if args.oracle else "learned",
        "tau_ctx_world": rcfg.tau_ctx_world,
        "tau_ctx_pixel": rcfg.tau_ctx_pixel,
        "policy_mode": "external" if args.actions else cfg["rollout.policy"],
        "checkpoints": {} if args.oracle else {
            "world": checkpoint_hash(args.checkpoint_world),
            "camera": checkpoint_hash(args.checkpoint_camera),
            "pixel": checkpoint_hash(args.checkpoint_pixel),
        },
    }
    pipeline.save_rollout(buffers, out, meta)
    print(f"rollout {buffers.step} steps -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    roll_dir = Path(args.rollout)
    traj = worldsim.load_trajectory(roll_dir)
    meta = json.loads((roll_dir / "rollout.json").read_text(encoding="utf-8"))
    truth = worldsim.replay_trajectory(
        meta["world_seed"], traj.actions, cfg["data.dims"],
        cfg["model.S"], cfg["model.h"], cfg["model.w"], cfg["data.fov"])

    _, psnr_mean = evaluate.psnr(traj.frames, truth.frames)
    voxel_acc = evaluate.voxel_accuracy(traj.world, truth.world)
    ate = evaluate.camera_ate(traj.cameras, truth.cameras)
    try:
        revisit = evaluate.revisit_consistency(
            traj.frames, truth.cameras,
            threshold_db=cfg["eval.revisit_db"])
    except evaluate.EvalError:
        revisit = None

    report = evaluate.MetricReport(
        psnr_mean=psnr_mean, voxel_acc=voxel_acc, revisit_score=revisit,
        camera_ate=ate, episodes=1, config_hash=cfg.hash())
    per_episode = [{"episode": 0, "psnr": psnr_mean, "voxel_acc": voxel_acc,
                    "revisit": revisit, "camera_ate": ate}]
    evaluate.write_report(report, per_episode, out)
    print(f"psnr {psnr_mean:.2f} dB, voxel_acc {voxel_acc:.4f}, "
          f"revisit {revisit}, ate {ate:.4f}")
    return 0


def cmd_serve(args) -> int:
    from . import service
    cfg = _config(args)
    mode = args.mode or cfg["service.mode"]
    port = args.port if args.port is not None else cfg["service.port"]
    checkpoints = {
        "world": args.checkpoint_world,
        "camera": args.checkpoint_camera,
        "pixel": args.checkpoint_pixel,
    }
    service.run(port=port, mode=mode, cfg=cfg, checkpoints=checkpoints)
    return 0


def cmd_dump_projection(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    mcfg = cfg.model_config()
    seed = args.seed if args.seed is not None else cfg["rollout.world_seed"]
    grid = worldsim.generate_world(seed, cfg["data.dims"])
    agent = worldsim.spawn_agent(grid, fov=cfg["data.fov"])
    anchor = np.floor(agent.position).astype(np.int64)
    labels = worldsim.extract_world_frame(grid, anchor, mcfg.S)
    camera = worldsim.frame_local_camera(agent, anchor, mcfg.S)
    codec = VoxelCodec(mcfg.m, seed=CODEC_SEED)
    from .projection import FeatureGrid, project, fuse
    fg = FeatureGrid(features=codec.encode(labels), occupancy=labels != worldsim.AIR)
    stack = project(camera, fg, mcfg.h, mcfg.w, mcfg.l)
    np.savez(out / "projection.npz", features=stack.features, depth=stack.depth,
             valid=stack.valid, fused=fuse(stack), labels=labels,
             camera=camera.to_vector())
    (out / "projection.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "world_seed": seed,
         "d_far": stack.d_far}, indent=1), encoding="utf-8")
    print(f"projection dump -> {out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelworld")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a trajectory dataset")
    _add_common(p)
    p.add_argument("--n-traj", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one component")
    p.add_argument("component", choices=("world", "camera", "pixel"))
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="run an autoregressive episode")
    _add_common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--init-frame", help=".npy pixel frame for step 0")
    p.add_argument("--init-world",
                   help=".npy world frame, or 'truth' for the seed world")
    p.add_argument("--edit", help="JSON edit script")
    p.add_argument("--actions", help=".npy action sequence")
    p.add_argument("--checkpoint-world")
    p.add_argument("--checkpoint-camera")
    p.add_argument("--checkpoint-pixel")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="score a saved rollout against ground truth")
    _add_common(p)
    p.add_argument("--rollout", required=True, help="rollout directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="interactive session server")
    _add_common(p)
    p.add_argument("--port", type=int)
    p.add_argument("--mode", choices=("oracle", "learned"))
    p.add_argument("--checkpoint-world")
    p.add_argument("--checkpoint-camera")
    p.add_argument("--checkpoint-pixel")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("dump-projection", help="debug dump of one projection")
    _add_common(p)
    p.set_defaults(func=cmd_dump_projection)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PipelineError, evaluate.EvalError, worldsim.WorldError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
