"""Interactive session server.

One WebSocket connection to /session is one generation episode. All messages
are UTF-8 JSON discriminated by "type":

  client -> server
    init     {camera: [10 floats], mode?, seed?, frame?: b64 RGB u8,
              world?: b64 u16 labels}
    action   {keys: [names], mouse: [dyaw_bin, dpitch_bin]}
    edit     {cells: [{pos: [x,y,z], class: id}]}
    snapshot {axis?: 0|1|2}

  server -> client
    frame         {step, image: b64 RGB u8, camera: [10 floats]}
    world_slice   {axis, index, labels: b64 u16}
    snapshot_done {camera: [10 floats]}
    error         {code, message}

Frames are row-major RGB, quantized from f32 with round-half-up. Every
action yields exactly one frame or error; an action sent while a step is in
flight is rejected with code "busy", never queued.
"""

from __future__ import annotations

import asyncio
import base64
import json

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import evaluate, pipeline, worldsim
from .config import Config
from .geometry import CameraState, GeometryError
from .models import VoxelCodec, load_model
from .pipeline import (
    CODEC_SEED,
    EpisodeInit,
    ModelBundle,
    PipelineError,
    RolloutBuffers,
    RolloutConfig,
)

KEY_NAMES = ("forward", "back", "left", "right", "jump")


class ServiceError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# payload codecs


def encode_frame(frame: np.ndarray) -> str:
    """f32 [0,1] RGB -> row-major u8 base64, rounding half-up."""
    q = np.floor(np.asarray(frame, dtype=np.float64) * 255.0 + 0.5)
    return base64.b64encode(np.clip(q, 0, 255).astype(np.uint8).tobytes()).decode()


def decode_frame(payload: str, h: int, w: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(payload), dtype=np.uint8)
    if raw.size != h * w * 3:
        raise ServiceError("bad-init", f"frame payload size {raw.size} != {h * w * 3}")
    return (raw.reshape(h, w, 3).astype(np.float32) / 255.0)


def encode_labels(labels: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(labels, dtype="<u2").tobytes()).decode()


def decode_world(payload: str, S: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(payload), dtype="<u2")
    if raw.size != S ** 3:
        raise ServiceError("bad-init", f"world payload size {raw.size} != {S ** 3}")
    labels = raw.reshape(S, S, S).astype(np.uint16)
    if labels.max(initial=0) >= worldsim.PALETTE_SIZE:
        raise ServiceError("bad-init", "world payload has out-of-palette labels")
    return labels


def action_from_msg(msg: dict) -> np.ndarray:
    keys = msg.get("keys", [])
    if not isinstance(keys, list):
        raise ServiceError("bad-action", "keys must be a list")
    flags = {}
    for key in keys:
        if key not in KEY_NAMES:
            raise ServiceError("bad-action", f"unknown key: {key}")
        flags[key] = True
    mouse = msg.get("mouse", [4, 4])
    if (not isinstance(mouse, (list, tuple)) or len(mouse) != 2
            or not all(isinstance(b, int) and 0 <= b <= 8 for b in mouse)):
        raise ServiceError("bad-action", "mouse must be two bin indices in 0..8")
    return worldsim.make_action(yaw_bin=mouse[0], pitch_bin=mouse[1], **flags)


# --------------------------------------------------------------------------
# session


class Session:
    def __init__(self, server: "Server", msg: dict):
        mode = msg.get("mode", server.mode)
        if mode not in ("oracle", "learned"):
            raise ServiceError("bad-init", f"unknown mode: {mode}")
        if mode == "learned" and server.learned_models is None:
            raise ServiceError("bad-init", "server has no checkpoints loaded")
        self.mode = mode
        mc = server.mcfg

        camera = msg.get("camera")
        if (not isinstance(camera, list) or len(camera) != 10
                or not all(isinstance(v, (int, float)) for v in camera)):
            raise ServiceError("bad-init", "camera must be 10 floats")
        try:
            c_init = CameraState.from_vector(np.asarray(camera, dtype=np.float32))
        except GeometryError as exc:
            raise ServiceError("bad-init", str(exc))

        seed = int(msg.get("seed", 0))
        self.rcfg = RolloutConfig(
            model=mc,
            flow_steps=server.cfg["flow.steps"], flow_eta=server.cfg["flow.eta"],
            tau_ctx_world=server.cfg["flow.tau_ctx_world"],
            tau_ctx_pixel=server.cfg["flow.tau_ctx_pixel"],
            seed=seed,
        )
        if mode == "oracle":
            self.bundle = evaluate.build_oracles(
                server.cfg["rollout.world_seed"], mc, server.cfg["data.dims"])
        else:
            world, cam, pix = server.learned_models
            self.bundle = ModelBundle.learned(world, cam, pix, self.rcfg)

        w_init = None
        if msg.get("world") is not None:
            w_init = decode_world(msg["world"], mc.S)
        if msg.get("frame") is not None:
            o_init = decode_frame(msg["frame"], mc.h, mc.w)
        elif mode == "oracle":
            o_init = None  # filled from ground truth below
        else:
            raise ServiceError("bad-init", "learned mode requires an init frame")

        init = EpisodeInit(o_init=o_init, c_init=c_init, w_init=w_init)
        if mode == "oracle":
            truth = evaluate.oracle_init(self.bundle, with_world=False)
            if init.o_init is None:
                init.o_init = truth.o_init
            init.c_init = truth.c_init  # oracle kinematics own the camera
        self.rng = np.random.default_rng(np.uint64(seed))
        if hasattr(self.bundle.world, "begin_episode"):
            self.bundle.world.begin_episode(init)
        try:
            self.buffers = pipeline.rollout_init(init, self.bundle, self.rcfg, self.rng)
        except PipelineError as exc:
            raise ServiceError("bad-init", str(exc))
        self.busy = False

    def frame_msg(self) -> dict:
        return {
            "type": "frame",
            "step": self.buffers.step - 1,
            "image": encode_frame(self.buffers.frames[-1]),
            "camera": [float(v) for v in self.buffers.cameras[-1].to_vector()],
        }

    def step(self, action: np.ndarray):
        pipeline.rollout_step(self.buffers, action, self.bundle, self.rcfg, self.rng)

    def edit(self, msg: dict):
        cells = msg.get("cells")
        if not isinstance(cells, list):
            raise ServiceError("bad-edit", "cells must be a list")
        edits = []
        for cell in cells:
            try:
                pos = tuple(int(v) for v in cell["pos"])
                cls = int(cell["class"])
            except (KeyError, TypeError, ValueError):
                raise ServiceError("bad-edit", f"malformed edit cell: {cell}")
            edits.append((pos, cls))
        if not edits:
            return
        try:
            pipeline.edit_world(self.buffers, edits, self.bundle, self.rcfg)
        except PipelineError as exc:
            raise ServiceError("bad-edit", str(exc))
        self._regen_frame()

    def _regen_frame(self):
        """Re-render the current step's observation from the edited state."""
        b = self.buffers
        trimmed = RolloutBuffers(
            actions=b.actions[:-1], cameras=b.cameras[:-1], frames=b.frames[:-1],
            frame_latents=b.frame_latents[:-1], worlds=b.worlds[:-1],
            world_latents=b.world_latents[:-1], w2d=b.w2d[:-1])
        pctx = pipeline._pixel_ctx(trimmed, b.w2d[-1], b.actions[-1],
                                   self.rcfg, self.rng)
        o_lat = self.bundle.pixel.generate_pixel(pctx, b.cameras[-1], self.rng)
        b.frame_latents[-1] = np.asarray(o_lat, dtype=np.float32)
        b.frames[-1] = self.bundle.pixel_codec.decode(o_lat)

    def slices(self, axis: int):
        labels = self.buffers.worlds[-1]
        S = labels.shape[0]
        for index in range(S):
            plane = np.take(labels, index, axis=axis)
            yield {"type": "world_slice", "axis": axis, "index": index,
                   "labels": encode_labels(plane)}


class Server:
    def __init__(self, mode: str, cfg: Config, checkpoints: dict | None = None):
        self.mode = mode
        self.cfg = cfg
        self.mcfg = cfg.model_config()
        self.learned_models = None
        checkpoints = checkpoints or {}
        if all(checkpoints.get(k) for k in ("world", "camera", "pixel")):
            codec = VoxelCodec(self.mcfg.m, seed=CODEC_SEED)
            self.learned_models = (
                load_model(checkpoints["world"]),
                load_model(checkpoints["camera"], codec),
                load_model(checkpoints["pixel"]),
            )
        if mode == "learned" and self.learned_models is None:
            raise ServiceError("bad-init", "learned mode requires all checkpoints")


def create_app(mode: str = "oracle", cfg: Config | None = None,
               checkpoints: dict | None = None) -> FastAPI:
    server = Server(mode, cfg or Config(), checkpoints)
    app = FastAPI()

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        session: Session | None = None

        async def send(payload: dict):
            await ws.send_text(json.dumps(payload))

        async def send_error(code: str, message: str):
            await send({"type": "error", "code": code, "message": message})

        # messages are read while a step runs so a mid-step action can be
        # rejected with "busy" instead of silently queueing
        recv_task = asyncio.ensure_future(ws.receive_text())
        step_task: asyncio.Task | None = None

        async def handle(msg: dict):
            nonlocal session, step_task
            mtype = msg.get("type")

            if mtype == "init":
                if session is not None:
                    await send_error("bad-init", "session already initialised")
                    return
                try:
                    session = await asyncio.to_thread(Session, server, msg)
                except ServiceError as exc:
                    await send_error(exc.code, str(exc))
                    return
                await send(session.frame_msg())
                return

            if session is None:
                await send_error("bad-message", "send init first")
                return

            if mtype == "action":
                if step_task is not None or session.busy:
                    await send_error("busy", "a step is already in flight")
                    return
                try:
                    action = action_from_msg(msg)
                except ServiceError as exc:
                    await send_error(exc.code, str(exc))
                    return
                session.busy = True
                step_task = asyncio.ensure_future(
                    asyncio.to_thread(session.step, action))
            elif mtype == "edit":
                if step_task is not None or session.busy:
                    await send_error("busy", "a step is already in flight")
                    return
                try:
                    await asyncio.to_thread(session.edit, msg)
                except ServiceError as exc:
                    await send_error(exc.code, str(exc))
                    return
                await send(session.frame_msg())
            elif mtype == "snapshot":
                axis = msg.get("axis", 1)
                if axis not in (0, 1, 2):
                    await send_error("bad-message", "axis must be 0, 1, or 2")
                    return
                for slice_msg in session.slices(axis):
                    await send(slice_msg)
                await send({
                    "type": "snapshot_done",
                    "camera": [float(v)
                               for v in session.buffers.cameras[-1].to_vector()],
                })
            else:
                await send_error("bad-message", f"unknown type: {mtype}")

        try:
            while True:
                waits = {recv_task} | ({step_task} if step_task else set())
                done, _ = await asyncio.wait(waits,
                                             return_when=asyncio.FIRST_COMPLETED)
                if step_task in done:
                    exc = step_task.exception()
                    step_task = None
                    session.busy = False
                    if exc is not None:
                        raise exc
                    await send(session.frame_msg())
                if recv_task in done:
                    text = recv_task.result()   # raises on disconnect
                    recv_task = asyncio.ensure_future(ws.receive_text())
                    try:
                        msg = json.loads(text)
                    except json.JSONDecodeError:
                        await send_error("bad-message", "payload is not valid JSON")
                        continue
                    if not isinstance(msg, dict):
                        await send_error("bad-message",
                                         "payload must be a JSON object")
                        continue
                    await handle(msg)
        except WebSocketDisconnect:
            pass
        finally:
            recv_task.cancel()
            if step_task is not None:
                step_task.cancel()

    return app


def run(port: int, mode: str, cfg: Config, checkpoints: dict | None = None):
    import uvicorn
    uvicorn.run(create_app(mode, cfg, checkpoints), host="127.0.0.1", port=port,
                log_level="warning")
