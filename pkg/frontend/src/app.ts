// Browser entry point: wires keyboard/pointer capture, the frame canvas,
// the slice minimap, and the edit tool to a SessionClient. All state shown
// here originates from server messages.

import { SessionClient } from "./client.js";
import { FrameMsg, PALETTE, WorldSliceMsg } from "./protocol.js";
import { frameToRgba, minimapCell, scaleRgba, sliceToRgba } from "./render.js";

const FRAME_H = 32;
const FRAME_W = 32;
const SCALE = 8; // integer blit scale
const SLICE_SCALE = 12;
const MOUSE_SENSITIVITY = 0.004; // px -> radians per step

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function startApp(): void {
  const banner = el<HTMLDivElement>("banner");
  const frameCanvas = el<HTMLCanvasElement>("frame");
  const mapCanvas = el<HTMLCanvasElement>("minimap");
  const cameraReadout = el<HTMLDivElement>("camera");
  const droppedReadout = el<HTMLSpanElement>("dropped");
  const classPicker = el<HTMLSelectElement>("class-picker");
  const axisPicker = el<HTMLSelectElement>("axis-picker");
  const indexSlider = el<HTMLInputElement>("slice-index");
  const connectBtn = el<HTMLButtonElement>("connect");
  const urlInput = el<HTMLInputElement>("server-url");
  const modePicker = el<HTMLSelectElement>("mode-picker");

  frameCanvas.width = FRAME_W * SCALE;
  frameCanvas.height = FRAME_H * SCALE;
  const frameCtx = frameCanvas.getContext("2d")!;
  const mapCtx = mapCanvas.getContext("2d")!;

  for (const entry of PALETTE) {
    const opt = document.createElement("option");
    opt.value = String(entry.id);
    opt.textContent = entry.name;
    classPicker.appendChild(opt);
  }

  const held = new Set<string>();
  let dyaw = 0;
  let dpitch = 0;
  let sliceSide = 0;

  const client = new SessionClient({
    onFrame: (frame) => drawFrame(frame),
    onSlice: (slice) => drawSlice(slice),
    onError: (err) => showBanner(`${err.code}: ${err.message}`),
    onStatus: (status, detail) => {
      if (status === "failed") showBanner(`connection failed${detail ? `: ${detail}` : ""}`);
      if (status === "closed") showBanner("session closed");
    },
    onDropped: () => {
      droppedReadout.textContent = String(client.droppedInputs);
      droppedReadout.classList.add("blink");
      setTimeout(() => droppedReadout.classList.remove("blink"), 200);
    },
  });

  function showBanner(text: string): void {
    banner.textContent = text;
    banner.style.display = "block";
  }

  function drawFrame(frame: FrameMsg): void {
    const rgba = scaleRgba(
      frameToRgba(frame.image, FRAME_H, FRAME_W), FRAME_H, FRAME_W, SCALE);
    frameCtx.putImageData(
      new ImageData(rgba, FRAME_W * SCALE, FRAME_H * SCALE), 0, 0);
    cameraReadout.textContent = frame.camera
      .map((v) => v.toFixed(3)).join(", ");
  }

  function drawSlice(slice: WorldSliceMsg): void {
    if (slice.index !== Number(indexSlider.value)) return;
    const plane = sliceToRgba(slice.labels, sliceSide);
    const rgba = scaleRgba(plane, sliceSide, sliceSide, SLICE_SCALE);
    mapCtx.putImageData(
      new ImageData(rgba, sliceSide * SLICE_SCALE, sliceSide * SLICE_SCALE), 0, 0);
  }

  function redrawSlice(): void {
    const slice = client.slices.get(Number(indexSlider.value));
    if (slice) drawSlice(slice);
  }

  async function refreshSnapshot(): Promise<void> {
    await client.snapshot(Number(axisPicker.value) as 0 | 1 | 2);
    const any = client.slices.values().next().value;
    if (any) {
      sliceSide = Math.sqrt(any.labels.length === 0 ? 0 : b64Side(any));
      indexSlider.max = String(client.slices.size - 1);
      mapCanvas.width = sliceSide * SLICE_SCALE;
      mapCanvas.height = sliceSide * SLICE_SCALE;
      redrawSlice();
    }
  }

  function b64Side(slice: WorldSliceMsg): number {
    // labels are S*S little-endian u16 values, base64 encoded
    const bytes = Math.floor((slice.labels.length * 3) / 4);
    return bytes / 2;
  }

  connectBtn.addEventListener("click", async () => {
    banner.style.display = "none";
    try {
      await client.connect(urlInput.value, (url) => new WebSocket(url) as never);
      const camera = [8.5, 8.5, 8.5, 1, 0, 0, 0, 1, 0, 1.2];
      await client.init({
        camera,
        mode: modePicker.value as "oracle" | "learned",
      });
      modePicker.disabled = true; // mode is fixed at init time
      await refreshSnapshot();
      stepLoop();
    } catch (err) {
      showBanner(String(err));
    }
  });

  document.addEventListener("keydown", (ev) => {
    const key = keyFor(ev.code);
    if (key) held.add(key);
  });
  document.addEventListener("keyup", (ev) => {
    const key = keyFor(ev.code);
    if (key) held.delete(key);
  });
  frameCanvas.addEventListener("mousemove", (ev) => {
    if (ev.buttons & 1) {
      dyaw += ev.movementX * MOUSE_SENSITIVITY;
      dpitch += ev.movementY * MOUSE_SENSITIVITY;
    }
  });

  mapCanvas.addEventListener("click", async (ev) => {
    const cell = minimapCell(ev.offsetX, ev.offsetY, sliceSide, SLICE_SCALE);
    const cls = classPicker.value;
    if (!cell || cls === "") return; // empty click: no-op
    const axis = Number(axisPicker.value);
    const index = Number(indexSlider.value);
    const pos: [number, number, number] = [0, 0, 0];
    pos[axis] = index;
    const inPlane = [0, 1, 2].filter((a) => a !== axis);
    pos[inPlane[0]] = cell[0];
    pos[inPlane[1]] = cell[1];
    try {
      await client.edit([{ pos, class: Number(cls) }]);
      await refreshSnapshot();
    } catch (err) {
      showBanner(String(err));
    }
  });

  axisPicker.addEventListener("change", () => void refreshSnapshot());
  indexSlider.addEventListener("input", redrawSlice);

  function keyFor(code: string): string | null {
    switch (code) {
      case "KeyW": return "forward";
      case "KeyS": return "back";
      case "KeyA": return "left";
      case "KeyD": return "right";
      case "Space": return "jump";
      default: return null;
    }
  }

  // Drive steps at server pace: send whenever nothing is in flight.
  function stepLoop(): void {
    setInterval(() => {
      if (client.status !== "live" || client.pendingStep) return;
      if (held.size === 0 && dyaw === 0 && dpitch === 0) return;
      client.steer(held, dyaw, dpitch);
      dyaw = 0;
      dpitch = 0;
    }, 50);
  }
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", startApp);
}
