// Wire protocol types and the client-side action encoding. The bit layout
// and mouse quantization table are generated from the server package
// (src/generated/constants.json) so the two can never drift.

import constants from "./generated/constants.js";

export const KEY_NAMES = constants.keyNames as readonly string[];
export const MOUSE_BINS = constants.mouseBins as readonly number[];
export const YAW_BIN_OFFSET = constants.yawBinOffset as number;
export const PITCH_BIN_OFFSET = constants.pitchBinOffset as number;
export const N_ACTION_BITS = constants.nActionBits as number;
export const PALETTE = constants.palette as readonly {
  id: number;
  name: string;
  rgb: readonly number[];
}[];

export interface InitOptions {
  camera: number[];
  mode?: "oracle" | "learned";
  seed?: number;
  frame?: string; // base64 RGB u8
  world?: string; // base64 u16 labels
}

export interface FrameMsg {
  type: "frame";
  step: number;
  image: string;
  camera: number[];
}

export interface WorldSliceMsg {
  type: "world_slice";
  axis: number;
  index: number;
  labels: string;
}

export interface SnapshotDoneMsg {
  type: "snapshot_done";
  camera: number[];
}

export interface ErrorMsg {
  type: "error";
  code: string;
  message: string;
}

export type ServerMsg = FrameMsg | WorldSliceMsg | SnapshotDoneMsg | ErrorMsg;

export interface ActionMsg {
  type: "action";
  keys: string[];
  mouse: [number, number]; // [yaw bin, pitch bin]
}

export interface EditCell {
  pos: [number, number, number];
  class: number;
}

/** Nearest-bin quantization of a continuous mouse delta (radians). */
export function quantizeMouse(delta: number): number {
  let best = 0;
  let bestDist = Infinity;
  for (let i = 0; i < MOUSE_BINS.length; i++) {
    const d = Math.abs(delta - MOUSE_BINS[i]);
    if (d < bestDist) {
      bestDist = d;
      best = i;
    }
  }
  return best;
}

/** Build the action message for a set of held keys and raw mouse deltas. */
export function actionMessage(
  keys: Iterable<string>,
  dyaw: number,
  dpitch: number,
): ActionMsg {
  const held: string[] = [];
  for (const key of keys) {
    if (!KEY_NAMES.includes(key)) {
      throw new Error(`unknown key: ${key}`);
    }
    held.push(key);
  }
  return {
    type: "action",
    keys: held,
    mouse: [quantizeMouse(dyaw), quantizeMouse(dpitch)],
  };
}

/**
 * The 23-bit multi-hot vector this message decodes to server-side; used to
 * verify the client and server agree on the layout.
 */
export function actionBits(msg: ActionMsg): number[] {
  const bits = new Array<number>(N_ACTION_BITS).fill(0);
  for (const key of msg.keys) {
    const i = KEY_NAMES.indexOf(key);
    if (i < 0) throw new Error(`unknown key: ${key}`);
    bits[i] = 1;
  }
  const [yaw, pitch] = msg.mouse;
  if (yaw < 0 || yaw > 8 || pitch < 0 || pitch > 8) {
    throw new Error("mouse bins must be in 0..8");
  }
  bits[YAW_BIN_OFFSET + yaw] = 1;
  bits[PITCH_BIN_OFFSET + pitch] = 1;
  return bits;
}

/** Decode a base64 string into bytes (browser or node). */
export function b64ToBytes(payload: string): Uint8Array {
  if (typeof atob === "function") {
    const raw = atob(payload);
    const out = new Uint8Array(raw.length);
    for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
    return out;
  }
  // node fallback; typed loosely so the browser build needs no node types
  const buf = (globalThis as { Buffer?: { from(s: string, enc: string): Uint8Array } }).Buffer;
  if (!buf) throw new Error("no base64 decoder available");
  return new Uint8Array(buf.from(payload, "base64"));
}

/** Decode a base64 little-endian u16 label plane. */
export function b64ToU16(payload: string): Uint16Array {
  const bytes = b64ToBytes(payload);
  const out = new Uint16Array(bytes.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = bytes[2 * i] | (bytes[2 * i + 1] << 8);
  }
  return out;
}
