// Pixel plumbing: base64 RGB frames to RGBA buffers (direct blit, integer
// scale only) and label slices to palette-colored minimap pixels.

import { PALETTE, b64ToBytes, b64ToU16 } from "./protocol.js";

/** Decode a base64 row-major RGB u8 frame into an RGBA byte buffer. */
export function frameToRgba(image: string, h: number, w: number): Uint8ClampedArray<ArrayBuffer> {
  const rgb = b64ToBytes(image);
  if (rgb.length !== h * w * 3) {
    throw new Error(`frame payload size ${rgb.length} != ${h * w * 3}`);
  }
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < h * w; i++) {
    out[4 * i] = rgb[3 * i];
    out[4 * i + 1] = rgb[3 * i + 1];
    out[4 * i + 2] = rgb[3 * i + 2];
    out[4 * i + 3] = 255;
  }
  return out;
}

/** Integer upscale of an RGBA buffer (nearest neighbor, no interpolation). */
export function scaleRgba(
  rgba: Uint8ClampedArray,
  h: number,
  w: number,
  factor: number,
): Uint8ClampedArray<ArrayBuffer> {
  if (!Number.isInteger(factor) || factor < 1) {
    throw new Error("scale factor must be a positive integer");
  }
  const out = new Uint8ClampedArray(h * factor * w * factor * 4);
  for (let y = 0; y < h * factor; y++) {
    const sy = Math.floor(y / factor);
    for (let x = 0; x < w * factor; x++) {
      const sx = Math.floor(x / factor);
      const src = 4 * (sy * w + sx);
      const dst = 4 * (y * w * factor + x);
      out[dst] = rgba[src];
      out[dst + 1] = rgba[src + 1];
      out[dst + 2] = rgba[src + 2];
      out[dst + 3] = 255;
    }
  }
  return out;
}

const paletteRgb: Array<[number, number, number]> = PALETTE.map((p) => [
  Math.round(p.rgb[0] * 255),
  Math.round(p.rgb[1] * 255),
  Math.round(p.rgb[2] * 255),
]);

/** Color a u16 label plane for the minimap; unknown labels render magenta. */
export function sliceToRgba(labels: string, side: number): Uint8ClampedArray<ArrayBuffer> {
  const plane = b64ToU16(labels);
  if (plane.length !== side * side) {
    throw new Error(`slice payload size ${plane.length} != ${side * side}`);
  }
  const out = new Uint8ClampedArray(side * side * 4);
  for (let i = 0; i < plane.length; i++) {
    const rgb = paletteRgb[plane[i]] ?? [255, 0, 255];
    out[4 * i] = rgb[0];
    out[4 * i + 1] = rgb[1];
    out[4 * i + 2] = rgb[2];
    out[4 * i + 3] = 255;
  }
  return out;
}

/** Map a click on the scaled minimap back to the in-plane cell coordinate. */
export function minimapCell(
  px: number,
  py: number,
  side: number,
  scale: number,
): [number, number] | null {
  const cx = Math.floor(px / scale);
  const cy = Math.floor(py / scale);
  if (cx < 0 || cy < 0 || cx >= side || cy >= side) return null;
  return [cx, cy];
}
