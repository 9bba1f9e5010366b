/**
 * Mask overlay pixels. The overlay is exactly the RLE-decoded bitmap:
 * foreground pixels get the label color at the given opacity, background
 * pixels stay fully transparent. No smoothing, no resampling.
 */

import { RleMask, rleToBitmap } from './protocol';

export interface Rgb { r: number; g: number; b: number }

// label 0 is background and never drawn; palette cycles above 8
const LABEL_COLORS: Rgb[] = [
  { r: 239, g: 68, b: 68 },   // red
  { r: 59, g: 130, b: 246 },  // blue
  { r: 34, g: 197, b: 94 },   // green
  { r: 168, g: 85, b: 247 },  // purple
  { r: 245, g: 158, b: 11 },  // amber
  { r: 236, g: 72, b: 153 },  // pink
  { r: 6, g: 182, b: 212 },   // cyan
  { r: 132, g: 204, b: 22 },  // lime
];

export function labelColor(label: number): Rgb {
  return LABEL_COLORS[(label - 1 + LABEL_COLORS.length * 1000) % LABEL_COLORS.length];
}

/**
 * One RGBA byte quad per pixel, row-major, suitable for ImageData.
 * opacity is clamped to [0, 1] and applied to the alpha channel only.
 */
export function bitmapToRgba(bitmap: Uint8Array, color: Rgb, opacity: number): Uint8ClampedArray<ArrayBuffer> {
  const a = Math.round(Math.min(1, Math.max(0, opacity)) * 255);
  const out = new Uint8ClampedArray(new ArrayBuffer(bitmap.length * 4));
  for (let i = 0; i < bitmap.length; i++) {
    if (bitmap[i]) {
      const o = i * 4;
      out[o] = color.r;
      out[o + 1] = color.g;
      out[o + 2] = color.b;
      out[o + 3] = a;
    }
  }
  return out;
}

export interface Overlay {
  rows: number;
  cols: number;
  bitmap: Uint8Array;
  label: number;
  score: number;
}

export function overlayFromMask(mask: RleMask, label: number, score: number): Overlay {
  return { rows: mask.rows, cols: mask.cols, bitmap: rleToBitmap(mask), label, score };
}
