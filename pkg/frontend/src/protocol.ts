/**
 * Binary codec for the segmentation server protocol.
 *
 * The websocket gateway forwards exactly one protocol frame per binary
 * message, so there is no streaming reassembly here: every ArrayBuffer
 * off the socket is a complete frame.
 */

export const MAGIC = 0x454d4d53; // 'SMME' read as LE u32
export const VERSION = 1;
export const MAX_PAYLOAD = 64 * 1024 * 1024;
export const HEADER_SIZE = 12;

export const FLAG_EVENT = 0x0001;
export const FLAG_MORE = 0x0002;

export enum Msg {
  HELLO = 0x01,
  LOAD_VOLUME = 0x02,
  VOLUME_META = 0x03,
  SET_WINDOW_LEVEL = 0x04,
  SELECT_MODEL = 0x05,
  LIST_MODELS = 0x06,
  SET_PROMPTS = 0x07,
  PROPAGATE_TO = 0x08,
  APPLY_BBOX3D = 0x09,
  MASK_RESULT = 0x0a,
  PRECOMPUTE_STATUS = 0x0b,
  UNDO = 0x0c,
  EXPORT_LABELS = 0x0d,
  ERROR = 0x0e,
}

export class CodecError extends Error {}

export interface Frame {
  msgType: number;
  flags: number;
  payload: Uint8Array;
}

const textEncoder = new TextEncoder();
const textDecoder = new TextDecoder('utf-8', { fatal: true });

class Writer {
  private buf = new Uint8Array(256);
  private view = new DataView(this.buf.buffer);
  private pos = 0;

  private grow(need: number) {
    if (this.pos + need <= this.buf.length) return;
    const next = new Uint8Array(Math.max(this.buf.length * 2, this.pos + need));
    next.set(this.buf);
    this.buf = next;
    this.view = new DataView(next.buffer);
  }

  u8(v: number) { this.grow(1); this.view.setUint8(this.pos, v); this.pos += 1; return this; }
  u16(v: number) { this.grow(2); this.view.setUint16(this.pos, v, true); this.pos += 2; return this; }
  u32(v: number) { this.grow(4); this.view.setUint32(this.pos, v, true); this.pos += 4; return this; }
  u64(v: number) { this.grow(8); this.view.setBigUint64(this.pos, BigInt(v), true); this.pos += 8; return this; }
  f64(v: number) { this.grow(8); this.view.setFloat64(this.pos, v, true); this.pos += 8; return this; }

  bytes(b: Uint8Array) {
    this.grow(b.length);
    this.buf.set(b, this.pos);
    this.pos += b.length;
    return this;
  }

  str(s: string) {
    const raw = textEncoder.encode(s);
    if (raw.length > 0xffff) throw new CodecError('string too long');
    return this.u16(raw.length).bytes(raw);
  }

  out(): Uint8Array {
    return this.buf.slice(0, this.pos);
  }
}

export class Reader {
  private view: DataView;
  pos = 0;

  constructor(private data: Uint8Array) {
    this.view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  }

  private need(n: number) {
    if (this.pos + n > this.data.length) {
      throw new CodecError(`payload truncated at ${this.pos}, need ${n}`);
    }
  }

  u8(): number { this.need(1); return this.view.getUint8(this.pos++); }
  u16(): number { this.need(2); const v = this.view.getUint16(this.pos, true); this.pos += 2; return v; }
  u32(): number { this.need(4); const v = this.view.getUint32(this.pos, true); this.pos += 4; return v; }
  f64(): number { this.need(8); const v = this.view.getFloat64(this.pos, true); this.pos += 8; return v; }

  u64(): number {
    this.need(8);
    const v = this.view.getBigUint64(this.pos, true);
    this.pos += 8;
    if (v > BigInt(Number.MAX_SAFE_INTEGER)) throw new CodecError('u64 out of safe range');
    return Number(v);
  }

  bytes(n: number): Uint8Array {
    this.need(n);
    const out = this.data.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }

  str(): string {
    return textDecoder.decode(this.bytes(this.u16()));
  }
}

export function packFrame(msgType: number, payload: Uint8Array = new Uint8Array(0), flags = 0): Uint8Array {
  if (payload.length > MAX_PAYLOAD) throw new CodecError('payload over cap');
  const out = new Uint8Array(HEADER_SIZE + payload.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, MAGIC, true);
  view.setUint8(4, VERSION);
  view.setUint8(5, msgType);
  view.setUint16(6, flags, true);
  view.setUint32(8, payload.length, true);
  out.set(payload, HEADER_SIZE);
  return out;
}

export function parseFrame(data: Uint8Array): Frame {
  if (data.length < HEADER_SIZE) throw new CodecError('short frame');
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  if (view.getUint32(0, true) !== MAGIC) throw new CodecError('bad magic');
  if (view.getUint8(4) !== VERSION) throw new CodecError('bad version');
  const msgType = view.getUint8(5);
  const flags = view.getUint16(6, true);
  const len = view.getUint32(8, true);
  if (len > MAX_PAYLOAD) throw new CodecError('payload over cap');
  if (data.length !== HEADER_SIZE + len) {
    throw new CodecError(`frame length mismatch: have ${data.length}, want ${HEADER_SIZE + len}`);
  }
  return { msgType, flags, payload: data.subarray(HEADER_SIZE) };
}

// prompt set

export interface Prompts {
  positive: Array<[number, number]>; // (row, col)
  negative: Array<[number, number]>;
  bbox: [number, number, number, number] | null; // row0, col0, row1, col1 inclusive
}

export const emptyPrompts = (): Prompts => ({ positive: [], negative: [], bbox: null });

export function promptsEmpty(p: Prompts): boolean {
  return p.positive.length === 0 && p.negative.length === 0 && p.bbox === null;
}

export function hasForeground(p: Prompts): boolean {
  return p.positive.length > 0 || p.bbox !== null;
}

function writePrompts(w: Writer, p: Prompts) {
  w.u16(p.positive.length).u16(p.negative.length).u8(p.bbox ? 1 : 0);
  for (const [r, c] of p.positive) w.u32(r).u32(c);
  for (const [r, c] of p.negative) w.u32(r).u32(c);
  if (p.bbox) for (const v of p.bbox) w.u32(v);
}

// RLE mask

export interface RleMask {
  rows: number;
  cols: number;
  runs: Uint32Array; // alternating background/foreground, background first
}

export function readRle(r: Reader): RleMask {
  const rows = r.u32();
  const cols = r.u32();
  const n = r.u32();
  const runs = new Uint32Array(n);
  for (let i = 0; i < n; i++) runs[i] = r.u32();
  return { rows, cols, runs };
}

/** Expand to one byte per pixel, row-major, 0 background / 1 foreground. */
export function rleToBitmap(m: RleMask): Uint8Array {
  const out = new Uint8Array(m.rows * m.cols);
  let pos = 0;
  for (let i = 0; i < m.runs.length; i++) {
    const run = m.runs[i];
    if (i > 0 && run === 0) throw new CodecError('zero run after the first');
    if (i & 1) out.fill(1, pos, pos + run);
    pos += run;
  }
  if (pos !== out.length) throw new CodecError(`run sum ${pos} != ${out.length}`);
  return out;
}

// requests

export const packHello = () => packFrame(Msg.HELLO);

export const packLoadVolume = (path: string) =>
  packFrame(Msg.LOAD_VOLUME, new Writer().str(path).out());

export const packSetWindowLevel = (window: number, level: number) =>
  packFrame(Msg.SET_WINDOW_LEVEL, new Writer().f64(window).f64(level).out());

export const packSelectModel = (modelId: string) =>
  packFrame(Msg.SELECT_MODEL, new Writer().str(modelId).out());

export const packListModels = () => packFrame(Msg.LIST_MODELS);

export function packSetPrompts(axis: number, sliceIndex: number, label: number, p: Prompts): Uint8Array {
  const w = new Writer().u8(axis).u32(sliceIndex).u16(label);
  writePrompts(w, p);
  return packFrame(Msg.SET_PROMPTS, w.out());
}

export const packPropagateTo = (axis: number, sliceIndex: number) =>
  packFrame(Msg.PROPAGATE_TO, new Writer().u8(axis).u32(sliceIndex).out());

export interface Box3d {
  label: number;
  axis: number;
  adjust: boolean;
  bounds: [number, number, number, number, number, number]; // i0 j0 k0 i1 j1 k1
}

export function packApplyBbox3d(b: Box3d): Uint8Array {
  const w = new Writer().u16(b.label).u8(b.axis).u8(b.adjust ? 1 : 0);
  for (const v of b.bounds) w.u32(v);
  return packFrame(Msg.APPLY_BBOX3D, w.out());
}

export const packPrecomputeStatus = () => packFrame(Msg.PRECOMPUTE_STATUS);
export const packUndo = () => packFrame(Msg.UNDO);

// replies

export interface HelloReply { software: string; semver: string }

export function parseHello(payload: Uint8Array): HelloReply {
  const r = new Reader(payload);
  return { software: r.str(), semver: r.str() };
}

export interface VolumeMeta {
  volumeId: number;
  dims: [number, number, number]; // nx, ny, nz
  spacing: [number, number, number];
  affine: Float64Array; // row-major 4x4
  vmin: number;
  vmax: number;
}

export function parseVolumeMeta(payload: Uint8Array): VolumeMeta {
  const r = new Reader(payload);
  const volumeId = r.u64();
  const dims: [number, number, number] = [r.u32(), r.u32(), r.u32()];
  const spacing: [number, number, number] = [r.f64(), r.f64(), r.f64()];
  const affine = new Float64Array(16);
  for (let i = 0; i < 16; i++) affine[i] = r.f64();
  return { volumeId, dims, spacing, affine, vmin: r.f64(), vmax: r.f64() };
}

export interface ModelEntry { modelId: string; kind: number; embeddingBytes: number }

export function parseModelList(payload: Uint8Array): ModelEntry[] {
  const r = new Reader(payload);
  const out: ModelEntry[] = [];
  const count = r.u16();
  for (let i = 0; i < count; i++) {
    out.push({ modelId: r.str(), kind: r.u8(), embeddingBytes: r.u64() });
  }
  return out;
}

export interface MaskResult {
  axis: number;
  sliceIndex: number;
  label: number;
  score: number;
  decodeUs: number;
  mask: RleMask;
}

export function parseMaskResult(payload: Uint8Array): MaskResult {
  const r = new Reader(payload);
  return {
    axis: r.u8(),
    sliceIndex: r.u32(),
    label: r.u16(),
    score: r.f64(),
    decodeUs: r.u32(),
    mask: readRle(r),
  };
}

export interface PrecomputeStatus { volumeId: number; fractions: [number, number, number] }

export function parsePrecomputeStatus(payload: Uint8Array): PrecomputeStatus {
  const r = new Reader(payload);
  return { volumeId: r.u64(), fractions: [r.f64(), r.f64(), r.f64()] };
}

export interface UndoReply { axis: number; sliceIndex: number }

export function parseUndoReply(payload: Uint8Array): UndoReply {
  const r = new Reader(payload);
  return { axis: r.u8(), sliceIndex: r.u32() };
}

export interface ErrorReply { inReplyTo: number; code: number; detail: string }

export function parseError(payload: Uint8Array): ErrorReply {
  const r = new Reader(payload);
  return { inReplyTo: r.u8(), code: r.u16(), detail: r.str() };
}
