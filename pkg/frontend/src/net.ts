/**
 * Websocket transport. The gateway relays exactly one protocol frame per
 * binary message; replies come back in request order, EVENT frames
 * interleave freely, and a MORE-flagged frame is part of a multi-frame
 * response that ends with the first frame clearing the flag.
 */

import {
  Box3d,
  FLAG_EVENT,
  FLAG_MORE,
  Frame,
  HelloReply,
  MaskResult,
  Msg,
  ModelEntry,
  PrecomputeStatus,
  Prompts,
  UndoReply,
  VolumeMeta,
  packApplyBbox3d,
  packHello,
  packListModels,
  packLoadVolume,
  packPrecomputeStatus,
  packPropagateTo,
  packSelectModel,
  packSetPrompts,
  packSetWindowLevel,
  packUndo,
  parseError,
  parseFrame,
  parseHello,
  parseMaskResult,
  parseModelList,
  parsePrecomputeStatus,
  parseUndoReply,
  parseVolumeMeta,
} from './protocol';
import { Axis, PromptSender } from './state';

export class ServerError extends Error {
  constructor(public code: number, public detail: string) {
    super(`server error ${code}: ${detail}`);
  }
}

export class ConnectionClosed extends Error {
  constructor() {
    super('connection closed');
  }
}

// the subset of WebSocket both browsers and the ws package provide
export interface SocketLike {
  binaryType: string;
  send(data: Uint8Array): void;
  close(): void;
  onmessage: ((ev: { data: ArrayBuffer }) => void) | null;
  onclose: ((ev: unknown) => void) | null;
  onerror: ((ev: unknown) => void) | null;
}

interface Pending {
  parts: Frame[];
  resolve: (frames: Frame[]) => void;
  reject: (err: Error) => void;
}

export class Connection {
  onEvent: (frame: Frame) => void = () => {};
  onClose: () => void = () => {};
  private pending: Pending[] = [];
  private closed = false;

  constructor(private sock: SocketLike) {
    sock.binaryType = 'arraybuffer';
    sock.onmessage = (ev) => this.handle(new Uint8Array(ev.data));
    sock.onclose = () => this.shutdown();
    sock.onerror = () => this.shutdown();
  }

  request(frame: Uint8Array): Promise<Frame[]> {
    if (this.closed) return Promise.reject(new ConnectionClosed());
    return new Promise((resolve, reject) => {
      this.pending.push({ parts: [], resolve, reject });
      this.sock.send(frame);
    });
  }

  close(): void {
    this.sock.close();
    this.shutdown();
  }

  private shutdown(): void {
    if (this.closed) return;
    this.closed = true;
    const waiting = this.pending;
    this.pending = [];
    for (const p of waiting) p.reject(new ConnectionClosed());
    this.onClose();
  }

  private handle(data: Uint8Array): void {
    const frame = parseFrame(data);
    if (frame.flags & FLAG_EVENT) {
      this.onEvent(frame);
      return;
    }
    const head = this.pending[0];
    if (!head) return; // unsolicited non-event frame; nothing to pair it with
    if (frame.msgType === Msg.ERROR) {
      this.pending.shift();
      const err = parseError(frame.payload);
      head.reject(new ServerError(err.code, err.detail));
      return;
    }
    head.parts.push(frame);
    if (!(frame.flags & FLAG_MORE)) {
      this.pending.shift();
      head.resolve(head.parts);
    }
  }
}

function wsUrl(host: string, port: number): string {
  return `ws://${host}:${port}/ws`;
}

export function connect(host: string, port: number, WsCtor: new (url: string) => unknown = (globalThis as any).WebSocket): Promise<Connection> {
  return new Promise((resolve, reject) => {
    const raw = new WsCtor(wsUrl(host, port)) as any;
    raw.binaryType = 'arraybuffer';
    raw.onopen = () => resolve(new Connection(raw as SocketLike));
    raw.onerror = (ev: any) => reject(new Error(`websocket failed: ${ev?.message ?? 'unreachable'}`));
  });
}

/** Typed requests over one connection. */
export class Api implements PromptSender {
  constructor(public conn: Connection) {}

  private async one(frame: Uint8Array): Promise<Frame> {
    const frames = await this.conn.request(frame);
    return frames[0];
  }

  async hello(): Promise<HelloReply> {
    return parseHello((await this.one(packHello())).payload);
  }

  async loadVolume(path: string): Promise<VolumeMeta> {
    return parseVolumeMeta((await this.one(packLoadVolume(path))).payload);
  }

  async selectModel(modelId: string): Promise<void> {
    await this.one(packSelectModel(modelId));
  }

  async listModels(): Promise<ModelEntry[]> {
    return parseModelList((await this.one(packListModels())).payload);
  }

  async setWindowLevel(window: number, level: number): Promise<void> {
    await this.one(packSetWindowLevel(window, level));
  }

  async setPrompts(axis: Axis, index: number, label: number, p: Prompts): Promise<MaskResult> {
    return parseMaskResult((await this.one(packSetPrompts(axis, index, label, p))).payload);
  }

  async propagateTo(axis: Axis, index: number): Promise<MaskResult> {
    return parseMaskResult((await this.one(packPropagateTo(axis, index))).payload);
  }

  async applyBbox3d(box: Box3d): Promise<MaskResult[]> {
    const frames = await this.conn.request(packApplyBbox3d(box));
    return frames.map((f) => parseMaskResult(f.payload));
  }

  async precomputeStatus(): Promise<PrecomputeStatus> {
    return parsePrecomputeStatus((await this.one(packPrecomputeStatus())).payload);
  }

  async undo(): Promise<UndoReply> {
    return parseUndoReply((await this.one(packUndo())).payload);
  }
}
