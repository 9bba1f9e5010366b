/**
 * View state and request discipline.
 *
 * Labels are never mutated locally: every overlay shown comes from a
 * MASK_RESULT off the wire. This module only decides when requests go
 * out (one in flight per viewport, latest wins; bbox drags throttled;
 * 3D box adjustments debounced) and keeps what came back.
 */

import { Overlay, overlayFromMask } from './overlay';
import {
  Box3d,
  MaskResult,
  Prompts,
  emptyPrompts,
  hasForeground,
  promptsEmpty,
} from './protocol';

export type Axis = 0 | 1 | 2;
export type Tool = 'add-point' | 'remove-point' | 'bbox2d' | 'bbox3d';

export interface Viewport {
  axis: Axis;
  index: number;
  zoom: number;
  panX: number;
  panY: number;
}

export interface ViewState {
  viewports: [Viewport, Viewport, Viewport]; // sagittal, coronal, axial
  overlayOpacity: number; // [0, 1]
  tool: Tool;
  label: number;
  window: number;
  level: number;
}

/** dims are (nx, ny, nz); axis a has dims[a] slices. */
export function initialViewState(dims: [number, number, number]): ViewState {
  const mid = (n: number) => Math.floor(n / 2);
  return {
    viewports: [
      { axis: 0, index: mid(dims[0]), zoom: 1, panX: 0, panY: 0 },
      { axis: 1, index: mid(dims[1]), zoom: 1, panX: 0, panY: 0 },
      { axis: 2, index: mid(dims[2]), zoom: 1, panX: 0, panY: 0 },
    ],
    overlayOpacity: 0.5,
    tool: 'add-point',
    label: 1,
    window: 1,
    level: 0.5,
  };
}

export function setOpacity(state: ViewState, value: number): void {
  state.overlayOpacity = Math.min(1, Math.max(0, value));
}

/** At most one task running; a task arriving while busy replaces any
 *  queued one (latest wins) and starts when the runner frees up. */
export class RequestGate {
  private inflight = false;
  private queued: (() => Promise<void>) | null = null;

  get busy(): boolean {
    return this.inflight;
  }

  run(task: () => Promise<void>): void {
    if (this.inflight) {
      this.queued = task;
      return;
    }
    void this.exec(task);
  }

  private async exec(task: () => Promise<void>): Promise<void> {
    this.inflight = true;
    try {
      await task();
    } catch {
      // run() is fire-and-forget; tasks report their own failures
    } finally {
      this.inflight = false;
      const next = this.queued;
      this.queued = null;
      if (next) void this.exec(next);
    }
  }
}

/** Leading call fires immediately, later calls collapse into one trailing
 *  call per gap so the send rate never exceeds 1000/minGapMs per second. */
export class Throttle {
  private last = Number.NEGATIVE_INFINITY;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private pending: (() => void) | null = null;

  constructor(private minGapMs: number) {}

  call(fn: () => void): void {
    const now = Date.now();
    if (this.timer === null && now - this.last >= this.minGapMs) {
      this.last = now;
      fn();
      return;
    }
    this.pending = fn;
    if (this.timer === null) {
      const wait = Math.max(0, this.last + this.minGapMs - now);
      this.timer = setTimeout(() => {
        this.timer = null;
        this.last = Date.now();
        const p = this.pending;
        this.pending = null;
        if (p) p();
      }, wait);
    }
  }

  cancel(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
    this.pending = null;
  }
}

export class Debounce {
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(private delayMs: number) {}

  call(fn: () => void): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      fn();
    }, this.delayMs);
  }

  cancel(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
  }
}

export interface PromptSender {
  setPrompts(axis: Axis, index: number, label: number, p: Prompts): Promise<MaskResult>;
  propagateTo(axis: Axis, index: number): Promise<MaskResult>;
  applyBbox3d(box: Box3d): Promise<MaskResult[]>;
  setWindowLevel(window: number, level: number): Promise<void>;
}

export interface ControllerOptions {
  bboxGapMs?: number; // >= 34 keeps drags at or under 30 req/s
  box3dDelayMs?: number;
}

const overlayKey = (axis: number, index: number) => `${axis}:${index}`;

export class SessionController {
  state: ViewState;
  overlays = new Map<string, Overlay>();
  prompts: [Prompts, Prompts, Prompts] = [emptyPrompts(), emptyPrompts(), emptyPrompts()];
  progress: [number, number, number] = [0, 0, 0];
  lastBoxEmpty = false; // UI paints the drag outline red and sends nothing
  onError: (detail: string) => void = () => {};
  onChange: () => void = () => {};

  private gates: [RequestGate, RequestGate, RequestGate] = [
    new RequestGate(), new RequestGate(), new RequestGate(),
  ];
  private bboxThrottles: [Throttle, Throttle, Throttle];
  private box3dDebounce: Debounce;
  private activeBox: Box3d | null = null;

  constructor(
    private sender: PromptSender,
    private dims: [number, number, number],
    opts: ControllerOptions = {},
  ) {
    this.state = initialViewState(dims);
    const gap = opts.bboxGapMs ?? 34;
    this.bboxThrottles = [new Throttle(gap), new Throttle(gap), new Throttle(gap)];
    this.box3dDebounce = new Debounce(opts.box3dDelayMs ?? 150);
  }

  overlayAt(axis: Axis, index: number): Overlay | undefined {
    return this.overlays.get(overlayKey(axis, index));
  }

  private store(result: MaskResult): void {
    this.overlays.set(
      overlayKey(result.axis, result.sliceIndex),
      overlayFromMask(result.mask, result.label, result.score),
    );
    this.onChange();
  }

  private commit(axis: Axis): void {
    const index = this.state.viewports[axis].index;
    const label = this.state.label;
    const prompts = clonePrompts(this.prompts[axis]);
    this.gates[axis].run(async () => {
      try {
        this.store(await this.sender.setPrompts(axis, index, label, prompts));
      } catch (err) {
        this.onError(String(err instanceof Error ? err.message : err));
      }
    });
  }

  addPoint(axis: Axis, row: number, col: number): void {
    this.prompts[axis].positive.push([row, col]);
    this.commit(axis);
  }

  removePoint(axis: Axis, row: number, col: number): void {
    this.prompts[axis].negative.push([row, col]);
    this.commit(axis);
  }

  /** Live bbox drags; call on every pointermove with the current corners. */
  dragBbox(axis: Axis, bbox: [number, number, number, number]): void {
    this.prompts[axis].bbox = bbox;
    this.bboxThrottles[axis].call(() => this.commit(axis));
  }

  clearPrompts(axis: Axis): void {
    this.prompts[axis] = emptyPrompts();
    this.commit(axis); // an empty set clears the committed mask server-side
  }

  /**
   * Scroll by delta slices. Clamped at the volume boundary (no request,
   * no index change past the end). With live prompts the same prompt set
   * re-runs on the new slice; with none the slice just changes.
   */
  scroll(axis: Axis, delta: number): boolean {
    const vp = this.state.viewports[axis];
    const next = Math.min(this.dims[axis] - 1, Math.max(0, vp.index + delta));
    if (next === vp.index) return false;
    vp.index = next;
    const p = this.prompts[axis];
    if (promptsEmpty(p) || !hasForeground(p)) {
      this.onChange();
      return false;
    }
    this.gates[axis].run(async () => {
      try {
        this.store(await this.sender.propagateTo(axis, next));
      } catch (err) {
        this.onError(String(err instanceof Error ? err.message : err));
      }
    });
    return true;
  }

  /**
   * 3D box tool. The first drop of a box applies immediately; while the
   * handles are being adjusted the re-apply waits for a 150 ms pause and
   * coalesces with the previous sweep server-side (adjust flag).
   */
  setBox3d(axis: Axis, bounds: [number, number, number, number, number, number]): void {
    if (bounds[0] > bounds[3] || bounds[1] > bounds[4] || bounds[2] > bounds[5]) {
      this.lastBoxEmpty = true;
      this.onChange();
      return;
    }
    this.lastBoxEmpty = false;
    const box: Box3d = {
      label: this.state.label,
      axis,
      adjust: this.activeBox !== null,
      bounds,
    };
    if (!box.adjust) {
      this.activeBox = box;
      this.applyBox(box);
      return;
    }
    this.activeBox = box;
    this.box3dDebounce.call(() => this.applyBox(box));
  }

  dropBox3d(): void {
    this.box3dDebounce.cancel();
    this.activeBox = null;
    this.lastBoxEmpty = false;
  }

  private applyBox(box: Box3d): void {
    this.gates[box.axis].run(async () => {
      try {
        for (const result of await this.sender.applyBbox3d(box)) this.store(result);
      } catch (err) {
        this.onError(String(err instanceof Error ? err.message : err));
      }
    });
  }

  setWindowLevel(window: number, level: number): void {
    this.state.window = window;
    this.state.level = level;
    this.sender.setWindowLevel(window, level).catch((err) => this.onError(String(err)));
  }

  statusEvent(fractions: [number, number, number]): void {
    this.progress = fractions;
    this.onChange();
  }
}

function clonePrompts(p: Prompts): Prompts {
  return {
    positive: p.positive.map(([r, c]) => [r, c] as [number, number]),
    negative: p.negative.map(([r, c]) => [r, c] as [number, number]),
    bbox: p.bbox ? [...p.bbox] as [number, number, number, number] : null,
  };
}
