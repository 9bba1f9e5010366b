/**
 * Browser entry point: three slice viewports (sagittal / coronal / axial),
 * prompt tools, overlay rendering, progress bar, banners, STL export.
 *
 * Display tiles are the gateway's windowed PNGs; overlays are drawn from
 * MASK_RESULT bitmaps via ImageData, pixel for pixel.
 */

import { bitmapToRgba, labelColor } from './overlay';
import { Api, Connection, connect } from './net';
import { FLAG_EVENT, Msg, parsePrecomputeStatus } from './protocol';
import { Axis, SessionController, Tool } from './state';

interface ViewportDom {
  canvas: HTMLCanvasElement;
  ctx: CanvasRenderingContext2D;
  axis: Axis;
  rows: number;
  cols: number;
  tile: HTMLImageElement | null;
  drag: { r0: number; c0: number; r1: number; c1: number } | null;
}

const AXIS_NAMES = ['sagittal', 'coronal', 'axial'];

let api: Api;
let conn: Connection;
let ctrl: SessionController;
let volumeId = 0;
let dims: [number, number, number] = [1, 1, 1];
const viewports: ViewportDom[] = [];

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
}

function banner(text: string, kind: 'error' | 'reconnect'): void {
  const host = $('banners');
  const div = document.createElement('div');
  div.className = `banner ${kind}`;
  div.textContent = text;
  if (kind === 'error') {
    const x = document.createElement('button');
    x.textContent = 'dismiss';
    x.onclick = () => div.remove();
    div.appendChild(x);
  }
  host.appendChild(div);
}

// slice geometry: axis 0 -> nz rows x ny cols, axis 1 -> nz x nx, axis 2 -> ny x nx
function sliceShape(axis: Axis): [number, number] {
  const [nx, ny, nz] = dims;
  if (axis === 0) return [nz, ny];
  if (axis === 1) return [nz, nx];
  return [ny, nx];
}

function tileUrl(axis: Axis, index: number): string {
  const { window, level } = ctrl.state;
  return `/tile?volume=${volumeId}&axis=${axis}&index=${index}&window=${window}&level=${level}`;
}

function redraw(vp: ViewportDom): void {
  const { ctx, canvas } = vp;
  ctx.fillStyle = '#000';
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (vp.tile && vp.tile.complete) {
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(vp.tile, 0, 0, canvas.width, canvas.height);
  }
  const index = ctrl.state.viewports[vp.axis].index;
  const overlay = ctrl.overlayAt(vp.axis, index);
  if (overlay) {
    const rgba = bitmapToRgba(overlay.bitmap, labelColor(overlay.label), ctrl.state.overlayOpacity);
    const img = new ImageData(rgba, overlay.cols, overlay.rows);
    // paint at native resolution, then scale onto the canvas
    const off = document.createElement('canvas');
    off.width = overlay.cols;
    off.height = overlay.rows;
    off.getContext('2d')!.putImageData(img, 0, 0);
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  }
  drawPromptGlyphs(vp);
  if (vp.drag) {
    const sy = canvas.height / vp.rows;
    const sx = canvas.width / vp.cols;
    ctx.strokeStyle = ctrl.lastBoxEmpty ? '#f00' : '#ff0';
    ctx.lineWidth = 2;
    ctx.strokeRect(
      Math.min(vp.drag.c0, vp.drag.c1) * sx,
      Math.min(vp.drag.r0, vp.drag.r1) * sy,
      (Math.abs(vp.drag.c1 - vp.drag.c0) + 1) * sx,
      (Math.abs(vp.drag.r1 - vp.drag.r0) + 1) * sy,
    );
  }
  ($(`idx${vp.axis}`) as HTMLElement).textContent =
    `${AXIS_NAMES[vp.axis]} ${index + 1}/${dims[vp.axis]}`;
}

// the same glyphs on every slice the prompts apply to
function drawPromptGlyphs(vp: ViewportDom): void {
  const p = ctrl.prompts[vp.axis];
  const { ctx, canvas } = vp;
  const sy = canvas.height / vp.rows;
  const sx = canvas.width / vp.cols;
  const dot = (r: number, c: number, color: string) => {
    ctx.fillStyle = color;
    ctx.beginPath();
    ctx.arc((c + 0.5) * sx, (r + 0.5) * sy, 4, 0, Math.PI * 2);
    ctx.fill();
  };
  for (const [r, c] of p.positive) dot(r, c, '#2f2');
  for (const [r, c] of p.negative) dot(r, c, '#f22');
  if (p.bbox) {
    const [r0, c0, r1, c1] = p.bbox;
    ctx.strokeStyle = '#ff0';
    ctx.lineWidth = 1.5;
    ctx.strokeRect(c0 * sx, r0 * sy, (c1 - c0 + 1) * sx, (r1 - r0 + 1) * sy);
  }
}

function refreshTile(vp: ViewportDom): void {
  const index = ctrl.state.viewports[vp.axis].index;
  const img = new Image();
  img.onload = () => {
    vp.tile = img;
    redraw(vp);
  };
  img.src = tileUrl(vp.axis, index);
}

function redrawAll(): void {
  for (const vp of viewports) redraw(vp);
}

function canvasToSlice(vp: ViewportDom, ev: MouseEvent): [number, number] {
  const rect = vp.canvas.getBoundingClientRect();
  const col = Math.floor(((ev.clientX - rect.left) / rect.width) * vp.cols);
  const row = Math.floor(((ev.clientY - rect.top) / rect.height) * vp.rows);
  return [
    Math.min(vp.rows - 1, Math.max(0, row)),
    Math.min(vp.cols - 1, Math.max(0, col)),
  ];
}

function wireViewport(vp: ViewportDom): void {
  vp.canvas.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    ctrl.scroll(vp.axis, ev.deltaY > 0 ? 1 : -1);
    refreshTile(vp);
  });

  vp.canvas.addEventListener('pointerdown', (ev) => {
    const [row, col] = canvasToSlice(vp, ev);
    const tool = ctrl.state.tool;
    if (tool === 'add-point') {
      ctrl.addPoint(vp.axis, row, col);
    } else if (tool === 'remove-point') {
      ctrl.removePoint(vp.axis, row, col);
    } else if (tool === 'bbox2d' || tool === 'bbox3d') {
      vp.drag = { r0: row, c0: col, r1: row, c1: col };
      vp.canvas.setPointerCapture(ev.pointerId);
    }
    redraw(vp);
  });

  vp.canvas.addEventListener('pointermove', (ev) => {
    if (!vp.drag) return;
    const [row, col] = canvasToSlice(vp, ev);
    vp.drag.r1 = row;
    vp.drag.c1 = col;
    if (ctrl.state.tool === 'bbox2d') {
      ctrl.dragBbox(vp.axis, normRect(vp.drag));
    }
    redraw(vp);
  });

  vp.canvas.addEventListener('pointerup', () => {
    if (!vp.drag) return;
    const rect = normRect(vp.drag);
    if (ctrl.state.tool === 'bbox2d') {
      ctrl.dragBbox(vp.axis, rect);
    } else if (ctrl.state.tool === 'bbox3d') {
      ctrl.setBox3d(box3dAxis(), rectToBounds(vp.axis, rect));
    }
    vp.drag = null;
    redraw(vp);
  });
}

function normRect(d: { r0: number; c0: number; r1: number; c1: number }): [number, number, number, number] {
  return [
    Math.min(d.r0, d.r1), Math.min(d.c0, d.c1),
    Math.max(d.r0, d.r1), Math.max(d.c0, d.c1),
  ];
}

function box3dAxis(): Axis {
  return Number(($('box3d-axis') as HTMLSelectElement).value) as Axis;
}

// a 2D rect in one viewport plus the depth range inputs give the 3D box
function rectToBounds(axis: Axis, rect: [number, number, number, number]):
    [number, number, number, number, number, number] {
  const lo = Number(($('depth-lo') as HTMLInputElement).value);
  const hi = Number(($('depth-hi') as HTMLInputElement).value);
  const [r0, c0, r1, c1] = rect;
  // slice-local (row, col) back to voxel (i, j, k)
  if (axis === 0) return [lo, c0, r0, hi, c1, r1]; // rows are z, cols are y
  if (axis === 1) return [c0, lo, r0, c1, hi, r1]; // rows are z, cols are x
  return [c0, r0, lo, c1, r1, hi];                 // rows are y, cols are x
}

async function start(): Promise<void> {
  const host = location.hostname || '127.0.0.1';
  const port = Number(location.port) || 8943;
  try {
    conn = await connect(host, port);
  } catch (err) {
    banner(`cannot reach server: ${err}`, 'error');
    return;
  }
  conn.onClose = () => banner('server connection lost; reload to reconnect', 'reconnect');
  conn.onEvent = (frame) => {
    if (frame.msgType === Msg.PRECOMPUTE_STATUS && (frame.flags & FLAG_EVENT)) {
      const st = parsePrecomputeStatus(frame.payload);
      ctrl?.statusEvent(st.fractions);
      const done = (st.fractions[0] + st.fractions[1] + st.fractions[2]) / 3;
      ($('progress') as HTMLProgressElement).value = done;
    }
  };
  api = new Api(conn);

  const hello = await api.hello();
  $('title-line').textContent = `${hello.software} ${hello.semver}`;

  ($('load') as HTMLButtonElement).onclick = async () => {
    const path = ($('volume-path') as HTMLInputElement).value;
    try {
      const meta = await api.loadVolume(path);
      volumeId = meta.volumeId;
      dims = meta.dims;
      setupControllers(meta.vmin, meta.vmax);
    } catch (err) {
      banner(String(err), 'error');
    }
  };
}

function setupControllers(vmin: number, vmax: number): void {
  ctrl = new SessionController(api, dims);
  ctrl.state.window = Math.max(1e-6, vmax - vmin);
  ctrl.state.level = (vmin + vmax) / 2;
  ctrl.onError = (detail) => banner(detail, 'error');
  ctrl.onChange = redrawAll;

  viewports.length = 0;
  for (const axis of [0, 1, 2] as Axis[]) {
    const canvas = $(`view${axis}`) as HTMLCanvasElement;
    const [rows, cols] = sliceShape(axis);
    canvas.width = cols * Math.max(1, Math.floor(512 / cols));
    canvas.height = rows * Math.max(1, Math.floor(512 / cols));
    const vp: ViewportDom = {
      canvas, ctx: canvas.getContext('2d')!, axis, rows, cols, tile: null, drag: null,
    };
    viewports.push(vp);
    wireViewport(vp);
    refreshTile(vp);
  }

  const windowSlider = $('wl-window') as HTMLInputElement;
  const levelSlider = $('wl-level') as HTMLInputElement;
  windowSlider.min = '1';
  windowSlider.max = String(Math.max(1, Math.ceil((vmax - vmin) * 2)));
  windowSlider.value = String(ctrl.state.window);
  levelSlider.min = String(Math.floor(vmin));
  levelSlider.max = String(Math.ceil(vmax));
  levelSlider.value = String(ctrl.state.level);
  const onWl = () => {
    ctrl.setWindowLevel(Number(windowSlider.value), Number(levelSlider.value));
    for (const vp of viewports) refreshTile(vp);
  };
  windowSlider.oninput = onWl;
  levelSlider.oninput = onWl;

  ($('opacity') as HTMLInputElement).oninput = (ev) => {
    ctrl.state.overlayOpacity = Number((ev.target as HTMLInputElement).value) / 100;
    redrawAll();
  };

  for (const tool of ['add-point', 'remove-point', 'bbox2d', 'bbox3d'] as Tool[]) {
    ($(`tool-${tool}`) as HTMLButtonElement).onclick = () => {
      ctrl.state.tool = tool;
      for (const other of document.querySelectorAll('.tool')) other.classList.remove('active');
      $(`tool-${tool}`).classList.add('active');
    };
  }

  ($('label') as HTMLInputElement).oninput = (ev) => {
    ctrl.state.label = Math.max(1, Number((ev.target as HTMLInputElement).value) || 1);
  };

  ($('undo') as HTMLButtonElement).onclick = async () => {
    try {
      const { axis, sliceIndex } = await api.undo();
      ctrl.state.viewports[axis].index = sliceIndex;
      ctrl.overlays.clear(); // committed labels changed server-side; refetch on demand
      redrawAll();
    } catch (err) {
      banner(String(err), 'error');
    }
  };

  // download straight from the gateway; no 3D rendering client-side
  ($('export-stl') as HTMLAnchorElement).onclick = (ev) => {
    const a = ev.target as HTMLAnchorElement;
    a.href = `/mesh?volume=${volumeId}&label=${ctrl.state.label}`;
  };
}

window.addEventListener('DOMContentLoaded', () => {
  start().catch((err) => banner(String(err), 'error'));
});
