import { describe, expect, it } from 'vitest';

import { Api, Connection, ConnectionClosed, ServerError, SocketLike } from '../src/net';
import {
  FLAG_EVENT,
  FLAG_MORE,
  Frame,
  Msg,
  packFrame,
  packHello,
} from '../src/protocol';

class FakeSocket implements SocketLike {
  binaryType = '';
  sent: Uint8Array[] = [];
  closed = false;
  onmessage: ((ev: { data: ArrayBuffer }) => void) | null = null;
  onclose: ((ev: unknown) => void) | null = null;
  onerror: ((ev: unknown) => void) | null = null;

  send(data: Uint8Array): void {
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
    this.onclose?.(undefined);
  }

  // test hook: push one framed message to the client
  deliver(msgType: number, payload: Uint8Array = new Uint8Array(0), flags = 0): void {
    const bytes = packFrame(msgType, payload, flags);
    const buf = bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength);
    this.onmessage?.({ data: buf as ArrayBuffer });
  }
}

describe('Connection', () => {
  it('pairs replies with requests in order', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    const p1 = conn.request(packHello());
    const p2 = conn.request(packFrame(Msg.UNDO));
    expect(sock.sent.length).toBe(2);

    sock.deliver(Msg.HELLO, new Uint8Array([1, 0, 97, 1, 0, 98]));
    sock.deliver(Msg.UNDO, new Uint8Array([2, 5, 0, 0, 0]));

    const [r1] = await p1;
    const [r2] = await p2;
    expect(r1.msgType).toBe(Msg.HELLO);
    expect(r2.msgType).toBe(Msg.UNDO);
  });

  it('routes EVENT frames to the handler without consuming a reply slot', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    const events: Frame[] = [];
    conn.onEvent = (f) => events.push(f);

    const p = conn.request(packFrame(Msg.PRECOMPUTE_STATUS));
    sock.deliver(Msg.PRECOMPUTE_STATUS, new Uint8Array(32), FLAG_EVENT);
    sock.deliver(Msg.PRECOMPUTE_STATUS, new Uint8Array(32));

    const [reply] = await p;
    expect(reply.flags & FLAG_EVENT).toBe(0);
    expect(events.length).toBe(1);
    expect(events[0].flags & FLAG_EVENT).toBe(FLAG_EVENT);
  });

  it('assembles a MORE sequence into one array', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    const p = conn.request(packFrame(Msg.APPLY_BBOX3D));
    sock.deliver(Msg.MASK_RESULT, new Uint8Array([1]), FLAG_MORE);
    sock.deliver(Msg.MASK_RESULT, new Uint8Array([2]), FLAG_MORE);
    sock.deliver(Msg.MASK_RESULT, new Uint8Array([3]));
    const parts = await p;
    expect(parts.map((f) => f.payload[0])).toEqual([1, 2, 3]);
  });

  it('rejects the pending request on an ERROR frame', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    const p = conn.request(packFrame(Msg.SET_PROMPTS));
    // in_reply_to=0x07, code=2, detail="bad"
    sock.deliver(Msg.ERROR, new Uint8Array([0x07, 2, 0, 3, 0, 98, 97, 100]));
    await expect(p).rejects.toThrowError(ServerError);
    const err: ServerError = await p.catch((e) => e);
    expect(err.code).toBe(2);
    expect(err.detail).toBe('bad');
  });

  it('an ERROR does not poison later requests', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    const bad = conn.request(packFrame(Msg.SELECT_MODEL));
    sock.deliver(Msg.ERROR, new Uint8Array([0x05, 4, 0, 0, 0]));
    await expect(bad).rejects.toThrow();

    const ok = conn.request(packHello());
    sock.deliver(Msg.HELLO, new Uint8Array([1, 0, 118, 1, 0, 49]));
    const [reply] = await ok;
    expect(reply.msgType).toBe(Msg.HELLO);
  });

  it('socket close rejects all pending requests and fires onClose once', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    let closures = 0;
    conn.onClose = () => closures++;

    const p1 = conn.request(packHello());
    const p2 = conn.request(packFrame(Msg.UNDO));
    sock.close();

    await expect(p1).rejects.toThrowError(ConnectionClosed);
    await expect(p2).rejects.toThrowError(ConnectionClosed);
    expect(closures).toBe(1);

    conn.close();
    expect(closures).toBe(1); // no double fire
  });

  it('requests after close fail fast', async () => {
    const sock = new FakeSocket();
    const conn = new Connection(sock);
    sock.close();
    await expect(conn.request(packHello())).rejects.toThrowError(ConnectionClosed);
  });
});

describe('Api', () => {
  it('speaks the hello exchange', async () => {
    const sock = new FakeSocket();
    const api = new Api(new Connection(sock));
    const p = api.hello();
    // reply: software="vp" semver="1.0.0"
    sock.deliver(Msg.HELLO, new Uint8Array([2, 0, 118, 112, 5, 0, 49, 46, 48, 46, 48]));
    const hello = await p;
    expect(hello.software).toBe('vp');
    expect(hello.semver).toBe('1.0.0');
    expect(sock.sent.length).toBe(1);
    // request on the wire is a bare HELLO frame
    expect(Array.from(sock.sent[0].subarray(0, 6))).toEqual([0x53, 0x4d, 0x4d, 0x45, 1, 1]);
  });

  it('collects a bbox3d stream into mask results', async () => {
    const sock = new FakeSocket();
    const api = new Api(new Connection(sock));
    const p = api.applyBbox3d({ label: 1, axis: 2, adjust: false, bounds: [0, 0, 0, 1, 1, 1] });

    const maskPayload = (index: number): Uint8Array => {
      const b = new Uint8Array(39);
      const dv = new DataView(b.buffer);
      dv.setUint8(0, 2); // axis
      dv.setUint32(1, index, true);
      dv.setUint16(5, 1, true); // label
      dv.setFloat64(7, 0.75, true);
      dv.setUint32(15, 42, true); // decode_us
      dv.setUint32(19, 1, true); // rows
      dv.setUint32(23, 2, true); // cols
      dv.setUint32(27, 2, true); // runs [0, 2]: leading background run, all foreground
      dv.setUint32(31, 0, true);
      dv.setUint32(35, 2, true);
      return b;
    };
    sock.deliver(Msg.MASK_RESULT, maskPayload(0), FLAG_MORE);
    sock.deliver(Msg.MASK_RESULT, maskPayload(1));
    const results = await p;
    expect(results.length).toBe(2);
    expect(results.map((r) => r.sliceIndex)).toEqual([0, 1]);
    expect(Array.from(results[0].mask.runs)).toEqual([0, 2]);
  });
});
