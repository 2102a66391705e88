// Session client: owns the socket, folds frames into a ViewState, and
// reconnects with a fresh reset when the connection drops. The socket is
// built by an injected factory so tests (and the node e2e harness) can
// substitute their own transport.

import { applyFrame, initialViewState, type ViewState } from "./viewstate.js";
import { encode, parseFrame, type ClientMsg } from "./wire.js";

export interface SocketLike {
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  send(data: string): void;
  close(): void;
}

export interface ClientOptions {
  makeSocket: (url: string) => SocketLike;
  now?: () => number;
  retryMs?: number;
  schedule?: (fn: () => void, ms: number) => void;
}

export class SessionClient {
  readonly view: ViewState;
  private url: string;
  private opts: Required<ClientOptions>;
  private socket: SocketLike | null = null;
  private wanted: { task: string; seed: number } | null = null;
  private closed = false;
  private listeners: Array<() => void> = [];

  constructor(url: string, options: ClientOptions) {
    this.url = url;
    this.opts = {
      makeSocket: options.makeSocket,
      now: options.now ?? (() => Date.now()),
      retryMs: options.retryMs ?? 500,
      schedule: options.schedule ?? ((fn, ms) => setTimeout(fn, ms)),
    };
    this.view = initialViewState();
    this.open();
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  private open(): void {
    const sock = this.opts.makeSocket(this.url);
    this.socket = sock;
    sock.onopen = () => {
      const reconnecting = this.view.connection === "reconnecting";
      this.view.connection = "open";
      if (reconnecting) this.view.banner = null;
      // a drop loses server session state, so rejoin by starting the episode over
      if (this.wanted !== null) {
        sock.send(encode({ kind: "reset", task: this.wanted.task, seed: this.wanted.seed }));
      }
      this.notify();
    };
    sock.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      const frame = parseFrame(ev.data);
      if (frame === null) return;
      applyFrame(this.view, frame, this.opts.now());
      this.notify();
    };
    sock.onclose = () => {
      if (this.closed) return;
      this.view.connection = "reconnecting";
      this.view.banner = "connection lost, reconnecting";
      this.notify();
      this.opts.schedule(() => {
        if (!this.closed) this.open();
      }, this.opts.retryMs);
    };
  }

  send(msg: ClientMsg): void {
    if (msg.kind === "reset") this.wanted = { task: msg.task, seed: msg.seed };
    if (this.socket === null || this.view.connection !== "open") return;
    this.socket.send(encode(msg));
  }

  reset(task: string, seed: number): void {
    this.send({ kind: "reset", task, seed });
  }

  takeover(): void {
    this.send({ kind: "takeover" });
  }

  release(): void {
    this.send({ kind: "release" });
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
  }
}
