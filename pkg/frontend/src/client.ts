// Session client: one WebSocket = one episode. The client is stateless with
// respect to world truth — every pixel and voxel label it exposes came from
// a server message. At most one step is in flight; steering during a pending
// step is dropped (and counted), never queued.

import {
  ActionMsg,
  EditCell,
  ErrorMsg,
  FrameMsg,
  InitOptions,
  ServerMsg,
  SnapshotDoneMsg,
  WorldSliceMsg,
  actionMessage,
} from "./protocol.js";

// Minimal WebSocket surface shared by browsers and the `ws` package.
export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "open", fn: () => void): void;
  addEventListener(type: "close", fn: () => void): void;
  addEventListener(type: "error", fn: (err: unknown) => void): void;
  addEventListener(type: "message", fn: (ev: { data: unknown }) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export type ConnectionStatus = "connecting" | "live" | "closed" | "failed";

export interface ClientEvents {
  onFrame?: (frame: FrameMsg) => void;
  onSlice?: (slice: WorldSliceMsg) => void;
  onSnapshotDone?: (msg: SnapshotDoneMsg) => void;
  onError?: (err: ErrorMsg) => void;
  onStatus?: (status: ConnectionStatus, detail?: string) => void;
  onDropped?: () => void; // input ignored because a step was pending
}

export class SessionClient {
  status: ConnectionStatus = "connecting";
  /** Latest-frame slot: rendering reads this, never a queue. */
  latestFrame: FrameMsg | null = null;
  /** Last full snapshot, one payload per slice index of the chosen axis. */
  slices: Map<number, WorldSliceMsg> = new Map();
  lastError: ErrorMsg | null = null;
  pendingStep = false;
  droppedInputs = 0;

  private sock: SocketLike | null = null;
  private events: ClientEvents;
  private waiters: Array<(msg: ServerMsg) => boolean> = [];

  constructor(events: ClientEvents = {}) {
    this.events = events;
  }

  connect(url: string, factory: SocketFactory): Promise<void> {
    return new Promise((resolve, reject) => {
      this.setStatus("connecting");
      let settled = false;
      const sock = factory(url);
      this.sock = sock;
      sock.addEventListener("open", () => {
        settled = true;
        this.setStatus("live");
        resolve();
      });
      sock.addEventListener("error", (err) => {
        if (!settled) {
          settled = true;
          this.setStatus("failed", String(err));
          reject(new Error(`connection failed: ${url}`));
        }
      });
      sock.addEventListener("close", () => {
        // a failed connection also emits close; keep the failure visible
        if (this.status !== "failed") this.setStatus("closed");
      });
      sock.addEventListener("message", (ev) => {
        this.handle(JSON.parse(String(ev.data)) as ServerMsg);
      });
    });
  }

  /** Send init and resolve with frame 0. Mode is fixed for the session. */
  async init(options: InitOptions): Promise<FrameMsg> {
    this.send({ type: "init", ...options });
    const msg = await this.nextOf(["frame", "error"]);
    if (msg.type === "error") throw new Error(`${msg.code}: ${msg.message}`);
    return msg as FrameMsg;
  }

  /**
   * Encode held keys + raw mouse deltas and send one action. Returns false
   * (and counts a drop) when a step is already in flight.
   */
  steer(keys: Iterable<string>, dyaw = 0, dpitch = 0): boolean {
    if (this.pendingStep) {
      this.droppedInputs += 1;
      this.events.onDropped?.();
      return false;
    }
    this.sendAction(actionMessage(keys, dyaw, dpitch));
    return true;
  }

  /** Await the frame (or error) produced by the in-flight step. */
  async stepResult(): Promise<FrameMsg> {
    const msg = await this.nextOf(["frame", "error"]);
    if (msg.type === "error") throw new Error(`${msg.code}: ${msg.message}`);
    return msg as FrameMsg;
  }

  /** A steer that resolves with its frame; the canonical scripted-step call. */
  async step(keys: Iterable<string>, dyaw = 0, dpitch = 0): Promise<FrameMsg> {
    if (!this.steer(keys, dyaw, dpitch)) {
      throw new Error("step already in flight");
    }
    return this.stepResult();
  }

  /** Click-to-edit: empty cell lists are a no-op and send nothing. */
  async edit(cells: EditCell[]): Promise<FrameMsg | null> {
    if (cells.length === 0) return null;
    this.send({ type: "edit", cells });
    const msg = await this.nextOf(["frame", "error"]);
    if (msg.type === "error") throw new Error(`${msg.code}: ${msg.message}`);
    return msg as FrameMsg;
  }

  /** Request all slices along an axis; resolves when the set is complete. */
  async snapshot(axis: 0 | 1 | 2 = 1): Promise<SnapshotDoneMsg> {
    this.slices.clear();
    this.send({ type: "snapshot", axis });
    const msg = await this.nextOf(["snapshot_done", "error"]);
    if (msg.type === "error") throw new Error(`${msg.code}: ${msg.message}`);
    return msg as SnapshotDoneMsg;
  }

  close(): void {
    this.sock?.close();
  }

  // ------------------------------------------------------------------

  private sendAction(msg: ActionMsg): void {
    this.pendingStep = true;
    this.send(msg);
  }

  private send(payload: object): void {
    if (!this.sock || this.status !== "live") {
      throw new Error("session is not live");
    }
    this.sock.send(JSON.stringify(payload));
  }

  private handle(msg: ServerMsg): void {
    switch (msg.type) {
      case "frame":
        this.pendingStep = false;
        this.latestFrame = msg;
        this.events.onFrame?.(msg);
        break;
      case "world_slice":
        this.slices.set(msg.index, msg);
        this.events.onSlice?.(msg);
        break;
      case "snapshot_done":
        this.events.onSnapshotDone?.(msg);
        break;
      case "error":
        this.pendingStep = false;
        this.lastError = msg;
        this.events.onError?.(msg);
        break;
    }
    this.waiters = this.waiters.filter((fn) => !fn(msg));
  }

  private nextOf(types: string[]): Promise<ServerMsg> {
    return new Promise((resolve) => {
      this.waiters.push((msg) => {
        if (types.includes(msg.type)) {
          resolve(msg);
          return true;
        }
        return false;
      });
    });
  }

  private setStatus(status: ConnectionStatus, detail?: string): void {
    this.status = status;
    this.events.onStatus?.(status, detail);
  }
}
