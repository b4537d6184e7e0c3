// Session state machine. One server mutation per accepted user action; the
// view state is always reconcilable from GET /progress plus GET /next.

import { AnnotationApi, ApiError, NextClick, PointPayload } from "./api.js";
import { buildPalette, classForKey, PaletteEntry, UNDO_KEY } from "./palette.js";

export interface ViewState {
  frameId: string;
  sessionId: string;
  cursor: number;
  k: number;
  done: boolean;
  highlight: PointPayload | null;
  context: PointPayload[];
  palette: PaletteEntry[];
  lastError: string | null;
}

export type KeyOutcome =
  | { kind: "labeled"; classId: number; done: boolean }
  | { kind: "undone" }
  | { kind: "ignored" }
  | { kind: "error"; message: string };

export class SessionController {
  private state: ViewState | null = null;
  private listeners: Array<(s: ViewState) => void> = [];
  private busy = false;

  constructor(private readonly api: AnnotationApi) {}

  onChange(fn: (s: ViewState) => void): void {
    this.listeners.push(fn);
  }

  get view(): ViewState {
    if (!this.state) {
      throw new Error("session not started");
    }
    return this.state;
  }

  private emit(): void {
    if (this.state) {
      for (const fn of this.listeners) {
        fn(this.state);
      }
    }
  }

  /** Create a fresh session, or resume an existing one at the server's cursor. */
  async start(frameId: string, existingSessionId?: string): Promise<ViewState> {
    const catalog = await this.api.classes(frameId);
    const palette = buildPalette(catalog.class_names);
    let sessionId: string;
    if (existingSessionId) {
      const prog = await this.api.progress(existingSessionId);
      sessionId = prog.session_id;
    } else {
      const created = await this.api.createSession(frameId);
      sessionId = created.session_id;
    }
    this.state = {
      frameId,
      sessionId,
      cursor: 0,
      k: 0,
      done: false,
      highlight: null,
      context: [],
      palette,
      lastError: null,
    };
    await this.refresh();
    return this.view;
  }

  /** Re-sync highlight and progress from the server. */
  async refresh(): Promise<void> {
    if (!this.state) {
      return;
    }
    const next: NextClick = await this.api.nextClick(this.state.sessionId);
    this.state = {
      ...this.state,
      cursor: next.cursor,
      k: next.k,
      done: next.done,
      highlight: next.done ? null : next.point ?? null,
      context: next.done ? [] : next.context ?? [],
    };
    this.emit();
  }

  /**
   * Handle one keystroke. A palette key posts exactly one label for the
   * highlighted point; the undo key posts one undo; anything else is ignored
   * with no network traffic. Server rejections leave the view unchanged
   * apart from lastError.
   */
  async handleKey(key: string): Promise<KeyOutcome> {
    if (!this.state || this.busy) {
      return { kind: "ignored" };
    }
    if (key === UNDO_KEY) {
      this.busy = true;
      try {
        await this.api.undo(this.state.sessionId);
        await this.refresh();
        return { kind: "undone" };
      } catch (err) {
        return this.fail(err);
      } finally {
        this.busy = false;
      }
    }
    const classId = classForKey(this.state.palette, key);
    if (classId === null || this.state.done || !this.state.highlight) {
      return { kind: "ignored" };
    }
    this.busy = true;
    try {
      const ack = await this.api.submitLabel(
        this.state.sessionId,
        this.state.highlight.index,
        classId,
      );
      await this.refresh();
      return { kind: "labeled", classId, done: ack.done };
    } catch (err) {
      return this.fail(err);
    } finally {
      this.busy = false;
    }
  }

  private fail(err: unknown): KeyOutcome {
    const message =
      err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
    if (this.state) {
      this.state = { ...this.state, lastError: message };
      this.emit();
    }
    return { kind: "error", message };
  }
}

/** Wire keydown events on a DOM node to the controller. */
export function bindKeyboard(
  target: { addEventListener(type: string, fn: (ev: KeyboardEvent) => void): void },
  controller: SessionController,
  onOutcome?: (o: KeyOutcome) => void,
): void {
  target.addEventListener("keydown", (ev: KeyboardEvent) => {
    void controller.handleKey(ev.key).then((outcome) => {
      if (onOutcome) {
        onOutcome(outcome);
      }
    });
  });
}
