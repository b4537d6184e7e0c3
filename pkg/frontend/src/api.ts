// Typed client for the annotation service. One fetch per call, no retries:
// the UI promises at most one network mutation per user action.

export interface PointPayload {
  index: number;
  x: number;
  y: number;
  z: number;
  cluster: number;
}

export interface SessionInfo {
  session_id: string;
  frame_id: string;
  k: number;
  cursor: number;
}

export interface NextClick {
  done: boolean;
  cursor: number;
  k: number;
  point?: PointPayload;
  context?: PointPayload[];
}

export interface LabelAck {
  ok: boolean;
  cursor: number;
  k: number;
  done: boolean;
}

export interface Progress {
  session_id: string;
  frame_id: string;
  cursor: number;
  k: number;
  status: "PENDING" | "COMPLETE";
}

export interface ClassCatalog {
  frame_id: string;
  num_classes: number;
  class_names: string[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, init);
  const body = await resp.json();
  if (!resp.ok) {
    throw new ApiError(resp.status, body.error ?? "ERROR", body.message ?? "");
  }
  return body as T;
}

export class AnnotationApi {
  constructor(readonly baseUrl: string) {}

  private post<T>(path: string, body?: unknown): Promise<T> {
    return request<T>(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  }

  private get<T>(path: string): Promise<T> {
    return request<T>(`${this.baseUrl}${path}`);
  }

  createSession(frameId: string): Promise<SessionInfo> {
    return this.post("/sessions", { frame_id: frameId });
  }

  nextClick(sessionId: string): Promise<NextClick> {
    return this.get(`/sessions/${sessionId}/next`);
  }

  submitLabel(sessionId: string, point: number, classId: number): Promise<LabelAck> {
    return this.post(`/sessions/${sessionId}/label`, { point, class: classId });
  }

  undo(sessionId: string): Promise<{ ok: boolean; cursor: number }> {
    return this.post(`/sessions/${sessionId}/undo`);
  }

  progress(sessionId: string): Promise<Progress> {
    return this.get(`/sessions/${sessionId}/progress`);
  }

  classes(frameId: string): Promise<ClassCatalog> {
    return this.get(`/frames/${frameId}/classes`);
  }
}
