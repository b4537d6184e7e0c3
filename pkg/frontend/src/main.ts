// Browser wiring: canvas, keyboard, orbit controls, legend, progress bar.

import { AnnotationApi } from "./api.js";
import { OrbitCamera } from "./camera.js";
import { PointCloudRenderer } from "./renderer.js";
import { SessionController, bindKeyboard } from "./session.js";
import { UNDO_KEY } from "./palette.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing #${id}`);
  }
  return node as T;
}

function toast(message: string): void {
  const box = el<HTMLDivElement>("toast");
  box.textContent = message;
  box.style.opacity = "1";
  setTimeout(() => {
    box.style.opacity = "0";
  }, 2500);
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("server") ?? "http://127.0.0.1:8787";
  const frameId = params.get("frame");
  if (!frameId) {
    toast("add ?frame=<frame_id> to the URL");
    return;
  }

  const canvas = el<HTMLCanvasElement>("view");
  canvas.width = canvas.clientWidth;
  canvas.height = canvas.clientHeight;
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    toast("canvas 2d unavailable");
    return;
  }

  const api = new AnnotationApi(base);
  const camera = new OrbitCamera();
  const renderer = new PointCloudRenderer(ctx, canvas.width, canvas.height, camera);
  const controller = new SessionController(api);

  const storageKey = `milliseg-session:${base}:${frameId}`;
  const existing = window.localStorage.getItem(storageKey) ?? undefined;

  controller.onChange((state) => {
    if (state.highlight) {
      camera.lookAt(state.highlight);
    }
    renderer.render(state.context, state.highlight);
    el("progress").textContent = state.done
      ? `done: ${state.k} / ${state.k}`
      : `click ${state.cursor + 1} / ${state.k}`;
    if (state.lastError) {
      toast(state.lastError);
    }
    const legend = el<HTMLUListElement>("legend");
    if (!legend.childElementCount) {
      for (const entry of state.palette) {
        const li = document.createElement("li");
        li.textContent = `[${entry.key}] ${entry.className}`;
        legend.appendChild(li);
      }
      const li = document.createElement("li");
      li.textContent = `[${UNDO_KEY}] undo   [t] top-down   [drag] orbit   [wheel] zoom`;
      legend.appendChild(li);
    }
  });

  let state;
  try {
    state = await controller.start(frameId, existing);
  } catch {
    // stale stored session (server restarted with a clean slate): start anew
    state = await controller.start(frameId);
  }
  window.localStorage.setItem(storageKey, state.sessionId);

  bindKeyboard(document, controller, (outcome) => {
    if (outcome.kind === "labeled" && outcome.done) {
      toast("frame complete — labels written on the server");
      window.localStorage.removeItem(storageKey);
    }
  });

  document.addEventListener("keydown", (ev) => {
    if (ev.key === "t") {
      camera.toggleTopDown();
      renderer.render(controller.view.context, controller.view.highlight);
    }
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
  });
  window.addEventListener("mousemove", (ev) => {
    if (!dragging) {
      return;
    }
    camera.orbit((ev.clientX - lastX) * 0.01, (ev.clientY - lastY) * 0.01);
    lastX = ev.clientX;
    lastY = ev.clientY;
    renderer.render(controller.view.context, controller.view.highlight);
  });
  canvas.addEventListener("wheel", (ev) => {
    camera.zoom(ev.deltaY > 0 ? 1.1 : 0.9);
    renderer.render(controller.view.context, controller.view.highlight);
    ev.preventDefault();
  });
}

void boot();
