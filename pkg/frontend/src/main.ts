// Browser entry point: binds the session client to the DOM, rasterizes the
// draw list every animation frame, and forwards operator input.

import { SessionClient, type SocketLike } from "./client.js";
import { ControlLoop } from "./controls.js";
import { buildDrawList, defaultCamera, type DrawList } from "./render.js";

const TICK_HZ = 15;

export function paint(ctx: CanvasRenderingContext2D, dl: DrawList, width: number, height: number): void {
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#14161a";
  ctx.fillRect(0, 0, width, height);
  for (const poly of dl.polygons) {
    ctx.beginPath();
    poly.points.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
    ctx.closePath();
    ctx.fillStyle = poly.fill;
    ctx.fill();
    ctx.strokeStyle = poly.stroke;
    ctx.lineWidth = 1.5;
    ctx.stroke();
  }
  for (const line of dl.polylines) {
    if (line.points.length < 2) continue;
    ctx.beginPath();
    line.points.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
    ctx.strokeStyle = line.color;
    ctx.lineWidth = line.width;
    ctx.stroke();
  }
  for (const m of dl.markers) {
    ctx.beginPath();
    ctx.arc(m.x, m.y, m.radius, 0, Math.PI * 2);
    if (m.filled) {
      ctx.fillStyle = m.color;
      ctx.fill();
    }
    ctx.strokeStyle = m.color;
    ctx.lineWidth = 2;
    ctx.stroke();
  }
  let badgeY = 12;
  ctx.font = "14px system-ui, sans-serif";
  ctx.textBaseline = "top";
  for (const b of dl.badges) {
    const w = ctx.measureText(b.text).width + 16;
    ctx.fillStyle = b.color;
    ctx.fillRect(12, badgeY, w, 22);
    ctx.fillStyle = "#ffffff";
    ctx.fillText(b.text, 20, badgeY + 4);
    badgeY += 28;
  }
  if (dl.border !== null) {
    ctx.strokeStyle = dl.border;
    ctx.lineWidth = 6;
    ctx.strokeRect(3, 3, width - 6, height - 6);
  }
  if (dl.banner !== null) {
    ctx.fillStyle = "#b3261e";
    ctx.fillRect(0, height - 30, width, 30);
    ctx.fillStyle = "#ffffff";
    ctx.fillText(dl.banner, 12, height - 24);
  }
}

function wsUrl(): string {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/session`;
}

function start(): void {
  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const taskSel = document.getElementById("task") as HTMLSelectElement;
  const seedInput = document.getElementById("seed") as HTMLInputElement;

  const client = new SessionClient(wsUrl(), {
    // the browser socket matches SocketLike structurally at runtime; the
    // nominal handler signatures differ, hence the cast
    makeSocket: (url) => new WebSocket(url) as unknown as SocketLike,
  });
  const controls = new ControlLoop(client);

  document.getElementById("takeover")!.addEventListener("click", () => client.takeover());
  document.getElementById("release")!.addEventListener("click", () => client.release());
  document.getElementById("reset")!.addEventListener("click", () => {
    client.reset(taskSel.value, Number(seedInput.value) || 0);
  });

  const handled = new Set(["KeyW", "KeyA", "KeyS", "KeyD", "KeyQ", "KeyE", "KeyR", "KeyF", "Space"]);
  window.addEventListener("keydown", (ev) => {
    if (!handled.has(ev.code)) return;
    ev.preventDefault();
    if (!ev.repeat) controls.keyDown(ev.code);
  });
  window.addEventListener("keyup", (ev) => {
    if (handled.has(ev.code)) controls.keyUp(ev.code);
  });

  const cam = defaultCamera(canvas.width, canvas.height);
  let dragging = false;
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (dragging) controls.addDrag(ev.movementX, ev.movementY, cam.scale);
  });
  canvas.addEventListener("pointerup", () => (dragging = false));

  setInterval(() => controls.tick(), 1000 / TICK_HZ);

  client.reset(taskSel.value, Number(seedInput.value) || 0);

  const frame = (): void => {
    paint(ctx, buildDrawList(client.view, cam, performance.now()), canvas.width, canvas.height);
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
}

if (typeof document !== "undefined") start();
