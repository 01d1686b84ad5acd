import init, { Demo } from "./pkg/georeg_demo.js";

const $ = (id) => document.getElementById(id);
const POLAR_WIDTH = 720;
let demo = null;
let observer = [0, 0];

function putRgba(canvas, rgba, w, h, scale = 1) {
  const off = new OffscreenCanvas(w, h);
  off.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
  canvas.width = w * scale;
  canvas.height = h * scale;
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, w * scale, h * scale);
}

function drawWorld() {
  const n = demo.world_size();
  const c = $("world");
  putRgba(c, demo.world_rgba(), n, n);
  const ctx = c.getContext("2d");
  const x = n / 2 + observer[0];
  const y = n / 2 - observer[1];
  ctx.strokeStyle = "#d33";
  ctx.strokeRect(x - 72, y - 72, 144, 144);
  ctx.beginPath();
  ctx.arc(x, y, 3, 0, 2 * Math.PI);
  ctx.fillStyle = "#d33";
  ctx.fill();
}

function drawPolar() {
  try {
    putRgba($("polar"), demo.polar_rgba(observer[0], observer[1]), demo.polar_width(), demo.polar_height(), 1);
    $("status").textContent = "";
  } catch (e) {
    $("status").textContent = e.message;
  }
}

function axes(ctx, w, h, ymin, ymax) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ccc";
  ctx.fillStyle = "#666";
  for (let d = 0; d <= 360; d += 45) {
    const x = (d / 360) * w;
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, h);
    ctx.stroke();
    ctx.fillText(`${d}`, x + 2, h - 4);
  }
  return (v) => h - 16 - ((v - ymin) / (ymax - ymin || 1)) * (h - 24);
}

function drawCurve() {
  const heading = Number($("heading").value);
  $("headingVal").textContent = heading;
  let s;
  try {
    s = demo.similarity(observer[0], observer[1], heading, Number($("fov").value));
  } catch (e) {
    $("status").textContent = e.message;
    return;
  }
  const c = $("curve");
  const ctx = c.getContext("2d");
  const lo = Math.min(...s);
  const hi = Math.max(...s);
  const y = axes(ctx, c.width, c.height, lo, hi);
  ctx.strokeStyle = "#1565c0";
  ctx.beginPath();
  s.forEach((v, i) => {
    const x = (i / s.length) * c.width;
    i ? ctx.lineTo(x, y(v)) : ctx.moveTo(x, y(v));
  });
  ctx.stroke();
  const tx = (heading / 360) * c.width;
  ctx.strokeStyle = "#2e7d32";
  ctx.beginPath();
  ctx.moveTo(tx, 0);
  ctx.lineTo(tx, c.height);
  ctx.stroke();
  const best = s.indexOf(hi);
  ctx.fillStyle = "#222";
  ctx.fillText(`argmax ${(best * 360 / s.length).toFixed(1)} deg, truth ${heading} deg`, 8, 12);
}

function runSweep() {
  $("status").textContent = "running sweep...";
  setTimeout(() => {
    let rows;
    try {
      rows = demo.cold_start_sweep(
        observer[0], observer[1], Math.random() * 360,
        Number($("sweep").value), Number($("seconds").value), Number($("noise").value),
        Number($("fovGate").value), Number($("ratioGate").value));
    } catch (e) {
      $("status").textContent = e.message;
      return;
    }
    $("status").textContent = "";
    const n = rows.length / 6;
    const c = $("sweepPlot");
    const ctx = c.getContext("2d");
    ctx.clearRect(0, 0, c.width, c.height);
    const x = (i) => 40 + (i / Math.max(n - 1, 1)) * (c.width - 50);
    const y = (deg) => c.height - 20 - (deg / 360) * (c.height - 30);
    ctx.fillStyle = "#666";
    ctx.fillText("heading (deg) per frame; green truth, blue estimate (filled when accepted)", 40, 12);
    let firstAccepted = -1;
    for (let i = 0; i < n; i++) {
      const [est, truth, , , accepted] = rows.slice(6 * i, 6 * i + 6);
      ctx.fillStyle = "#2e7d32";
      ctx.fillRect(x(i) - 1, y(truth) - 1, 2, 2);
      ctx.strokeStyle = "#1565c0";
      ctx.fillStyle = "#1565c0";
      ctx.beginPath();
      ctx.arc(x(i), y(est), 2.5, 0, 2 * Math.PI);
      accepted ? ctx.fill() : ctx.stroke();
      if (accepted && firstAccepted < 0) firstAccepted = i;
    }
    const last = rows.slice(6 * (n - 1), 6 * n);
    const err = Math.abs(((last[0] - last[1] + 540) % 360) - 180);
    $("sweepSummary").textContent =
      `${n} frames; first accepted at frame ${firstAccepted}; final error ${err.toFixed(2)} deg, ` +
      `ratio ${last[2].toFixed(2)}, coverage ${last[3].toFixed(0)} deg, ${last[4] ? "accepted" : "rejected"}`;
  }, 10);
}

function build() {
  demo = new Demo(Number($("seed").value), $("symmetric").checked, POLAR_WIDTH);
  observer = [0, 0];
  $("pos").textContent = "0, 0";
  drawWorld();
  drawPolar();
  drawCurve();
}

await init();
build();
$("build").onclick = build;
$("heading").oninput = drawCurve;
$("fov").onchange = drawCurve;
$("run").onclick = runSweep;
$("world").onclick = (ev) => {
  const r = ev.target.getBoundingClientRect();
  const n = demo.world_size();
  const px = ((ev.clientX - r.left) / r.width) * n;
  const py = ((ev.clientY - r.top) / r.height) * n;
  observer = [Math.round(px - n / 2), Math.round(n / 2 - py)];
  $("pos").textContent = observer.join(", ");
  drawWorld();
  drawPolar();
  drawCurve();
};
