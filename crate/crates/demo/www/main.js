import init, { ToyLab } from "./pkg/robustlab_demo.js";

const $ = (id) => document.getElementById(id);
const GRID = 80;
const BALL = 41;
let lab;
let picked = null;

function eps() { return Number($("eps").value); }

function heat(ctx, values, n, size, color) {
  const cell = size / n;
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  for (let k = 0; k < values.length; k++) {
    const t = hi > lo ? (values[k] - lo) / (hi - lo) : 0.5;
    ctx.fillStyle = color(t);
    ctx.fillRect((k % n) * cell, Math.floor(k / n) * cell, cell + 1, cell + 1);
  }
}

function drawBoundary() {
  const ctx = $("boundary").getContext("2d");
  const size = 400;
  heat(ctx, lab.decision_grid(GRID), GRID, size, (p) => `rgb(${255 - 90 * p},${225},${165 + 90 * p})`);
  const pts = lab.points();
  for (let i = 0; i < pts.length; i += 3) {
    ctx.fillStyle = pts[i + 2] ? "#1a4f9c" : "#a33";
    ctx.fillRect(pts[i] * size - 2, pts[i + 1] * size - 2, 4, 4);
  }
  if (picked) {
    const e = eps() * size;
    ctx.strokeStyle = "#000";
    ctx.strokeRect(picked[0] * size - e, picked[1] * size - e, 2 * e, 2 * e);
  }
}

function drawBall() {
  if (!picked) return;
  const [px, py] = picked;
  const e = eps();
  const size = 300;
  const ctx = $("ball").getContext("2d");
  heat(ctx, lab.loss_surface(px, py, e, BALL), BALL, size, (t) => `hsl(${50 - 50 * t},90%,${90 - 45 * t}%)`);
  const toCanvas = (x, y) => [((x - px + e) / (2 * e)) * size, ((y - py + e) / (2 * e)) * size];
  const arrow = (x0, y0, x1, y1, color) => {
    const [a, b] = toCanvas(x0, y0), [c, d] = toCanvas(x1, y1);
    ctx.strokeStyle = color; ctx.lineWidth = 2;
    ctx.beginPath(); ctx.moveTo(a, b); ctx.lineTo(c, d); ctx.stroke();
    ctx.fillStyle = color; ctx.beginPath(); ctx.arc(c, d, 4, 0, 2 * Math.PI); ctx.fill();
  };
  const p = lab.attack_paths(px, py, e, 1.25 * e, Date.now() & 0xffff);
  arrow(p[0], p[1], p[2], p[3], "#d33");
  arrow(p[5], p[6], p[7], p[8], "#36c");
  const s = lab.smoothing_step(px, py, e, 1.0, 7);
  arrow(px, py, s[0], s[1], "#2a2");
  $("status").textContent =
    `point (${px.toFixed(3)}, ${py.toFixed(3)})\n` +
    `loss increment  zero init ${p[4].toFixed(4)}   random init ${p[9].toFixed(4)}`;
}

function report(acc) {
  const line = `epochs ${lab.epochs}  natural ${(100 * acc[0]).toFixed(1)}%  robust (PGD-20) ${(100 * acc[1]).toFixed(1)}%`;
  $("status").textContent = line;
}

function reset() {
  lab = new ToyLab(1, 0.0);
  picked = null;
  drawBoundary();
  report(lab.accuracy(eps()));
}

await init();
reset();

$("reset").onclick = reset;
$("train").onclick = () => {
  try {
    report(lab.train($("strategy").value, Number($("epochs").value), eps()));
  } catch (e) {
    $("status").textContent = String(e);
  }
  drawBoundary();
  drawBall();
};
$("boundary").onclick = (ev) => {
  const r = ev.target.getBoundingClientRect();
  picked = [(ev.clientX - r.left) / r.width, (ev.clientY - r.top) / r.height];
  drawBoundary();
  drawBall();
};
$("eps").onchange = () => { drawBoundary(); drawBall(); };
