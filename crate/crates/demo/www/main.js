import init, { energyTrace, determinantSweep, attentionHeatmap } from "./pkg/cqk_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = { euler: "#c33", leapfrog: "#36c" };

function status(msg) {
  $("status").textContent = msg;
  $("status").className = msg ? "err" : "";
}

// Line plot of several series sharing an x axis; y range covers all points.
function linePlot(canvas, xs, series, { ylabel, logY = false }) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 48;
  ctx.clearRect(0, 0, w, h);
  const ty = (v) => (logY ? Math.log10(Math.max(v, 1e-18)) : v);
  const ys = series.flatMap((s) => s.values.map(ty)).filter(Number.isFinite);
  let [lo, hi] = [Math.min(...ys), Math.max(...ys)];
  if (hi - lo < 1e-12) { lo -= 0.5; hi += 0.5; }
  const [x0, x1] = [xs[0], xs[xs.length - 1]];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (y) => h - pad + ((lo - ty(y)) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#222";
  ctx.font = "12px system-ui";
  const fmt = (v) => (logY ? `1e${v.toFixed(1)}` : v.toPrecision(4));
  ctx.fillText(fmt(hi), 4, pad + 4);
  ctx.fillText(fmt(lo), 4, h - pad);
  ctx.fillText(ylabel, pad, pad - 8);
  ctx.fillText(String(x0), pad, h - pad + 16);
  ctx.fillText(String(x1), w - pad - 24, h - pad + 16);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(px(xs[i]), py(v)) : ctx.moveTo(px(xs[i]), py(v))));
    ctx.stroke();
  }
}

function drawEnergy() {
  const dt = num("energy-dt");
  $("energy-dt-val").textContent = dt.toFixed(2);
  const steps = num("energy-steps");
  const xs = Array.from({ length: steps + 1 }, (_, i) => i);
  const series = ["euler", "leapfrog"].map((name) => ({ color: COLORS[name], values: Array.from(energyTrace(name, dt, steps)) }));
  linePlot($("energy-plot"), xs, series, { ylabel: "H (log scale)", logY: true });
}

function drawDeterminant() {
  const dts = Array.from({ length: 100 }, (_, i) => (i + 1) / 100);
  const args = [num("det-dk"), num("det-std"), num("det-seed"), Float64Array.from(dts)];
  const series = ["euler", "leapfrog"].map((name) => ({ color: COLORS[name], values: Array.from(determinantSweep(name, ...args)) }));
  linePlot($("det-plot"), dts, series, { ylabel: "det J" });
}

function drawAttention() {
  const weights = attentionHeatmap($("attn-variant").value, num("attn-steps"), num("attn-layer"), num("attn-head"), num("attn-seed"));
  const n = Math.round(Math.sqrt(weights.length));
  const canvas = $("attn-plot");
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / n;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      // differential attention can be negative; shade by magnitude
      const v = Math.min(1, Math.abs(weights[i * n + j]));
      const c = Math.round(255 * (1 - v));
      ctx.fillStyle = `rgb(${c},${c},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
}

function guard(fn) {
  return () => {
    try {
      fn();
      status("");
    } catch (e) {
      status(String(e.message ?? e));
    }
  };
}

await init();
const panels = [
  [["energy-dt", "energy-steps"], guard(drawEnergy)],
  [["det-dk", "det-std", "det-seed"], guard(drawDeterminant)],
  [["attn-variant", "attn-steps", "attn-layer", "attn-head", "attn-seed"], guard(drawAttention)],
];
for (const [ids, draw] of panels) {
  ids.forEach((id) => $(id).addEventListener("input", draw));
  draw();
}
