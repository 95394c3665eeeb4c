// Expects the wasm-bindgen output (`--target web`) in ./pkg.
import init, { sample_paths, heat_curve, picard_trace } from "./pkg/rbsde_demo.js";

const num = (sec, name) => Number(sec.querySelector(`[name=${name}]`).value);
const str = (sec, name) => sec.querySelector(`[name=${name}]`).value;

function show(sec, result) {
  const pre = sec.querySelector("pre");
  pre.className = result.error ? "err" : "";
  pre.textContent = result.error ?? JSON.stringify(summary(result), null, 1);
  return !result.error;
}

// Drops bulky arrays from the printed result.
function summary(r) {
  const out = {};
  for (const [k, v] of Object.entries(r)) {
    if (!Array.isArray(v) || (v.length <= 12 && typeof v[0] !== "object")) out[k] = v;
  }
  return out;
}

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
}

function line(ctx, pts, color, dash = []) {
  ctx.strokeStyle = color;
  ctx.setLineDash(dash);
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? ctx.lineTo(x, y) : ctx.moveTo(x, y)));
  ctx.stroke();
  ctx.setLineDash([]);
}

function runPaths() {
  const sec = document.getElementById("paths");
  const r = JSON.parse(sample_paths(str(sec, "field"), num(sec, "x"), num(sec, "y"), num(sec, "horizon"),
    num(sec, "dt"), num(sec, "n_paths"), 8, BigInt(num(sec, "seed"))));
  if (!show(sec, r)) return;
  const c = sec.querySelector("canvas"), ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  const colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
  r.paths.forEach((p, i) => line(ctx, p.map(([x, y]) => [x * c.width, (1 - y) * c.height]), colors[i % colors.length]));
}

function runHeat() {
  const sec = document.getElementById("heat");
  const r = JSON.parse(heat_curve(num(sec, "x0"), num(sec, "horizon"), num(sec, "dt"), num(sec, "n_paths"), 25,
    BigInt(num(sec, "seed"))));
  if (!show(sec, r)) return;
  const c = sec.querySelector("canvas"), ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  const tmax = r.rows[r.rows.length - 1].t;
  const X = (t) => (t / tmax) * (c.width - 20) + 10;
  const Y = (v) => c.height / 2 - v * (c.height / 2 - 10);
  line(ctx, [[0, Y(0)], [c.width, Y(0)]], "#ddd");
  line(ctx, r.rows.map((q) => [X(q.t), Y(q.exact)]), "#333", [4, 3]);
  ctx.fillStyle = "#d62728";
  for (const q of r.rows) {
    ctx.fillRect(X(q.t) - 1, Y(q.mc + 2 * q.se), 2, Y(q.mc - 2 * q.se) - Y(q.mc + 2 * q.se));
    ctx.fillRect(X(q.t) - 3, Y(q.mc) - 1, 6, 2);
  }
  const last = r.rows[r.rows.length - 1];
  sec.querySelector("pre").textContent =
    `t = ${last.t}: Monte Carlo ${last.mc.toFixed(5)} ± ${last.se.toFixed(5)}, finite differences ${last.fd.toFixed(5)}, closed form ${last.exact.toFixed(5)}`;
}

function runPicard() {
  const sec = document.getElementById("picard");
  const r = JSON.parse(picard_trace(str(sec, "driver"), str(sec, "terminal"), num(sec, "horizon"), num(sec, "dt"),
    num(sec, "n_paths"), 40, BigInt(num(sec, "seed"))));
  if (!show(sec, r)) return;
  const c = sec.querySelector("canvas"), ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  const logs = r.trace.map((d) => Math.log10(Math.max(d, 1e-16)));
  const lo = Math.min(...logs, -10), hi = Math.max(...logs, 0);
  const X = (i) => 20 + (i / Math.max(1, logs.length - 1)) * (c.width - 40);
  const Y = (v) => 10 + ((hi - v) / (hi - lo)) * (c.height - 20);
  line(ctx, logs.map((v, i) => [X(i), Y(v)]), "#1f77b4");
  ctx.fillStyle = "#1f77b4";
  logs.forEach((v, i) => ctx.fillRect(X(i) - 2, Y(v) - 2, 4, 4));
  ctx.fillStyle = "#555";
  ctx.fillText(`log10 delta_k, ${r.trace.length} iterations`, 24, 20);
}

await init();
for (const [id, fn] of [["paths", runPaths], ["heat", runHeat], ["picard", runPicard]]) {
  document.querySelector(`#${id} button`).addEventListener("click", fn);
  fn();
}
