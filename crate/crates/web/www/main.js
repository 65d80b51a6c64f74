import init, { Demo } from "./pkg/femdiff_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view");
const ctx = canvas.getContext("2d");

let demo = null;
let demoKey = "";
let values = null;

function status(text, error = false) {
  $("status").textContent = text;
  $("status").className = error ? "error" : "";
}

// blue -> white -> red
function colour(t) {
  const c = Math.max(0, Math.min(1, t));
  const lo = [33, 102, 172], mid = [247, 247, 247], hi = [178, 24, 43];
  const [a, b, s] = c < 0.5 ? [lo, mid, c * 2] : [mid, hi, c * 2 - 1];
  return `rgb(${a.map((v, i) => Math.round(v + (b[i] - v) * s)).join(",")})`;
}

function draw() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!demo || !values) return;
  const coords = demo.triangleCoords();
  const pad = 10, size = canvas.width - 2 * pad;
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi - lo || 1;
  for (let t = 0; t < values.length; t++) {
    const p = coords.subarray(6 * t, 6 * t + 6);
    ctx.beginPath();
    ctx.moveTo(pad + p[0] * size, pad + (1 - p[1]) * size);
    ctx.lineTo(pad + p[2] * size, pad + (1 - p[3]) * size);
    ctx.lineTo(pad + p[4] * size, pad + (1 - p[5]) * size);
    ctx.closePath();
    ctx.fillStyle = ctx.strokeStyle = colour((values[t] - lo) / span);
    ctx.fill();
    ctx.stroke();
  }
  status(`${values.length} cells, range [${lo.toFixed(3)}, ${hi.toFixed(3)}]`);
}

function scene() {
  const key = [$("shape").value, $("n").value, $("ell").value].join("|");
  if (key !== demoKey) {
    demo?.free();
    demo = new Demo($("shape").value, Number($("n").value), Number($("ell").value));
    demoKey = key;
    values = null;
  }
  return demo;
}

function run(action) {
  return () => {
    try {
      values = action(scene());
      draw();
    } catch (e) {
      status(String(e.message ?? e), true);
    }
  };
}

function current() {
  if (!values) throw new Error("draw a field first");
  return values;
}

await init();
$("grf").onclick = run((d) => d.grf(Number($("seed").value)));
$("blobs").onclick = run((d) => d.blobs(Number($("seed").value)));
$("smooth").onclick = run((d) => d.smooth(current(), Number($("radius").value)));
$("poisson").onclick = run((d) => d.poisson(current()));
run((d) => d.grf(0))();
