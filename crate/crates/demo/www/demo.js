// Page logic for the exploration demo. Expects the wasm-bindgen output of
// this crate (demo target "web") in ./pkg — see the crate README for the
// build command.
import init, { DemoSession } from "./pkg/salnx_demo.js";

const RES = 80;
const canvas = document.getElementById("view");
const ctx = canvas.getContext("2d");
const statusBox = document.getElementById("status");
const alphaSlider = document.getElementById("alpha");
const alphaVal = document.getElementById("alphaVal");

let session = null;
let lastStep = null;
let running = false;

function alphaFromSlider() {
  return Math.pow(10, parseFloat(alphaSlider.value));
}

function newSession() {
  const seed = BigInt(Math.max(0, parseInt(document.getElementById("seed").value) || 0));
  const strategy = document.getElementById("strategy").value;
  session = new DemoSession(seed, alphaFromSlider(), strategy);
  lastStep = null;
  draw();
  setStatus({ note: "initialized with 10 safe trajectories around (5, 5)" });
}

function setStatus(info) {
  if (!session) return;
  const lines = [];
  if (info && info.iteration !== undefined) {
    lines.push(`iteration ${info.iteration}`);
    lines.push(`endpoint (${info.eta[0].toFixed(2)}, ${info.eta[1].toFixed(2)})` +
      (info.fallback ? " — fallback (no feasible endpoint)" : ""));
    if (info.xi !== null && info.xi !== undefined)
      lines.push(`safety estimate ${info.xi.toFixed(3)}`);
    if (info.criterion !== null && info.criterion !== undefined)
      lines.push(`log-det criterion ${info.criterion.toFixed(2)}`);
    lines.push(`unsafe trajectories so far: ${info.unsafe_count}`);
    lines.push(`model data points: ${info.data_points}`);
  } else if (info && info.note) {
    lines.push(info.note);
  }
  statusBox.textContent = lines.join("\n");
}

function colorFor(kind, v, lo, hi) {
  const t = Math.max(0, Math.min(1, (v - lo) / (hi - lo || 1)));
  if (kind === "safety") {
    // dark -> green as the believed safety probability rises
    return [27 + 20 * t, 30 + 128 * t, 36 + 32 * t];
  }
  // shared viridis-ish ramp for the other surfaces
  return [40 + 215 * t, 40 + 120 * t, 90 + 60 * (1 - t)];
}

function draw() {
  if (!session) return;
  const kind = document.getElementById("field").value;
  let field;
  if (kind === "criterion") field = Array.from(session.criterion_field(RES));
  else if (kind === "mean") field = Array.from(session.mean_field(RES));
  else field = Array.from(session.safety_field(RES));

  let lo = Infinity, hi = -Infinity;
  for (const v of field) {
    if (v <= -1e29) continue;
    lo = Math.min(lo, v); hi = Math.max(hi, v);
  }
  if (kind === "safety") { lo = 0; hi = 1; }

  const img = ctx.createImageData(RES, RES);
  for (let j = 0; j < RES; j++) {
    for (let i = 0; i < RES; i++) {
      const v = field[j * RES + i];
      const [r, g, b] = colorFor(kind, v, lo, hi);
      // canvas y grows downward; domain y grows upward
      const p = 4 * ((RES - 1 - j) * RES + i);
      img.data[p] = r; img.data[p + 1] = g; img.data[p + 2] = b; img.data[p + 3] = 255;
    }
  }
  const off = new OffscreenCanvas(RES, RES);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);

  drawBoundary();
  drawTrajectories();
}

const X0 = -5, X1 = 45;
function toCanvas(x, y) {
  return [
    ((x - X0) / (X1 - X0)) * canvas.width,
    canvas.height - ((y - X0) / (X1 - X0)) * canvas.height,
  ];
}

// Marching-squares zero contour of the true safety indicator.
function drawBoundary() {
  const truth = Array.from(session.true_safety_field(RES));
  ctx.strokeStyle = "#e03131";
  ctx.lineWidth = 2;
  ctx.beginPath();
  const cell = (X1 - X0) / (RES - 1);
  for (let j = 0; j < RES - 1; j++) {
    for (let i = 0; i < RES - 1; i++) {
      const x = X0 + i * cell, y = X0 + j * cell;
      const c = [
        [truth[j * RES + i], x, y],
        [truth[j * RES + i + 1], x + cell, y],
        [truth[(j + 1) * RES + i + 1], x + cell, y + cell],
        [truth[(j + 1) * RES + i], x, y + cell],
      ];
      const pts = [];
      for (let e = 0; e < 4; e++) {
        const [v0, ax, ay] = c[e];
        const [v1, bx, by] = c[(e + 1) % 4];
        if ((v0 < 0) !== (v1 < 0)) {
          const t = v0 / (v0 - v1);
          pts.push([ax + t * (bx - ax), ay + t * (by - ay)]);
        }
      }
      if (pts.length === 2) {
        const [p, q] = pts;
        const [px, py] = toCanvas(p[0], p[1]);
        const [qx, qy] = toCanvas(q[0], q[1]);
        ctx.moveTo(px, py);
        ctx.lineTo(qx, qy);
      }
    }
  }
  ctx.stroke();
}

function drawTrajectories() {
  const pts = session.executed_points();
  ctx.fillStyle = "#ffd43b";
  for (let i = 0; i + 1 < pts.length; i += 2) {
    const [x, y] = toCanvas(pts[i], pts[i + 1]);
    ctx.fillRect(x - 1.5, y - 1.5, 3, 3);
  }
  if (lastStep && lastStep.points.length) {
    ctx.strokeStyle = "#74c0fc";
    ctx.lineWidth = 2;
    ctx.beginPath();
    const cur = lastStep.points;
    for (let i = 0; i < cur.length; i++) {
      const [x, y] = toCanvas(cur[i][0], cur[i][1]);
      if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
    }
    ctx.stroke();
  }
  const [cx, cy] = toCanvas(...session.current_point());
  ctx.strokeStyle = "#fff";
  ctx.beginPath();
  ctx.arc(cx, cy, 5, 0, 2 * Math.PI);
  ctx.stroke();
}

function doStep() {
  session.set_alpha(alphaFromSlider());
  lastStep = JSON.parse(session.step());
  draw();
  setStatus(lastStep);
}

async function main() {
  await init();
  newSession();

  alphaSlider.addEventListener("input", () => {
    alphaVal.textContent = alphaFromSlider().toFixed(3);
  });
  alphaVal.textContent = alphaFromSlider().toFixed(3);

  document.getElementById("step").addEventListener("click", doStep);
  document.getElementById("step10").addEventListener("click", () => {
    for (let i = 0; i < 10; i++) doStep();
  });
  document.getElementById("run").addEventListener("click", async (e) => {
    running = !running;
    e.target.textContent = running ? "pause" : "run";
    while (running) {
      doStep();
      await new Promise(r => setTimeout(r, 60));
    }
  });
  document.getElementById("reset").addEventListener("click", () => {
    running = false;
    document.getElementById("run").textContent = "run";
    newSession();
  });
  document.getElementById("field").addEventListener("change", draw);
  document.getElementById("strategy").addEventListener("change", newSession);
  document.getElementById("seed").addEventListener("change", newSession);
}

main();
