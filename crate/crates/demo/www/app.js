import init, { diskOps, maskPlan, gumbelHistogram } from "./pkg/hacm_demo.js";

const $ = (id) => document.getElementById(id);

function showError(el, e) {
  el.textContent = String(e.message ?? e);
  el.classList.add("err");
}

function clearError(el) {
  el.classList.remove("err");
}

// Poincaré disk ----------------------------------------------------------

const disk = { u: [0.4, 0.1], v: [-0.2, 0.5] };

function drawDisk() {
  const cv = $("disk");
  const ctx = cv.getContext("2d");
  const c = parseFloat($("curv").value);
  $("curv-v").textContent = c;
  const out = $("disk-out");
  const radius = 1 / Math.sqrt(-c);
  const scale = (cv.width / 2 - 10) / radius;
  const toPx = ([x, y]) => [cv.width / 2 + x * scale, cv.height / 2 - y * scale];
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.arc(cv.width / 2, cv.height / 2, radius * scale, 0, 2 * Math.PI);
  ctx.stroke();
  const dot = (p, color) => {
    const [x, y] = toPx(p);
    ctx.fillStyle = color;
    ctx.beginPath();
    ctx.arc(x, y, 5, 0, 2 * Math.PI);
    ctx.fill();
  };
  try {
    const r = diskOps(disk.u[0], disk.u[1], disk.v[0], disk.v[1], c);
    clearError(out);
    dot(disk.u, "#1f5fbf");
    dot(disk.v, "#2a9d3a");
    dot([r[0], r[1]], "#c62828");
    dot([r[4], r[5]], "#ef8c00");
    out.textContent =
      `u       = (${disk.u.map((v) => v.toFixed(3)).join(", ")})\n` +
      `v       = (${disk.v.map((v) => v.toFixed(3)).join(", ")})\n` +
      `u ⊕ v   = (${r[0].toFixed(4)}, ${r[1].toFixed(4)})\n` +
      `d(u, v) = ${r[2].toFixed(5)}\n` +
      `sim     = ${r[3].toFixed(5)}\n` +
      `exp0(u) = (${r[4].toFixed(4)}, ${r[5].toFixed(4)})\n` +
      `radius  = ${r[6].toFixed(4)}`;
  } catch (e) {
    dot(disk.u, "#1f5fbf");
    dot(disk.v, "#2a9d3a");
    showError(out, e);
  }
}

$("disk").addEventListener("click", (ev) => {
  const cv = $("disk");
  const radius = 1 / Math.sqrt(-parseFloat($("curv").value));
  const scale = (cv.width / 2 - 10) / radius;
  const rect = cv.getBoundingClientRect();
  const p = [(ev.clientX - rect.left - cv.width / 2) / scale, -(ev.clientY - rect.top - cv.height / 2) / scale];
  if (ev.shiftKey) disk.v = p;
  else disk.u = p;
  drawDisk();
});
$("curv").addEventListener("input", drawDisk);

// Mask plan --------------------------------------------------------------

function heat(t) {
  const r = Math.round(255 * Math.min(1, 2 * t));
  const b = Math.round(255 * Math.min(1, 2 * (1 - t)));
  return `rgb(${r}, ${Math.round(80 + 80 * (1 - Math.abs(2 * t - 1)))}, ${b})`;
}

function drawHalf(canvas, half, joints) {
  const ctx = canvas.getContext("2d");
  const rows = half.frames.length;
  const w = canvas.width / joints;
  const h = canvas.height / rows;
  const lo = Math.min(...half.scores);
  const hi = Math.max(...half.scores);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  half.scores.forEach((s, q) => {
    const [k, j] = [Math.floor(q / joints), q % joints];
    ctx.fillStyle = heat(hi > lo ? (s - lo) / (hi - lo) : 0.5);
    ctx.fillRect(j * w, k * h, w, h);
    if (half.unmasked[q]) {
      ctx.strokeStyle = "#000";
      ctx.lineWidth = 2;
      ctx.strokeRect(j * w + 1, k * h + 1, w - 2, h - 2);
    }
  });
}

function drawPlan() {
  const ratio = parseFloat($("ratio").value);
  const tau = parseFloat($("tau").value);
  $("ratio-v").textContent = ratio;
  $("tau-v").textContent = tau;
  const out = $("plan-out");
  try {
    const plan = JSON.parse(
      maskPlan(
        parseInt($("class").value, 10),
        parseInt($("seed").value, 10) >>> 0,
        ratio,
        tau,
        $("odd").value,
        $("even").value,
        $("gumbel").checked,
      ),
    );
    clearError(out);
    drawHalf($("odd-map"), plan.odd, plan.joints);
    drawHalf($("even-map"), plan.even, plan.joints);
    out.textContent =
      `${plan.frames} pooled frames × ${plan.joints} joints; l = ${plan.l} tokens per half, ` +
      `M = ${plan.m} unmasked per half\n` +
      `odd frames ${plan.odd.frames.join(" ")}   even frames ${plan.even.frames.join(" ")}`;
  } catch (e) {
    showError(out, e);
  }
}

for (const id of ["class", "seed", "ratio", "tau", "odd", "even", "gumbel"]) {
  $(id).addEventListener("input", drawPlan);
}

// Gumbel histogram --------------------------------------------------------

function drawHist() {
  const tau = parseFloat($("gtau").value);
  $("gtau-v").textContent = tau;
  const out = $("hist-out");
  const cv = $("hist");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  try {
    const scores = $("scores").value.split(",").map((s) => parseFloat(s.trim()));
    if (scores.some(Number.isNaN)) throw new Error("scores must be comma-separated numbers");
    const m = parseInt($("m").value, 10);
    const r = gumbelHistogram(Float64Array.from(scores), m, tau, parseInt($("draws").value, 10), 7);
    clearError(out);
    const n = scores.length;
    const freq = r.slice(0, n);
    const prob = r.slice(n);
    const top = Math.max(1e-9, ...freq, ...prob);
    const slot = cv.width / n;
    for (let i = 0; i < n; i++) {
      const fh = (freq[i] / top) * (cv.height - 30);
      const ph = (prob[i] / top) * (cv.height - 30);
      ctx.fillStyle = "#1f5fbf";
      ctx.fillRect(i * slot + slot * 0.15, cv.height - 20 - fh, slot * 0.35, fh);
      ctx.fillStyle = "#bbb";
      ctx.fillRect(i * slot + slot * 0.5, cv.height - 20 - ph, slot * 0.35, ph);
      ctx.fillStyle = "#222";
      ctx.fillText(String(i), i * slot + slot * 0.45, cv.height - 5);
    }
    out.textContent =
      "index  frequency  softmax\n" +
      freq.map((f, i) => `${String(i).padStart(5)}  ${f.toFixed(4).padStart(9)}  ${prob[i].toFixed(4).padStart(7)}`).join("\n") +
      (m > 1 ? "\n(frequencies count membership in the top-M set)" : "");
  } catch (e) {
    showError(out, e);
  }
}

for (const id of ["scores", "m", "gtau", "draws"]) {
  $(id).addEventListener("input", drawHist);
}

await init();
$("status").textContent = "";
drawDisk();
drawPlan();
drawHist();
