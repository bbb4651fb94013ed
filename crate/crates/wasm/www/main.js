import init, { exampleScene, groundInstruction, componentField, Demo } from "./pkg/grounding_wasm.js";

const $ = (id) => document.getElementById(id);
const GRID = 128;

let scene = null;
let demo = null;

// Row 0 of a field is the bottom of the workspace; canvas rows run downward.
function drawField(canvas, values, n) {
  const ctx = canvas.getContext("2d");
  canvas.width = n;
  canvas.height = n;
  const img = ctx.createImageData(n, n);
  let peak = 0;
  for (const v of values) peak = Math.max(peak, v);
  for (let row = 0; row < n; row++) {
    for (let col = 0; col < n; col++) {
      const t = peak > 0 ? values[row * n + col] / peak : 0;
      const k = 4 * ((n - 1 - row) * n + col);
      img.data[k] = Math.round(255 * Math.min(1, 1.8 * t));
      img.data[k + 1] = Math.round(255 * t * t);
      img.data[k + 2] = Math.round(90 * (1 - t));
      img.data[k + 3] = 255;
    }
  }
  ctx.putImageData(img, 0, 0);
}

function toCanvas(canvas, x, y) {
  return [x * canvas.width, (1 - y) * canvas.height];
}

function drawScene(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.lineWidth = 0.6;
  ctx.font = "5px sans-serif";
  for (const [id, node] of Object.entries(scene.nodes)) {
    const [cx, cy, w, h] = node.box;
    const [x0, y0] = toCanvas(canvas, cx - w / 2, cy + h / 2);
    ctx.strokeStyle = "#fff";
    ctx.strokeRect(x0, y0, w * canvas.width, h * canvas.height);
    ctx.fillStyle = "#fff";
    ctx.fillText(`${id} ${node.name}`, x0, y0 - 1);
  }
}

function drawMarker(canvas, [x, y]) {
  const ctx = canvas.getContext("2d");
  const [px, py] = toCanvas(canvas, x, y);
  ctx.strokeStyle = "#0ff";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(px - 3, py);
  ctx.lineTo(px + 3, py);
  ctx.moveTo(px, py - 3);
  ctx.lineTo(px, py + 3);
  ctx.stroke();
}

function errorText(e) {
  try {
    const err = JSON.parse(e.message);
    return err.detail && err.detail.token !== undefined ? `${err.message} (at "${err.detail.token}")` : err.message;
  } catch {
    return String(e.message || e);
  }
}

function load() {
  const ex = JSON.parse(exampleScene(BigInt($("seed").value), Number($("index").value)));
  scene = ex.scene;
  $("instruction").value = ex.instruction;
  demo = new Demo(JSON.stringify(scene), GRID);
  $("history").replaceChildren();
  $("session-error").textContent = "";
  runGround();
  drawSession(null);
}

function runGround() {
  $("ground-error").textContent = "";
  try {
    const r = JSON.parse(groundInstruction(JSON.stringify(scene), $("instruction").value, GRID));
    const canvas = $("ground-canvas");
    drawField(canvas, r.field.values, GRID);
    drawScene(canvas);
    drawMarker(canvas, r.location);
    const rels = r.per_relation.map((p) => `${p.predicate} ${p.referent} -> node ${p.node_id} (${p.weight.toFixed(3)})`);
    $("ground-out").textContent = `${r.action} ${r.source} at [${r.location.map((v) => v.toFixed(3))}]\n${rels.join("\n")}`;
  } catch (e) {
    $("ground-error").textContent = errorText(e);
  }
}

function drawSession(argmax) {
  const canvas = $("session-canvas");
  drawField(canvas, demo.field(), GRID);
  drawScene(canvas);
  if (argmax) drawMarker(canvas, argmax);
}

function step(ev) {
  ev.preventDefault();
  const text = $("expression").value.trim();
  if (!text) return;
  $("step").disabled = true;
  try {
    const r = JSON.parse(demo.step(text));
    const li = document.createElement("li");
    li.textContent = `${text}  [${r.argmax.map((v) => v.toFixed(3))}]`;
    $("history").append(li);
    $("session-error").textContent = "";
    $("expression").value = "";
    drawSession(r.argmax);
  } catch (e) {
    $("session-error").textContent = errorText(e);
  } finally {
    $("step").disabled = false;
  }
}

function drawComponent() {
  const ids = ["mu_d", "var_d", "mu_phi", "kappa"];
  const v = ids.map((id) => Number($(id).value));
  ids.forEach((id, i) => ($(id).nextElementSibling.textContent = v[i]));
  const n = 96;
  drawField($("component-canvas"), componentField(v[0], v[1], v[2], v[3], 0.5, 0.5, n), n);
}

await init();
$("load").addEventListener("click", load);
$("ground").addEventListener("click", runGround);
$("session-form").addEventListener("submit", step);
$("reset").addEventListener("click", () => {
  demo.reset();
  $("history").replaceChildren();
  drawSession(null);
});
for (const id of ["mu_d", "var_d", "mu_phi", "kappa"]) $(id).addEventListener("input", drawComponent);
load();
drawComponent();
