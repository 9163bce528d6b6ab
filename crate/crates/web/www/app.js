import init, { Studio } from "./pkg/tinylm_web.js";

const $ = (id) => document.getElementById(id);
let studio;
let losses = [];
let running = false;

function send(cmd) {
  const events = JSON.parse(studio.command(JSON.stringify(cmd)));
  for (const e of events) {
    if (e.type === "error") $("status").textContent = `${e.code}: ${e.message}`;
  }
  return events;
}

function model() {
  if ($("preset").value === "small") {
    return { config: { n_layers: 1, n_heads: 2, d_model: 32, context_len: 64 } };
  }
  return { preset: $("preset").value };
}

function drawLoss() {
  const c = $("loss");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  if (losses.length < 2) return;
  const hi = Math.max(...losses);
  const lo = Math.min(...losses);
  g.strokeStyle = "#4a78c2";
  g.beginPath();
  losses.forEach((l, i) => {
    const x = (i / (losses.length - 1)) * c.width;
    const y = c.height - 4 - ((l - lo) / (hi - lo || 1)) * (c.height - 8);
    i ? g.lineTo(x, y) : g.moveTo(x, y);
  });
  g.stroke();
  g.fillStyle = "#000";
  g.fillText(`loss ${losses[losses.length - 1].toFixed(3)}`, 6, 14);
}

function setRunning(on) {
  running = on;
  $("train").textContent = on ? "running" : "start";
  $("train").disabled = on;
  $("pause").disabled = !on && studio.phase() !== "paused";
  $("pause").textContent = studio.phase() === "paused" ? "resume" : "pause";
}

function frame() {
  if (!running) return;
  const events = JSON.parse(studio.train(2));
  for (const e of events) {
    if (e.type === "training_metrics") {
      losses.push(e.loss);
      $("status").textContent = `step ${e.step}, ${Math.round(e.tokens_per_sec)} tokens/s`;
    }
  }
  drawLoss();
  if (studio.phase() !== "training") {
    setRunning(false);
    return;
  }
  requestAnimationFrame(frame);
}

$("train").onclick = () => {
  send({ type: "select_corpus", id: $("corpus").value });
  send({ type: "configure_model", model: model(), start: "untrained" });
  const steps = Number($("steps").value);
  const started = send({
    type: "start_training",
    hyperparameters: { batch_size: Number($("batch").value), max_steps: steps, warmup_steps: Math.min(100, steps) },
  });
  if (started.some((e) => e.type === "error")) return;
  losses = [];
  setRunning(true);
  requestAnimationFrame(frame);
};

$("pause").onclick = () => {
  if (studio.phase() === "paused") {
    send({ type: "resume" });
    setRunning(true);
    requestAnimationFrame(frame);
  } else {
    send({ type: "pause" });
    setRunning(false);
  }
};

$("generate").onclick = () => {
  const temperature = Number($("temperature").value);
  const events = send({
    type: "generate",
    prompt: $("prompt").value,
    settings: { max_new_tokens: 200, temperature, top_k: 40, seed: Date.now() % 1e9 },
  });
  const done = events.find((e) => e.type === "generation_done");
  if (done) $("output").textContent = $("prompt").value + done.text;
};

$("probs").onclick = () => {
  const top = JSON.parse(studio.next_token_probs($("context").value, 1.0, 12));
  const dist = $("dist");
  dist.replaceChildren();
  if (top.length && top[0].type === "error") {
    $("status").textContent = top[0].message;
    return;
  }
  for (const { symbol, p } of top) {
    const row = document.createElement("div");
    row.className = "bar";
    const label = document.createElement("span");
    label.textContent = `${JSON.stringify(symbol)} ${(100 * p).toFixed(1)}%`.padEnd(14);
    const bar = document.createElement("span");
    bar.style.width = `${Math.round(400 * p)}px`;
    row.append(label, bar);
    dist.append(row);
  }
};

await init();
studio = new Studio();
const [list] = JSON.parse(studio.command('{"type":"list_corpora"}'));
for (const c of list.corpora) {
  const o = document.createElement("option");
  o.value = c.id;
  o.textContent = `${c.name} (${c.chars} chars)`;
  $("corpus").append(o);
}
$("status").textContent = "ready";
