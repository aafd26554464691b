// App wiring: sample browser on the left, canvas in the middle, scoring
// and prediction review on the right. All persistence goes through the
// HTTP API; the local score is a preview that every save reconciles
// against the server's answer.

import { ApiError, Client, Prediction, SampleInfo } from "./api.js";
import { drawOverlay, drawPoints } from "./draw.js";
import { PredictionOverlay, buildOverlay, isConfident } from "./overlay.js";
import { AnnotationSession } from "./session.js";
import { CLASS_NAMES, Point } from "./vhs.js";

const MISMATCH_LIMIT = 1e-6;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("view");
const ctx = canvas.getContext("2d")!;
const sampleList = el<HTMLUListElement>("samples");
const splitFilter = el<HTMLSelectElement>("split");
const previewBox = el<HTMLDivElement>("preview");
const banner = el<HTMLDivElement>("banner");
const saveButton = el<HTMLButtonElement>("save");
const retryButton = el<HTMLButtonElement>("retry");
const undoButton = el<HTMLButtonElement>("undo");
const acceptButton = el<HTMLButtonElement>("accept-mu");
const tauSlider = el<HTMLInputElement>("tau");
const tauLabel = el<HTMLSpanElement>("tau-value");
const predictionBox = el<HTMLDivElement>("prediction");
const annotatorInput = el<HTMLInputElement>("annotator");
const apiBase = el<HTMLInputElement>("api-base");

let client = new Client(apiBase.value);
let samples: SampleInfo[] = [];
let current = -1;
let session: AnnotationSession | null = null;
let image: HTMLImageElement | null = null;
let overlay: PredictionOverlay | null = null;
let prediction: Prediction | null = null;
let predictionsAvailable = true;
let dragIndex = -1;

function showBanner(text: string, kind: "error" | "warn" | "ok"): void {
  banner.textContent = text;
  banner.className = kind;
  banner.style.display = text ? "block" : "none";
}

function clearBanner(): void {
  showBanner("", "ok");
  banner.style.display = "none";
}

function canvasPoint(ev: MouseEvent): Point {
  const rect = canvas.getBoundingClientRect();
  return {
    x: (ev.clientX - rect.left) / rect.width,
    y: (ev.clientY - rect.top) / rect.height,
  };
}

function redraw(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (image) ctx.drawImage(image, 0, 0, canvas.width, canvas.height);
  if (overlay && prediction) {
    drawOverlay(ctx, overlay, canvas.width, canvas.height,
                isConfident(overlay, Number(tauSlider.value)));
  }
  if (session) drawPoints(ctx, session.points, canvas.width, canvas.height);
}

function renderPreview(): void {
  if (!session) {
    previewBox.textContent = "no sample";
    saveButton.disabled = true;
    return;
  }
  if (session.degenerate) {
    previewBox.textContent = "vertebral segment is degenerate — drag E or F apart";
    previewBox.className = "warn";
    saveButton.disabled = true;
    return;
  }
  const p = session.preview();
  if (!p) {
    previewBox.textContent =
      `${session.points.length}/6 placed — next: ${session.nextName}`;
    previewBox.className = "";
    saveButton.disabled = true;
    return;
  }
  previewBox.textContent =
    `VHS ${p.vhs.toFixed(3)} — class ${p.heartClass} (${CLASS_NAMES[p.heartClass]})` +
    (session.dirty ? " *" : "");
  previewBox.className = "";
  saveButton.disabled = !session.canSave;
}

function renderPredictionPanel(): void {
  const tau = Number(tauSlider.value);
  tauLabel.textContent = tau.toFixed(4);
  if (!predictionsAvailable) {
    predictionBox.textContent = "no model snapshot on the server";
    predictionBox.className = "muted";
    acceptButton.disabled = true;
    return;
  }
  if (!prediction || !overlay) {
    predictionBox.textContent = "no prediction loaded";
    predictionBox.className = "muted";
    acceptButton.disabled = true;
    return;
  }
  const confident = isConfident(overlay, tau);
  const score = prediction.vhs === null
    ? "degenerate prediction"
    : `VHS ${prediction.vhs.toFixed(3)}`;
  predictionBox.textContent =
    `${score} — max spread ${overlay.maxSigma.toFixed(4)} — ` +
    (confident ? "confident" : "unconfident");
  predictionBox.className = confident ? "confident" : "unconfident";
  acceptButton.disabled = false;
}

async function loadPrediction(id: string): Promise<void> {
  prediction = null;
  overlay = null;
  try {
    prediction = await client.getPrediction(id);
    overlay = buildOverlay(prediction.mu, prediction.sigma);
    predictionsAvailable = true;
  } catch (err) {
    if (err instanceof ApiError && err.status === 503) {
      predictionsAvailable = false;
    } else if (!(err instanceof ApiError) || err.status !== 404) {
      showBanner(`prediction failed: ${(err as Error).message}`, "warn");
    }
  }
  renderPredictionPanel();
  redraw();
}

async function openSample(index: number): Promise<void> {
  if (index < 0 || index >= samples.length) return;
  current = index;
  const info = samples[index];
  clearBanner();
  retryButton.style.display = "none";

  let existing: Point[] | undefined;
  if (info.has_annotation) {
    const record = await client.getAnnotation(info.id);
    existing = record.points.map(([x, y]) => ({ x, y }));
  }
  session = new AnnotationSession(info.id, existing);

  image = new Image();
  image.onload = () => redraw();
  image.src = client.imageUrl(info.id);

  for (const node of Array.from(sampleList.children)) {
    node.classList.toggle("active",
      (node as HTMLElement).dataset.id === info.id);
  }
  renderPreview();
  void loadPrediction(info.id);
}

async function refreshSamples(): Promise<void> {
  const split = splitFilter.value || undefined;
  samples = await client.listSamples(split);
  sampleList.innerHTML = "";
  samples.forEach((info, i) => {
    const item = document.createElement("li");
    item.dataset.id = info.id;
    item.textContent = `${info.id} ${info.has_annotation ? "●" : "○"}`;
    item.onclick = () => void openSample(i);
    sampleList.appendChild(item);
  });
  if (samples.length) void openSample(0);
}

function nextUnlabeled(after: number): number {
  for (let offset = 1; offset <= samples.length; offset++) {
    const i = (after + offset) % samples.length;
    if (!samples[i].has_annotation) return i;
  }
  return -1;
}

async function save(): Promise<void> {
  if (!session || !session.canSave) return;
  const info = samples[current];
  if (info.has_annotation &&
      !window.confirm(`${info.id} already has an annotation. Overwrite?`)) {
    return;
  }
  const local = session.preview()!;
  try {
    const ack = await client.putAnnotation(
      session.sampleId, session.asPairs(), annotatorInput.value || "annotator");
    const drift = Math.abs(ack.vhs - local.vhs);
    if (drift > MISMATCH_LIMIT) {
      // never silently adopt either number; the user decides what broke
      showBanner(
        `score mismatch: local ${local.vhs} vs server ${ack.vhs}`, "error");
    } else {
      showBanner(`saved ${info.id}: VHS ${ack.vhs.toFixed(3)}`, "ok");
    }
    session.markSaved({ vhs: ack.vhs, heartClass: ack.class as 0 | 1 | 2 });
    info.has_annotation = true;
    retryButton.style.display = "none";
    renderPreview();
    const next = nextUnlabeled(current);
    if (next >= 0) void openSample(next);
  } catch (err) {
    // session untouched; offer a retry
    retryButton.style.display = "inline-block";
    if (err instanceof ApiError) {
      showBanner(`save rejected (${err.code}): ${err.message}`, "error");
    } else {
      showBanner("save failed: network unreachable; annotation kept", "error");
    }
  }
}

canvas.addEventListener("mousedown", (ev) => {
  if (!session) return;
  const p = canvasPoint(ev);
  dragIndex = session.hitTest(p);
  if (dragIndex < 0) {
    const result = session.place(p);
    if (result.kind === "rejected") {
      showBanner(result.reason, "warn");
    } else {
      clearBanner();
    }
  }
  renderPreview();
  redraw();
});

canvas.addEventListener("mousemove", (ev) => {
  if (!session || dragIndex < 0 || ev.buttons === 0) return;
  session.dragTo(dragIndex, canvasPoint(ev));
  renderPreview();
  redraw();
});

canvas.addEventListener("mouseup", () => {
  dragIndex = -1;
});

window.addEventListener("keydown", (ev) => {
  if (ev.target instanceof HTMLInputElement) return;
  if (ev.key === "n") void openSample(Math.min(current + 1, samples.length - 1));
  if (ev.key === "p") void openSample(Math.max(current - 1, 0));
  if (ev.key === "u" && session) {
    session.undo();
    renderPreview();
    redraw();
  }
});

saveButton.onclick = () => void save();
retryButton.onclick = () => void save();
undoButton.onclick = () => {
  if (session) {
    session.undo();
    renderPreview();
    redraw();
  }
};
acceptButton.onclick = () => {
  if (session && prediction) {
    session.acceptPrediction(prediction.mu.map(([x, y]) => ({ x, y })));
    renderPreview();
    redraw();
  }
};
tauSlider.oninput = () => {
  renderPredictionPanel();
  redraw();
};
splitFilter.onchange = () => void refreshSamples();
apiBase.onchange = () => {
  client = new Client(apiBase.value);
  void refreshSamples();
};

void refreshSamples().catch((err) =>
  showBanner(`cannot reach ${client.base}: ${err.message}`, "error"));
