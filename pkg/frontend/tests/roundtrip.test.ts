// End-to-end checks against a live annotation server: a phantom dataset
// is generated into a temp directory, a small untrained snapshot is
// saved next to it, and `vhskit serve` runs for the duration of the
// suite. Requires the python package to be installed on PATH.

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, Client } from "../src/api.js";
import { buildOverlay, isConfident } from "../src/overlay.js";
import { AnnotationSession } from "../src/session.js";
import { Point } from "../src/vhs.js";

const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;

const CANONICAL: Point[] = [
  { x: 0, y: 0 }, { x: 0.3, y: 0.4 },
  { x: 0, y: 0 }, { x: 0, y: 0.3 },
  { x: 0, y: 0 }, { x: 0, y: 0.6 },
];

const SNAPSHOT_SCRIPT = `
import sys
from vhskit.model import KeypointRegressor, LayerSpec, ModelConfig, save_snapshot
from vhskit.rng import derive_rng

config = ModelConfig(input_size=16,
                     hidden=(LayerSpec("conv", 4), LayerSpec("dense", 8)),
                     dropout_rate=0.2)
model = KeypointRegressor(config, derive_rng(3, "init"))
save_snapshot(model.snapshot(), sys.argv[1])
`;

let root: string;
let server: ChildProcess | null = null;
let serverLog = "";
const client = new Client(BASE);

function run(cmd: string, args: string[]): void {
  const out = spawnSync(cmd, args, { encoding: "utf-8" });
  if (out.status !== 0) {
    throw new Error(`${cmd} ${args.join(" ")} failed:\n${out.stdout}\n${out.stderr}`);
  }
}

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 30_000;
  while (Date.now() < deadline) {
    if (server && server.exitCode !== null) {
      throw new Error(`server exited early (${server.exitCode}):\n${serverLog}`);
    }
    try {
      await client.listSamples();
      return;
    } catch {
      await new Promise((r) => setTimeout(r, 250));
    }
  }
  throw new Error(`server not reachable after 30s:\n${serverLog}`);
}

beforeAll(async () => {
  root = mkdtempSync(join(tmpdir(), "annotate-ui-"));
  const dataset = join(root, "dataset");
  const snapshot = join(root, "model.bin");

  run("vhskit", ["phantoms", "--out", dataset, "--train", "4", "--valid", "2",
                 "--test", "2", "--unlabeled", "2", "--side", "16", "--seed", "11"]);
  run("python3", ["-c", SNAPSHOT_SCRIPT, snapshot]);

  server = spawn("vhskit", ["serve", "--dataset-root", dataset,
                            "--snapshot", snapshot, "--port", String(PORT),
                            "--k-passes", "5", "--seed", "2"]);
  server.stdout?.on("data", (chunk) => { serverLog += chunk; });
  server.stderr?.on("data", (chunk) => { serverLog += chunk; });
  await waitForServer();
});

afterAll(async () => {
  if (server) {
    server.kill("SIGTERM");
    await new Promise((r) => setTimeout(r, 300));
    if (server.exitCode === null) server.kill("SIGKILL");
  }
  rmSync(root, { recursive: true, force: true });
});

async function firstUnlabeledId(): Promise<string> {
  const pool = await client.listSamples("unlabeled");
  expect(pool.length).toBeGreaterThan(0);
  return pool[0].id;
}

describe("annotation round trip", () => {
  it("saves the canonical layout and reads back the same score and points", async () => {
    const id = await firstUnlabeledId();
    const session = new AnnotationSession(id, CANONICAL);

    const preview = session.preview();
    expect(preview).not.toBeNull();
    expect(Math.abs(preview!.vhs - 8.0)).toBeLessThan(1e-12);
    expect(preview!.heartClass).toBe(0);

    const ack = await client.putAnnotation(id, session.asPairs(), "roundtrip");
    expect(Math.abs(ack.vhs - preview!.vhs)).toBeLessThanOrEqual(1e-6);
    expect(ack.class).toBe(preview!.heartClass);
    session.markSaved({ vhs: ack.vhs, heartClass: ack.class as 0 | 1 | 2 });
    expect(session.dirty).toBe(false);

    const stored = await client.getAnnotation(id);
    expect(stored.points).toHaveLength(6);
    stored.points.forEach(([x, y], i) => {
      expect(Math.abs(x - CANONICAL[i].x)).toBeLessThanOrEqual(1e-6);
      expect(Math.abs(y - CANONICAL[i].y)).toBeLessThanOrEqual(1e-6);
    });
    expect(Math.abs(stored.vhs - preview!.vhs)).toBeLessThanOrEqual(1e-6);
    expect(stored.provenance).toBe("human");
    expect(stored.annotator).toBe("roundtrip");
  });

  it("agrees with the stateless scoring endpoint", async () => {
    const session = new AnnotationSession("scratch", CANONICAL);
    const local = session.preview()!;
    const remote = await client.scorePoints(session.asPairs());
    expect(Math.abs(remote.vhs - local.vhs)).toBeLessThanOrEqual(1e-6);
    expect(remote.class).toBe(local.heartClass);
  });

  it("rejects a degenerate save with a machine-readable code", async () => {
    const id = await firstUnlabeledId();
    const session = new AnnotationSession(id, CANONICAL);
    session.dragTo(5, { x: 0, y: 0 });
    expect(session.canSave).toBe(false);
    // the UI would never send this; prove the server also refuses it
    const bad = session.asPairs();
    await expect(client.putAnnotation(id, bad, "roundtrip")).rejects.toMatchObject({
      status: 422,
      code: "degenerate_geometry",
    });
  });

  it("reports missing samples as 404", async () => {
    await expect(client.getAnnotation("no-such-sample")).rejects.toSatisfy(
      (err: unknown) => err instanceof ApiError && err.status === 404,
    );
  });
});

describe("prediction threshold", () => {
  it("flips the confident flag exactly where the server does", async () => {
    const id = await firstUnlabeledId();
    const prediction = await client.getPrediction(id);
    expect(prediction.mu).toHaveLength(6);
    expect(prediction.sigma).toHaveLength(6);
    expect(prediction.k_passes).toBe(5);

    const overlay = buildOverlay(prediction.mu, prediction.sigma);
    expect(Math.abs(overlay.maxSigma - prediction.max_sigma)).toBeLessThanOrEqual(1e-12);

    // sweep the slider across the boundary, including exactly on it
    for (const tau of [prediction.max_sigma / 2,
                       prediction.max_sigma,
                       prediction.max_sigma * 2]) {
      const local = isConfident(overlay, tau);
      const remote = await client.getPrediction(id, tau);
      expect(remote.confident).toBe(local);
      expect(remote.tau).toBe(tau);
    }
    expect(isConfident(overlay, prediction.max_sigma)).toBe(false);
  });

  it("keeps the cached mean stable across threshold changes", async () => {
    const id = await firstUnlabeledId();
    const a = await client.getPrediction(id, 0.001);
    const b = await client.getPrediction(id, 0.25);
    expect(b.mu).toEqual(a.mu);
    expect(b.sigma).toEqual(a.sigma);
    expect(a.confident).toBe(a.max_sigma < 0.001);
    expect(b.confident).toBe(b.max_sigma < 0.25);
  });
});
