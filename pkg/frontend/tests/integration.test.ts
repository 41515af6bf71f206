/** End-to-end run against the real listening-test service.
 *
 * Spawns the Python server on a 5-sample store, scripts a full rater
 * session through the production client code (RaterApi + SessionController,
 * with an audio player that fetches each clip over HTTP), then checks the
 * server-side CSV and the mos command against hand-computed arithmetic.
 */

import { ChildProcess, spawn, spawnSync } from "node:child_process";
import { mkdirSync, mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, RaterApi } from "../src/api.js";
import { AudioPlayer, SessionController } from "../src/session.js";

const STATIC_DIR = join(dirname(fileURLToPath(import.meta.url)), "..", "static");

// sample -> (category, score to give); chosen so every mean is easy to do
// by hand: news (5+4+4)/3 = 13/3, poetry (3+5)/2 = 4, ratings mean 21/5
const PLAN: Record<string, { category: string; score: number }> = {
  s0: { category: "news", score: 5 },
  s1: { category: "news", score: 4 },
  s2: { category: "news", score: 4 },
  s3: { category: "poetry", score: 3 },
  s4: { category: "poetry", score: 5 },
};

function makeWav(path: string, seconds = 0.15, rate = 22050): void {
  const n = Math.round(seconds * rate);
  const data = Buffer.alloc(n * 2);
  for (let i = 0; i < n; i++) {
    const x = 0.2 * Math.sin((2 * Math.PI * 440 * i) / rate);
    data.writeInt16LE(Math.round(x * 32767), i * 2);
  }
  const header = Buffer.alloc(44);
  header.write("RIFF", 0, "ascii");
  header.writeUInt32LE(36 + data.length, 4);
  header.write("WAVE", 8, "ascii");
  header.write("fmt ", 12, "ascii");
  header.writeUInt32LE(16, 16);
  header.writeUInt16LE(1, 20);          // PCM
  header.writeUInt16LE(1, 22);          // mono
  header.writeUInt32LE(rate, 24);
  header.writeUInt32LE(rate * 2, 28);   // byte rate
  header.writeUInt16LE(2, 32);          // block align
  header.writeUInt16LE(16, 34);         // bits per sample
  header.write("data", 36, "ascii");
  header.writeUInt32LE(data.length, 40);
  writeFileSync(path, Buffer.concat([header, data]));
}

function waitForOutput(child: ChildProcess, pattern: RegExp, ms = 15000): Promise<string> {
  return new Promise((resolve, reject) => {
    let buffered = "";
    const timer = setTimeout(
      () => reject(new Error(`server start timed out; output so far:\n${buffered}`)), ms);
    const onData = (chunk: Buffer) => {
      buffered += chunk.toString();
      const match = buffered.match(pattern);
      if (match) {
        clearTimeout(timer);
        resolve(match[0]);
      }
    };
    child.stdout!.on("data", onData);
    child.stderr!.on("data", onData);
    child.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`server exited early (code ${code}):\n${buffered}`));
    });
  });
}

/** Stands in for the <audio> element: really fetches the clip, then "ends". */
class HttpProbePlayer implements AudioPlayer {
  playedUrls: string[] = [];

  constructor(private baseUrl: string) {}

  async play(url: string): Promise<void> {
    const response = await fetch(this.baseUrl + url);
    if (!response.ok) throw new Error(`audio fetch failed: HTTP ${response.status}`);
    expect(response.headers.get("content-type")).toBe("audio/wav");
    const bytes = Buffer.from(await response.arrayBuffer());
    expect(bytes.subarray(0, 4).toString("ascii")).toBe("RIFF");
    expect(bytes.subarray(8, 12).toString("ascii")).toBe("WAVE");
    this.playedUrls.push(url);
  }
}

function csvRows(path: string): string[][] {
  const lines = readFileSync(path, "utf-8").split("\n").filter((l) => l.length > 0);
  expect(lines[0]).toBe("rater_id,sample_id,category,model_id,score,timestamp");
  return lines.slice(1).map((l) => l.split(","));
}

let workDir: string;
let csvPath: string;
let server: ChildProcess;
let baseUrl: string;

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "rater-ui-"));
  const storeDir = join(workDir, "store");
  csvPath = join(workDir, "ratings.csv");

  mkdirSync(storeDir);
  const indexRows: string[] = [];
  for (const [sampleId, plan] of Object.entries(PLAN)) {
    makeWav(join(storeDir, `${sampleId}.wav`));
    indexRows.push(`${sampleId}\t${plan.category}\tkwglow\t${sampleId}.wav`);
  }
  writeFileSync(join(storeDir, "samples.tsv"), indexRows.join("\n") + "\n");

  server = spawn("python3", [
    "-m", "kwglow.cli", "serve",
    "--samples", storeDir,
    "--out", csvPath,
    "--port", "0",
    "--static", STATIC_DIR,
  ]);
  const line = await waitForOutput(server, /listening on http:\/\/127\.0\.0\.1:\d+\//);
  baseUrl = line.replace("listening on ", "").replace(/\/$/, "");
});

afterAll(() => {
  if (server && server.exitCode === null) server.kill();
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("scripted rater session", () => {
  it("rates all five samples once each and matches the hand-computed means", async () => {
    const api = new RaterApi(baseUrl);
    const player = new HttpProbePlayer(baseUrl);
    const ctl = new SessionController(api, player);

    await ctl.start("integration-rater");
    expect(ctl.view().phase).toBe("rating");
    expect(ctl.view().total).toBe(5);
    const sessionId = ctl.view().sessionId!;

    // play-before-rate: a submit attempt with no playback must not reach
    // the server, so the CSV still has zero data rows afterwards
    ctl.select(PLAN[ctl.view().sample!.sampleId].score);
    await ctl.submit();
    expect(ctl.view().error).toContain("listen");
    expect(ctl.view().position).toBe(1);
    expect(csvRows(csvPath)).toHaveLength(0);

    const served: string[] = [];
    let duplicateProbeDone = false;
    while (ctl.view().phase === "rating") {
      const sample = ctl.view().sample!;
      served.push(sample.sampleId);
      expect(sample.category).toBe(PLAN[sample.sampleId].category);

      await ctl.play();
      expect(ctl.view().played).toBe(true);
      ctl.select(PLAN[sample.sampleId].score);

      if (served.length === 2) {
        // double-click: the in-flight guard must collapse this to one POST
        await Promise.all([ctl.submit(), ctl.submit()]);
      } else {
        await ctl.submit();
      }
      expect(ctl.view().error).toBeNull();

      if (!duplicateProbeDone) {
        // server backstop: re-submitting a stored rating out of band is a 409
        const err = await api
          .submitRating(sessionId, sample.sampleId, 1)
          .catch((e) => e);
        expect(err).toBeInstanceOf(ApiError);
        expect((err as ApiError).status).toBe(409);
        duplicateProbeDone = true;
      }
    }

    // every sample exactly once, in whatever order the server shuffled
    expect(served.slice().sort()).toEqual(Object.keys(PLAN).sort());
    expect(player.playedUrls).toHaveLength(5);

    const done = ctl.view();
    expect(done.phase).toBe("done");
    expect(done.ratedCount).toBe(5);
    expect(done.meanScore).toBeCloseTo(21 / 5, 10);

    // exactly five rows server-side, one per sample, scores as planned
    const rows = csvRows(csvPath);
    expect(rows).toHaveLength(5);
    for (const row of rows) {
      const [rater, sampleId, category, modelId, score] = row;
      expect(rater).toBe("integration-rater");
      expect(category).toBe(PLAN[sampleId].category);
      expect(modelId).toBe("kwglow");
      expect(Number(score)).toBe(PLAN[sampleId].score);
    }
    expect(rows.map((r) => r[1]).sort()).toEqual(Object.keys(PLAN).sort());
  });

  it("mos over the produced CSV reproduces the hand-computed means", () => {
    const jsonPath = join(workDir, "report.json");
    const result = spawnSync("python3", [
      "-m", "kwglow.cli", "mos", "--ratings", csvPath, "--json", jsonPath,
    ], { encoding: "utf-8" });
    expect(result.status).toBe(0);

    const report = JSON.parse(readFileSync(jsonPath, "utf-8")).reports[0];
    expect(report.model_id).toBe("kwglow");
    expect(report.n_ratings).toBe(5);
    expect(report.per_category.news.n).toBe(3);
    expect(report.per_category.news.mean).toBeCloseTo(13 / 3, 10);
    expect(report.per_category.poetry.n).toBe(2);
    expect(report.per_category.poetry.mean).toBeCloseTo(4.0, 10);
    expect(report.overall_mean_of_categories).toBeCloseTo((13 / 3 + 4) / 2, 10);
    expect(report.overall_mean_of_ratings).toBeCloseTo(21 / 5, 10);

    // the same arithmetic straight off the plan, not just literals
    const scores = Object.values(PLAN).map((p) => p.score);
    const mean = scores.reduce((a, b) => a + b, 0) / scores.length;
    expect(report.overall_mean_of_ratings).toBeCloseTo(mean, 10);
  });

  it("serves the built UI next to the API", async () => {
    const page = await fetch(baseUrl + "/");
    expect(page.status).toBe(200);
    expect(page.headers.get("content-type")).toContain("text/html");
    expect(await page.text()).toContain("Listening test");

    const script = await fetch(baseUrl + "/js/main.js");
    expect(script.status).toBe(200);
    expect(script.headers.get("content-type")).toBe("text/javascript");
  });
});
