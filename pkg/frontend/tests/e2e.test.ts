import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, type Answer, type HealthInfo, type RecommendationsResponse } from "../src/api.js";
import { comparable, replayActions } from "../src/flow.js";
import { mountApp } from "../src/main.js";

const REPO_ROOT = resolve(process.cwd(), "..");
const BASE = "http://127.0.0.1:8841";

let workDir: string;
let server: ChildProcess;

async function until(cond: () => boolean, ms = 20_000): Promise<void> {
  const t0 = Date.now();
  while (!cond()) {
    if (Date.now() - t0 > ms) throw new Error("condition timed out");
    await new Promise((resolve) => setTimeout(resolve, 25));
  }
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "interview-ui-e2e-"));
  execFileSync("python3", [join(REPO_ROOT, "scripts", "make_demo_model.py"), "--dir", workDir], {
    cwd: REPO_ROOT,
    stdio: "ignore",
  });
  server = spawn(
    "python3",
    [
      "-m",
      "factree.cli",
      "serve",
      "--model",
      join(workDir, "model.json"),
      "--data",
      join(workDir, "reviews.jsonl"),
      "--bind",
      "127.0.0.1:8841",
    ],
    { cwd: REPO_ROOT, stdio: "ignore" },
  );
  const t0 = Date.now();
  for (;;) {
    try {
      const res = await fetch(`${BASE}/api/health`);
      if (res.ok) break;
    } catch {
      // not up yet
    }
    if (Date.now() - t0 > 60_000) throw new Error("service did not come up");
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
});

afterAll(() => {
  server?.kill();
  rmSync(workDir, { recursive: true, force: true });
});

function freshRoot(): HTMLElement {
  const root = document.createElement("div");
  root.id = "app";
  document.body.replaceChildren(root);
  return root;
}

describe("live interview session", () => {
  it("walks the interview and renders the server's answers verbatim", async () => {
    const root = freshRoot();
    const flow = mountApp(root, new ApiClient(BASE));
    await until(() => flow.getState().phase === "interviewing" && !flow.getState().busy);

    const health = (await (await fetch(`${BASE}/api/health`)).json()) as HealthInfo;
    expect(flow.getState().maxQuestions).toBe(health.max_questions);
    expect(root.querySelector(".prompt")?.textContent).toBe(
      flow.getState().question?.prompt,
    );

    const script: Answer[] = ["like", "unknown", "dislike"];
    let clicks = 0;
    while (flow.getState().phase === "interviewing") {
      const answer = script[clicks % script.length];
      const before = flow.getState().answered;
      const btn = root.querySelector<HTMLButtonElement>(`[data-answer="${answer}"]`);
      expect(btn).not.toBeNull();
      expect(btn!.disabled).toBe(false);
      btn!.click();
      clicks += 1;
      await until(
        () =>
          !flow.getState().busy &&
          (flow.getState().answered > before || flow.getState().phase !== "interviewing"),
      );
    }

    const state = flow.getState();
    expect(state.phase).toBe("finished");
    expect(state.answered).toBe(clicks);
    expect(state.history).toHaveLength(clicks);
    expect(state.results).toHaveLength(5);
    expect(root.querySelector(".progress-label")?.textContent).toBe(
      `${state.answered} / ${state.maxQuestions} questions`,
    );

    const direct = (await (
      await fetch(`${BASE}/api/sessions/${state.sessionId}/recommendations?k=5`)
    ).json()) as RecommendationsResponse;
    expect(state.results).toEqual(direct.items);

    const renderedNames = [...root.querySelectorAll(".item-name")].map((n) => n.textContent);
    const renderedWhy = [...root.querySelectorAll(".explanation")].map((n) => n.textContent);
    expect(renderedNames).toEqual(direct.items.map((i) => i.item));
    expect(renderedWhy).toEqual(direct.items.map((i) => i.explanation));

    const replayed = await replayActions(new ApiClient(BASE), flow.actionLog, 5);
    expect(replayed.sessionId).not.toBe(state.sessionId);
    expect(comparable(replayed)).toEqual(comparable(state));
  });

  it("restarts into a fresh root question", async () => {
    const root = freshRoot();
    const flow = mountApp(root, new ApiClient(BASE));
    await until(() => flow.getState().phase === "interviewing" && !flow.getState().busy);
    const firstPrompt = flow.getState().question?.prompt;

    root.querySelector<HTMLButtonElement>('[data-answer="like"]')!.click();
    await until(() => flow.getState().answered === 1 && !flow.getState().busy);

    root.querySelector<HTMLButtonElement>(".restart")!.click();
    await until(
      () => flow.getState().answered === 0 && !flow.getState().busy && flow.getState().phase === "interviewing",
    );
    expect(flow.getState().question?.prompt).toBe(firstPrompt);
    expect(flow.getState().history).toEqual([]);
  });

  it("keeps two mounted sessions independent", async () => {
    const rootA = document.createElement("div");
    const rootB = document.createElement("div");
    document.body.replaceChildren(rootA, rootB);
    const flowA = mountApp(rootA, new ApiClient(BASE));
    const flowB = mountApp(rootB, new ApiClient(BASE));
    await until(() => flowA.getState().phase === "interviewing" && !flowA.getState().busy);
    await until(() => flowB.getState().phase === "interviewing" && !flowB.getState().busy);

    expect(flowA.getState().sessionId).not.toBe(flowB.getState().sessionId);

    rootA.querySelector<HTMLButtonElement>('[data-answer="dislike"]')!.click();
    await until(() => flowA.getState().answered === 1 && !flowA.getState().busy);
    expect(flowB.getState().answered).toBe(0);
  });
});
