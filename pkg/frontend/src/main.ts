import { type Answer, ApiClient } from "./api.js";
import { InterviewFlow, type UiSessionState } from "./flow.js";

const ANSWER_BUTTONS: Array<{ answer: Answer; label: string }> = [
  { answer: "like", label: "Like" },
  { answer: "dislike", label: "Dislike" },
  { answer: "unknown", label: "Not sure" },
];

/** Build the app skeleton under `root`, start an interview, return the flow. */
export function mountApp(root: HTMLElement, api: ApiClient = new ApiClient()): InterviewFlow {
  const flow = new InterviewFlow(api, 5);

  const header = document.createElement("header");
  const title = document.createElement("h1");
  title.textContent = "Find something you'll like";
  header.appendChild(title);

  const progress = document.createElement("div");
  progress.className = "progress";
  const progressFill = document.createElement("div");
  progressFill.className = "progress-fill";
  progress.appendChild(progressFill);
  const progressLabel = document.createElement("span");
  progressLabel.className = "progress-label";

  const banner = document.createElement("div");
  banner.className = "banner";
  banner.hidden = true;
  const bannerText = document.createElement("span");
  const retry = document.createElement("button");
  retry.textContent = "Retry";
  retry.addEventListener("click", () => void flow.start());
  banner.append(bannerText, retry);

  const card = document.createElement("section");
  card.className = "card";
  const prompt = document.createElement("p");
  prompt.className = "prompt";
  const buttonRow = document.createElement("div");
  buttonRow.className = "answers";
  const answerButtons: HTMLButtonElement[] = [];
  for (const { answer, label } of ANSWER_BUTTONS) {
    const btn = document.createElement("button");
    btn.textContent = label;
    btn.dataset.answer = answer;
    btn.addEventListener("click", () => void flow.answer(answer));
    answerButtons.push(btn);
    buttonRow.appendChild(btn);
  }
  card.append(prompt, buttonRow);

  const results = document.createElement("section");
  results.className = "results";
  const resultsTitle = document.createElement("h2");
  resultsTitle.textContent = "Recommended for you";
  const resultsList = document.createElement("ol");
  results.append(resultsTitle, resultsList);

  const restart = document.createElement("button");
  restart.className = "restart";
  restart.textContent = "Start over";
  restart.addEventListener("click", () => void flow.restart());

  root.replaceChildren(header, progress, progressLabel, banner, card, results, restart);

  function render(state: UiSessionState): void {
    const pct =
      state.maxQuestions > 0
        ? Math.min(100, (100 * state.answered) / state.maxQuestions)
        : 0;
    progressFill.style.width = `${pct}%`;
    progressLabel.textContent = `${state.answered} / ${state.maxQuestions} questions`;

    banner.hidden = state.phase !== "error";
    bannerText.textContent = state.error ?? "";

    card.hidden = state.phase !== "interviewing";
    prompt.textContent = state.question?.prompt ?? "";
    for (const btn of answerButtons) {
      btn.disabled = state.busy || state.phase !== "interviewing";
    }

    results.hidden = state.phase !== "finished";
    resultsList.replaceChildren(
      ...state.results.map((item) => {
        const li = document.createElement("li");
        const name = document.createElement("strong");
        name.className = "item-name";
        name.textContent = item.item;
        const score = document.createElement("span");
        score.className = "item-score";
        score.textContent = item.score.toFixed(2);
        const why = document.createElement("p");
        why.className = "explanation";
        why.textContent = item.explanation;
        li.append(name, score, why);
        return li;
      }),
    );
  }

  flow.subscribe(render);
  render(flow.getState());
  void flow.start();
  return flow;
}

const appRoot = typeof document === "undefined" ? null : document.getElementById("app");
if (appRoot) {
  mountApp(appRoot);
}
