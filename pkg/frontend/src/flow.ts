import {
  type Answer,
  ApiClient,
  ApiError,
  type HistoryEntry,
  type Question,
  type RecommendedItem,
  type SessionState,
} from "./api.js";

export type Phase = "idle" | "interviewing" | "finished" | "error";

export interface UiSessionState {
  phase: Phase;
  sessionId: string | null;
  question: Question | null;
  answered: number;
  maxQuestions: number;
  history: HistoryEntry[];
  results: RecommendedItem[];
  error: string | null;
  busy: boolean;
}

export type UiAction =
  | { type: "start" }
  | { type: "answer"; answer: Answer }
  | { type: "restart" };

function initialState(): UiSessionState {
  return {
    phase: "idle",
    sessionId: null,
    question: null,
    answered: 0,
    maxQuestions: 0,
    history: [],
    results: [],
    error: null,
    busy: false,
  };
}

/**
 * Interview state machine, DOM-free.
 *
 * Holds exactly what the server last acknowledged plus request plumbing:
 * one request at a time (`busy` gates the answer buttons), and a restart
 * supersedes any in-flight request, whose late response is then dropped.
 * Every accepted user action lands in `actionLog`, so the final state is
 * reproducible by replaying the log against a fresh session.
 */
export class InterviewFlow {
  private state = initialState();
  private listeners: Array<(s: UiSessionState) => void> = [];
  private epoch = 0;
  readonly actionLog: UiAction[] = [];

  constructor(
    private readonly api: ApiClient,
    readonly k: number = 5,
  ) {}

  getState(): UiSessionState {
    return this.state;
  }

  subscribe(fn: (s: UiSessionState) => void): void {
    this.listeners.push(fn);
  }

  private set(partial: Partial<UiSessionState>): void {
    this.state = { ...this.state, ...partial };
    for (const fn of this.listeners) fn(this.state);
  }

  private fromSession(s: SessionState): Partial<UiSessionState> {
    return {
      sessionId: s.session_id,
      question: s.question,
      answered: s.answered,
      maxQuestions: s.max_questions,
      history: s.history,
      phase: s.finished ? "finished" : "interviewing",
    };
  }

  /** Open a new session; used for both first load and the retry banner. */
  async start(): Promise<void> {
    if (this.state.busy) return;
    this.actionLog.push({ type: "start" });
    await this.openSession();
  }

  /**
   * Drop the current session and open a fresh one. Unlike answers, a
   * restart is accepted while a request is in flight; the superseded
   * response is discarded by the epoch check.
   */
  async restart(): Promise<void> {
    this.actionLog.push({ type: "restart" });
    await this.openSession();
  }

  private async openSession(): Promise<void> {
    const epoch = ++this.epoch;
    this.set({ ...initialState(), busy: true });
    try {
      const session = await this.api.startSession();
      if (epoch !== this.epoch) return;
      this.set(this.fromSession(session));
      if (session.finished) {
        await this.loadResults(epoch, session.session_id);
      }
    } catch (err) {
      if (epoch !== this.epoch) return;
      this.set({ phase: "error", error: describe(err) });
    } finally {
      if (epoch === this.epoch) this.set({ busy: false });
    }
  }

  /** Submit one answer; ignored while busy or outside the interview. */
  async answer(answer: Answer): Promise<void> {
    if (this.state.busy || this.state.phase !== "interviewing") return;
    const sessionId = this.state.sessionId;
    if (sessionId === null) return;
    this.actionLog.push({ type: "answer", answer });
    const epoch = this.epoch;
    this.set({ busy: true });
    try {
      let session: SessionState;
      try {
        session = await this.api.postAnswer(sessionId, answer, this.state.answered);
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          // Lost a race; the server state is authoritative.
          session = await this.api.getSession(sessionId);
        } else {
          throw err;
        }
      }
      if (epoch !== this.epoch) return;
      this.set(this.fromSession(session));
      if (session.finished) {
        await this.loadResults(epoch, sessionId);
      }
    } catch (err) {
      if (epoch !== this.epoch) return;
      this.set({ phase: "error", error: describe(err) });
    } finally {
      if (epoch === this.epoch) this.set({ busy: false });
    }
  }

  private async loadResults(epoch: number, sessionId: string): Promise<void> {
    const res = await this.api.getRecommendations(sessionId, this.k);
    if (epoch !== this.epoch) return;
    this.set({ results: res.items, phase: "finished" });
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  if (err instanceof Error) return `service unreachable: ${err.message}`;
  return "service unreachable";
}

/** Re-run an action log against a fresh session and return the end state. */
export async function replayActions(
  api: ApiClient,
  log: readonly UiAction[],
  k: number = 5,
): Promise<UiSessionState> {
  const flow = new InterviewFlow(api, k);
  for (const action of log) {
    if (action.type === "start") await flow.start();
    else if (action.type === "restart") await flow.restart();
    else await flow.answer(action.answer);
  }
  return flow.getState();
}

/** The session-independent view of a state, for replay comparisons. */
export function comparable(state: UiSessionState): Omit<UiSessionState, "sessionId"> {
  const { sessionId: _sessionId, ...rest } = state;
  return rest;
}
