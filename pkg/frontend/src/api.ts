export type Answer = "like" | "dislike" | "unknown";

export interface Question {
  feature: string;
  prompt: string;
}

export interface HistoryEntry {
  feature: string;
  answer: Answer;
}

export interface SessionState {
  session_id: string;
  finished: boolean;
  answered: number;
  max_questions: number;
  question: Question | null;
  history: HistoryEntry[];
}

export interface RecommendedItem {
  item: string;
  score: number;
  explanation: string;
  features: string[];
}

export interface RecommendationsResponse {
  session_id: string;
  items: RecommendedItem[];
}

export interface HealthInfo {
  status: string;
  users: number;
  items: number;
  features: number;
  d: number;
  max_questions: number;
  user_tree_depth: number;
  item_tree_depth: number;
  version: number;
  sessions: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const res = await fetch(url, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  if (!res.ok) {
    let code = "http_error";
    let message = `${res.status} ${res.statusText}`;
    try {
      const body = (await res.json()) as { error?: string; message?: string };
      if (body.error) code = body.error;
      if (body.message) message = body.message;
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(res.status, code, message);
  }
  return (await res.json()) as T;
}

/** Thin typed wrapper over the service JSON endpoints. */
export class ApiClient {
  constructor(private readonly base: string = "") {}

  startSession(): Promise<SessionState> {
    return request<SessionState>(`${this.base}/api/sessions`, { method: "POST" });
  }

  getSession(sessionId: string): Promise<SessionState> {
    return request<SessionState>(`${this.base}/api/sessions/${sessionId}`);
  }

  postAnswer(sessionId: string, answer: Answer, step: number): Promise<SessionState> {
    return request<SessionState>(`${this.base}/api/sessions/${sessionId}/answer`, {
      method: "POST",
      body: JSON.stringify({ answer, step }),
    });
  }

  getRecommendations(sessionId: string, k: number): Promise<RecommendationsResponse> {
    return request<RecommendationsResponse>(
      `${this.base}/api/sessions/${sessionId}/recommendations?k=${k}`,
    );
  }

  health(): Promise<HealthInfo> {
    return request<HealthInfo>(`${this.base}/api/health`);
  }
}
