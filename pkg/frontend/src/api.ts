/** Typed client for the listening-test HTTP API.
 *
 * The server is the source of truth for session state; this module only
 * shapes requests and narrows responses. All methods reject with ApiError
 * for non-2xx replies and let transport failures (fetch rejections) bubble.
 */

export interface SessionOpened {
  session_id: string;
  position: number;
  total: number;
}

export interface NextSample {
  sample_id: string;
  category: string;
  audio_url: string;
  position: number;
  total: number;
}

export interface SessionDone {
  done: true;
  rated: number;
  mean_score: number | null;
}

export type NextPayload = NextSample | SessionDone;

export function isDone(payload: NextPayload): payload is SessionDone {
  return (payload as SessionDone).done === true;
}

export class ApiError extends Error {
  status: number;

  constructor(status: number, message: string) {
    super(message);
    this.name = "ApiError";
    this.status = status;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function asJson(response: Response): Promise<any> {
  const text = await response.text();
  let payload: any = null;
  try {
    payload = text ? JSON.parse(text) : null;
  } catch {
    // fall through; a non-JSON error page still becomes an ApiError below
  }
  if (!response.ok) {
    const detail = payload && payload.error ? payload.error : `HTTP ${response.status}`;
    throw new ApiError(response.status, detail);
  }
  if (payload === null || typeof payload !== "object") {
    throw new ApiError(response.status, "malformed response body");
  }
  return payload;
}

export class RaterApi {
  private baseUrl: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.fetchImpl(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async openSession(raterId: string): Promise<SessionOpened> {
    const payload = await asJson(await this.post("/api/session", { rater_id: raterId }));
    return payload as SessionOpened;
  }

  async nextSample(sessionId: string): Promise<NextPayload> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/api/session/${encodeURIComponent(sessionId)}/next`);
    return (await asJson(response)) as NextPayload;
  }

  /** Resolves only when the server confirms the rating was stored. */
  async submitRating(sessionId: string, sampleId: string, score: number): Promise<void> {
    const payload = await asJson(await this.post(
      `/api/session/${encodeURIComponent(sessionId)}/rating`,
      { sample_id: sampleId, score }));
    if (payload.accepted !== true) {
      throw new ApiError(200, "server did not accept the rating");
    }
  }

  /** Audio URLs come verbatim from next-sample payloads; never constructed here. */
  audioUrl(relative: string): string {
    return this.baseUrl + relative;
  }
}
