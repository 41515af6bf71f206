/** Typed client for the listening-test HTTP API.
 *
 * The server is the source of truth for session state; this module only
 * shapes requests and narrows responses. All methods reject with ApiError
 * for non-2xx replies and let transport failures (fetch rejections) bubble.
 */
export function isDone(payload) {
    return payload.done === true;
}
export class ApiError extends Error {
    constructor(status, message) {
        super(message);
        this.name = "ApiError";
        this.status = status;
    }
}
async function asJson(response) {
    const text = await response.text();
    let payload = null;
    try {
        payload = text ? JSON.parse(text) : null;
    }
    catch {
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
    constructor(baseUrl = "", fetchImpl) {
        this.baseUrl = baseUrl.replace(/\/$/, "");
        this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
    }
    post(path, body) {
        return this.fetchImpl(this.baseUrl + path, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify(body),
        });
    }
    async openSession(raterId) {
        const payload = await asJson(await this.post("/api/session", { rater_id: raterId }));
        return payload;
    }
    async nextSample(sessionId) {
        const response = await this.fetchImpl(`${this.baseUrl}/api/session/${encodeURIComponent(sessionId)}/next`);
        return (await asJson(response));
    }
    /** Resolves only when the server confirms the rating was stored. */
    async submitRating(sessionId, sampleId, score) {
        const payload = await asJson(await this.post(`/api/session/${encodeURIComponent(sessionId)}/rating`, { sample_id: sampleId, score }));
        if (payload.accepted !== true) {
            throw new ApiError(200, "server did not accept the rating");
        }
    }
    /** Audio URLs come verbatim from next-sample payloads; never constructed here. */
    audioUrl(relative) {
        return this.baseUrl + relative;
    }
}
//# sourceMappingURL=api.js.map