/** DOM wiring for the listening test.
 *
 * Everything renders from the controller's SessionView; the only local
 * persistence is the session id, so a refresh resumes at the server cursor.
 */
import { RaterApi } from "./api.js";
import { ElementPlayer } from "./player.js";
import { SCORE_LABELS, SessionController } from "./session.js";
const SESSION_KEY = "kwglow.session_id";
function el(id) {
    const node = document.getElementById(id);
    if (node === null)
        throw new Error(`missing element #${id}`);
    return node;
}
function show(node, visible) {
    node.classList.toggle("hidden", !visible);
}
function render(view) {
    show(el("start-screen"), view.phase === "idle" || view.phase === "failed");
    show(el("rating-screen"), view.phase === "rating" || view.phase === "loading");
    show(el("done-screen"), view.phase === "done");
    const error = el("error");
    error.textContent = view.error ?? "";
    show(error, view.error !== null);
    if (view.phase === "loading") {
        el("progress").textContent = "loading...";
        return;
    }
    if (view.phase === "rating" && view.sample !== null) {
        el("progress").textContent = `Sentence ${view.position} of ${view.total}`;
        el("category").textContent = view.sample.category;
        const play = el("play");
        play.disabled = view.playing;
        play.textContent = view.playing ? "Playing..." : view.played ? "Play again" : "Play";
        for (let score = 1; score <= 5; score++) {
            const radio = el(`score-${score}`);
            radio.checked = view.selected === score;
            radio.disabled = view.submitting;
        }
        const submit = el("submit");
        submit.disabled = !view.canSubmit;
        submit.title = view.played ? "" : "listen to the clip first";
    }
    if (view.phase === "done") {
        const mean = view.meanScore === null ? "-" : view.meanScore.toFixed(2);
        el("done-summary").textContent =
            `You rated ${view.ratedCount} sentences. Your mean score: ${mean}.`;
        sessionStorage.removeItem(SESSION_KEY);
    }
    if (view.sessionId !== null && view.phase === "rating") {
        sessionStorage.setItem(SESSION_KEY, view.sessionId);
    }
}
function buildScoreRow() {
    const row = el("scores");
    SCORE_LABELS.forEach((label, i) => {
        const score = i + 1;
        const wrap = document.createElement("label");
        wrap.className = "score-choice";
        const radio = document.createElement("input");
        radio.type = "radio";
        radio.name = "score";
        radio.id = `score-${score}`;
        radio.value = String(score);
        radio.addEventListener("change", () => controller.select(score));
        const text = document.createElement("span");
        text.textContent = `${score} ${label}`;
        wrap.append(radio, text);
        row.append(wrap);
    });
}
const api = new RaterApi("");
const controller = new SessionController(api, new ElementPlayer(), render);
function boot() {
    buildScoreRow();
    el("start-form").addEventListener("submit", (event) => {
        event.preventDefault();
        const name = el("rater-name").value.trim();
        if (name)
            void controller.start(name);
    });
    el("play").addEventListener("click", () => void controller.play());
    el("submit").addEventListener("click", () => void controller.submit());
    const existing = sessionStorage.getItem(SESSION_KEY);
    if (existing) {
        void controller.resume(existing);
    }
    else {
        render(controller.view());
    }
}
boot();
//# sourceMappingURL=main.js.map