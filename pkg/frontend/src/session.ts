/** Listening-session state machine, kept free of DOM so it can run scripted.
 *
 * Rules enforced here rather than in the markup:
 *  - a score cannot be submitted until the current clip has played to the
 *    end at least once (the played flag resets on every advance)
 *  - one rating per sample reaches the server: a submit in flight blocks
 *    further submits, and a duplicate reply counts as already stored
 *  - the client only ever requests audio URLs the server handed it
 */

import { ApiError, NextPayload, SessionOpened, isDone } from "./api.js";

export const SCORE_LABELS = ["Bad", "Poor", "Fair", "Good", "Excellent"];

/** What the controller needs from the HTTP client (RaterApi satisfies it). */
export interface SessionApi {
  openSession(raterId: string): Promise<SessionOpened>;
  nextSample(sessionId: string): Promise<NextPayload>;
  submitRating(sessionId: string, sampleId: string, score: number): Promise<void>;
}

/** Resolves once playback of the clip has finished. */
export interface AudioPlayer {
  play(url: string): Promise<void>;
}

export interface CurrentSample {
  sampleId: string;
  category: string;
  audioUrl: string;
}

export type Phase = "idle" | "loading" | "rating" | "done" | "failed";

export interface SessionView {
  phase: Phase;
  sessionId: string | null;
  sample: CurrentSample | null;
  position: number;
  total: number;
  played: boolean;
  playing: boolean;
  selected: number | null;
  submitting: boolean;
  canSubmit: boolean;
  error: string | null;
  ratedCount: number;
  meanScore: number | null;
}

export class SessionController {
  private api: SessionApi;
  private player: AudioPlayer;
  private onChange: (view: SessionView) => void;

  private phase: Phase = "idle";
  private sessionId: string | null = null;
  private sample: CurrentSample | null = null;
  private position = 0;
  private total = 0;
  private played = false;
  private playing = false;
  private selected: number | null = null;
  private submitting = false;
  private error: string | null = null;
  private ratedCount = 0;
  private meanScore: number | null = null;

  constructor(api: SessionApi, player: AudioPlayer, onChange?: (view: SessionView) => void) {
    this.api = api;
    this.player = player;
    this.onChange = onChange ?? (() => undefined);
  }

  view(): SessionView {
    return {
      phase: this.phase,
      sessionId: this.sessionId,
      sample: this.sample,
      position: this.position,
      total: this.total,
      played: this.played,
      playing: this.playing,
      selected: this.selected,
      submitting: this.submitting,
      canSubmit: this.phase === "rating" && this.played
        && this.selected !== null && !this.submitting,
      error: this.error,
      ratedCount: this.ratedCount,
      meanScore: this.meanScore,
    };
  }

  private notify(): void {
    this.onChange(this.view());
  }

  async start(raterId: string): Promise<void> {
    this.phase = "loading";
    this.error = null;
    this.notify();
    try {
      const opened = await this.api.openSession(raterId);
      this.sessionId = opened.session_id;
      await this.advance();
    } catch (err) {
      this.fail(err, "could not start the session");
    }
  }

  /** Re-enter an existing session; the server cursor decides where we are. */
  async resume(sessionId: string): Promise<void> {
    this.phase = "loading";
    this.sessionId = sessionId;
    this.error = null;
    this.notify();
    try {
      await this.advance();
    } catch (err) {
      this.fail(err, "could not resume the session");
    }
  }

  private async advance(): Promise<void> {
    if (this.sessionId === null) throw new Error("no session");
    const payload = await this.api.nextSample(this.sessionId);
    if (isDone(payload)) {
      this.phase = "done";
      this.sample = null;
      this.ratedCount = payload.rated;
      this.meanScore = payload.mean_score;
    } else {
      this.phase = "rating";
      this.sample = {
        sampleId: payload.sample_id,
        category: payload.category,
        audioUrl: payload.audio_url,
      };
      this.position = payload.position;
      this.total = payload.total;
      this.played = false;
      this.selected = null;
    }
    this.notify();
  }

  async play(): Promise<void> {
    if (this.phase !== "rating" || this.sample === null || this.playing) return;
    this.playing = true;
    this.error = null;
    this.notify();
    try {
      await this.player.play(this.sample.audioUrl);
      this.played = true;
    } catch (err) {
      this.error = `playback failed: ${describe(err)}`;
    } finally {
      this.playing = false;
      this.notify();
    }
  }

  select(score: number): void {
    if (this.phase !== "rating") return;
    if (!Number.isInteger(score) || score < 1 || score > 5) return;
    this.selected = score;
    this.notify();
  }

  async submit(): Promise<void> {
    if (this.phase !== "rating" || this.sample === null || this.submitting) return;
    if (!this.played) {
      this.error = "listen to the clip before rating it";
      this.notify();
      return;
    }
    if (this.selected === null) {
      this.error = "pick a score first";
      this.notify();
      return;
    }
    this.submitting = true;
    this.error = null;
    this.notify();
    try {
      await this.api.submitRating(this.sessionId!, this.sample.sampleId, this.selected);
      this.submitting = false;
      await this.advance();
    } catch (err) {
      this.submitting = false;
      if (err instanceof ApiError && err.status === 409) {
        // already stored server-side (e.g. a second tab); just move on
        try {
          await this.advance();
        } catch (nextErr) {
          this.error = describe(nextErr);
          this.notify();
        }
        return;
      }
      this.error = describe(err);
      this.notify();
    }
  }

  private fail(err: unknown, context: string): void {
    this.phase = "failed";
    this.error = `${context}: ${describe(err)}`;
    this.notify();
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  if (err instanceof Error) return err.message;
  return String(err);
}
