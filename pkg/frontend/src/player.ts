/** Audio playback through a single hidden <audio> element.
 *
 * play() resolves on the element's ended event, so a clip only counts as
 * played once it has run to completion; pausing or seeking never resolves.
 */

import { AudioPlayer } from "./session.js";

export class ElementPlayer implements AudioPlayer {
  private element: HTMLAudioElement;

  constructor(element?: HTMLAudioElement) {
    this.element = element ?? new Audio();
    this.element.preload = "auto";
  }

  play(url: string): Promise<void> {
    const el = this.element;
    return new Promise((resolve, reject) => {
      const cleanup = () => {
        el.removeEventListener("ended", onEnded);
        el.removeEventListener("error", onError);
      };
      const onEnded = () => {
        cleanup();
        resolve();
      };
      const onError = () => {
        cleanup();
        reject(new Error(`cannot play ${url}`));
      };
      el.addEventListener("ended", onEnded);
      el.addEventListener("error", onError);
      el.src = url;
      el.play().catch((err) => {
        cleanup();
        reject(err);
      });
    });
  }
}
