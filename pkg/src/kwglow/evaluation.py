"""MOS computation, rating persistence, and the listening-test service.

Ratings live in an append-only CSV; replaying that file through
ingest_ratings reconstructs service state exactly, which is also how a
restarted service resumes half-finished sessions. Two "overall" statistics
are reported because category-mean-of-means and plain rating mean answer
different questions; both appear in every report.
"""

import csv
import hashlib
import io
import json
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .errors import (
    DuplicateId,
    DuplicateRating,
    EmptyScores,
    IoFailure,
    ParseError,
    ScoreOutOfRange,
)

RATINGS_HEADER = ["rater_id", "sample_id", "category", "model_id", "score", "timestamp"]


@dataclass(frozen=True)
class RatingRecord:
    rater_id: str
    sample_id: str
    category: str
    model_id: str
    score: int
    timestamp: float

    def key(self) -> tuple[str, str, str]:
        return (self.rater_id, self.sample_id, self.model_id)


def _check_score(score, where: str = "") -> int:
    if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 5:
        raise ScoreOutOfRange(f"{where}score must be an integer in 1..5, got {score!r}")
    return score


def mos(scores) -> float:
    """Plain arithmetic mean of 1..5 integer scores."""
    scores = list(scores)
    if not scores:
        raise EmptyScores("mos of an empty score list")
    for s in scores:
        _check_score(s)
    return sum(scores) / len(scores)


@dataclass
class CategoryStat:
    mean: float
    n: int


@dataclass
class MosReport:
    model_id: str
    per_category: dict[str, CategoryStat]
    overall_mean_of_categories: float
    overall_mean_of_ratings: float
    n_ratings: int

    def to_mapping(self) -> dict:
        return {
            "model_id": self.model_id,
            "per_category": {c: {"mean": s.mean, "n": s.n}
                             for c, s in self.per_category.items()},
            "overall_mean_of_categories": self.overall_mean_of_categories,
            "overall_mean_of_ratings": self.overall_mean_of_ratings,
            "n_ratings": self.n_ratings,
        }

    def to_text(self) -> str:
        lines = [f"model\t{self.model_id}"]
        for cat in sorted(self.per_category):
            stat = self.per_category[cat]
            lines.append(f"{cat}\t{stat.mean:.2f}\t(n={stat.n})")
        lines.append(f"overall_mean_of_categories\t{self.overall_mean_of_categories:.4f}")
        lines.append(f"overall_mean_of_ratings\t{self.overall_mean_of_ratings:.4f}")
        lines.append(f"n_ratings\t{self.n_ratings}")
        return "\n".join(lines) + "\n"


def category_report(ratings, model_id: str) -> MosReport:
    """Per-category means plus both overall statistics for one model."""
    mine = [r for r in ratings if r.model_id == model_id]
    if not mine:
        raise EmptyScores(f"no ratings for model {model_id!r}")
    by_cat: dict[str, list[int]] = {}
    for r in mine:
        by_cat.setdefault(r.category, []).append(_check_score(r.score))
    per_category = {c: CategoryStat(mos(scores), len(scores))
                    for c, scores in sorted(by_cat.items())}
    cat_means = [s.mean for s in per_category.values()]
    return MosReport(
        model_id=model_id,
        per_category=per_category,
        overall_mean_of_categories=sum(cat_means) / len(cat_means),
        overall_mean_of_ratings=mos([r.score for r in mine]),
        n_ratings=len(mine),
    )


@dataclass
class ComparisonTable:
    models: list[str]
    categories: list[str]
    cells: dict[str, list[float | None]]   # category -> one mean per model
    overall: list[float]

    def to_mapping(self) -> dict:
        return {"models": self.models, "categories": self.categories,
                "cells": self.cells, "overall_mean_of_categories": self.overall}

    def to_text(self) -> str:
        lines = ["\t".join(["category"] + self.models)]
        for cat in self.categories:
            row = [cat] + ["-" if m is None else f"{m:.2f}" for m in self.cells[cat]]
            lines.append("\t".join(row))
        lines.append("\t".join(["overall_mean_of_categories"]
                               + [f"{m:.4f}" for m in self.overall]))
        return "\n".join(lines) + "\n"


def compare_models(reports: list[MosReport]) -> ComparisonTable:
    """Category x model matrix; column order follows input order."""
    categories: list[str] = []
    for report in reports:
        for cat in report.per_category:
            if cat not in categories:
                categories.append(cat)
    cells = {cat: [(r.per_category[cat].mean if cat in r.per_category else None)
                   for r in reports]
             for cat in categories}
    return ComparisonTable(
        models=[r.model_id for r in reports],
        categories=categories,
        cells=cells,
        overall=[r.overall_mean_of_categories for r in reports],
    )


# --- ratings CSV ---

def _parse_rating_row(row: list[str], lineno: int, where: str) -> RatingRecord:
    if len(row) != 6:
        raise ParseError(f"{where}:{lineno}: expected 6 columns, got {len(row)}")
    rater_id, sample_id, category, model_id, score_s, ts_s = row
    try:
        score = int(score_s)
        timestamp = float(ts_s)
    except ValueError as exc:
        raise ParseError(f"{where}:{lineno}: bad score/timestamp: {exc}") from exc
    _check_score(score, f"{where}:{lineno}: ")
    if not rater_id or not sample_id or not model_id:
        raise ParseError(f"{where}:{lineno}: empty key field")
    return RatingRecord(rater_id, sample_id, category, model_id, score, timestamp)


def ingest_ratings(path) -> list[RatingRecord]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read ratings {path}: {exc}") from exc
    if not rows or rows[0] != RATINGS_HEADER:
        raise ParseError(f"{path}:1: expected header {','.join(RATINGS_HEADER)}")
    records = []
    seen: dict[tuple, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        rec = _parse_rating_row(row, lineno, str(path))
        if rec.key() in seen:
            raise DuplicateRating(
                f"{path}:{lineno}: duplicate rating for {rec.key()} "
                f"(first on line {seen[rec.key()]})")
        seen[rec.key()] = lineno
        records.append(rec)
    return records


def _format_rating_row(rec: RatingRecord) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(
        [rec.rater_id, rec.sample_id, rec.category, rec.model_id,
         rec.score, repr(rec.timestamp)])
    return buf.getvalue()


def export_ratings(records, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(RATINGS_HEADER) + "\n")
            for rec in records:
                fh.write(_format_rating_row(rec))
    except OSError as exc:
        raise IoFailure(f"cannot write ratings {path}: {exc}") from exc


# --- sample store ---

@dataclass(frozen=True)
class SampleInfo:
    sample_id: str
    category: str
    model_id: str
    wav_path: str


def load_sample_store(directory) -> list[SampleInfo]:
    """Reads <dir>/samples.tsv: sample_id, category, model_id, wav filename
    (relative paths resolve against the directory)."""
    index = os.path.join(directory, "samples.tsv")
    try:
        with open(index, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise IoFailure(f"cannot read sample store {index}: {exc}") from exc
    samples = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"{index}:{lineno}: expected 4 tab-separated fields")
        sample_id, category, model_id, wav_path = parts
        if not sample_id or not category or not model_id or not wav_path:
            raise ParseError(f"{index}:{lineno}: empty field")
        if sample_id in seen:
            raise DuplicateId(f"{index}:{lineno}: sample {sample_id!r} already "
                              f"listed on line {seen[sample_id]}")
        seen[sample_id] = lineno
        if not os.path.isabs(wav_path):
            wav_path = os.path.join(directory, wav_path)
        samples.append(SampleInfo(sample_id, category, model_id, wav_path))
    return samples


# --- listening-test service ---

@dataclass
class ListeningSession:
    session_id: str
    rater_id: str
    queue: list[SampleInfo]
    cursor: int = 0

    @property
    def completed(self) -> bool:
        return self.cursor >= len(self.queue)


def _session_id_for(rater_id: str) -> str:
    return hashlib.sha256(f"rater:{rater_id}".encode()).hexdigest()[:16]


def _shuffle_for(rater_id: str, seed: int, n: int) -> list[int]:
    digest = hashlib.sha256(f"{seed}:{rater_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.permutation(n).tolist()


class ListeningService:
    """State machine behind the HTTP endpoints; also usable directly in tests.

    All mutation goes through one lock; every accepted rating is flushed and
    fsynced to the CSV before the caller gets its response.
    """

    def __init__(self, samples: list[SampleInfo], ratings_path, seed: int = 0):
        self.samples = list(samples)
        self.by_id = {s.sample_id: s for s in self.samples}
        if len(self.by_id) != len(self.samples):
            raise DuplicateId("duplicate sample ids in the store")
        self.ratings_path = str(ratings_path)
        self.seed = seed
        self.lock = threading.Lock()
        self.sessions: dict[str, ListeningSession] = {}
        if os.path.exists(self.ratings_path) and os.path.getsize(self.ratings_path):
            self.ratings = ingest_ratings(self.ratings_path)
        else:
            self.ratings = []
            with open(self.ratings_path, "w", encoding="utf-8") as fh:
                fh.write(",".join(RATINGS_HEADER) + "\n")
        self.keys = {r.key() for r in self.ratings}
        self._fh = open(self.ratings_path, "a", encoding="utf-8")

    def close(self) -> None:
        with self.lock:
            if self._fh.closed:
                return
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    # session plumbing. session ids are stable per rater so a restarted
    # service (or reloaded page) resumes where the ratings file says.
    def open_session(self, rater_id: str) -> ListeningSession:
        with self.lock:
            sid = _session_id_for(rater_id)
            session = self.sessions.get(sid)
            if session is None:
                order = _shuffle_for(rater_id, self.seed, len(self.samples))
                session = ListeningSession(sid, rater_id, [self.samples[i] for i in order])
                self.sessions[sid] = session
            self._advance(session)
            return session

    def _rated(self, rater_id: str, sample: SampleInfo) -> bool:
        return (rater_id, sample.sample_id, sample.model_id) in self.keys

    def _advance(self, session: ListeningSession) -> None:
        while (session.cursor < len(session.queue)
               and self._rated(session.rater_id, session.queue[session.cursor])):
            session.cursor += 1

    def next_payload(self, session_id: str) -> dict:
        with self.lock:
            session = self.sessions.get(session_id)
            if session is None:
                raise KeyError(session_id)
            self._advance(session)
            if session.completed:
                scores = [r.score for r in self.ratings if r.rater_id == session.rater_id]
                return {"done": True, "rated": len(scores),
                        "mean_score": (sum(scores) / len(scores)) if scores else None}
            sample = session.queue[session.cursor]
            return {"sample_id": sample.sample_id, "category": sample.category,
                    "audio_url": f"/api/audio/{sample.sample_id}",
                    "position": session.cursor + 1, "total": len(session.queue)}

    def submit_rating(self, session_id: str, sample_id: str, score) -> dict:
        with self.lock:
            session = self.sessions.get(session_id)
            if session is None:
                raise KeyError(session_id)
            sample = self.by_id.get(sample_id)
            if sample is None:
                raise KeyError(sample_id)
            _check_score(score)
            rec = RatingRecord(session.rater_id, sample.sample_id, sample.category,
                               sample.model_id, score, time.time())
            if rec.key() in self.keys:
                raise DuplicateRating(f"already rated {sample_id}")
            self._fh.write(_format_rating_row(rec))
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self.ratings.append(rec)
            self.keys.add(rec.key())
            self._advance(session)
            return {"accepted": True}

    def report_payload(self, model_id: str | None) -> dict:
        with self.lock:
            ratings = list(self.ratings)
        if model_id is not None:
            try:
                return category_report(ratings, model_id).to_mapping()
            except EmptyScores:
                return {"model_id": model_id, "per_category": {},
                        "overall_mean_of_categories": None,
                        "overall_mean_of_ratings": None, "n_ratings": 0}
        models = sorted({r.model_id for r in ratings})
        return {"models": [category_report(ratings, m).to_mapping() for m in models]}


class _Handler(BaseHTTPRequestHandler):
    service: ListeningService = None
    static_dir: str | None = None

    def log_message(self, fmt, *args):  # quiet; the CLI reports the address once
        pass

    def _json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length) if length else b""
        payload = json.loads(raw.decode() or "{}")
        if not isinstance(payload, dict):
            raise ValueError("body must be a JSON object")
        return payload

    def _serve_file(self, path: str, content_type: str) -> None:
        try:
            with open(path, "rb") as fh:
                body = fh.read()
        except OSError:
            self._json(404, {"error": "not found"})
            return
        self.send_response(200)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _serve_static(self, rel: str) -> None:
        if self.static_dir is None:
            self._json(404, {"error": "no static assets configured"})
            return
        rel = rel or "index.html"
        full = os.path.realpath(os.path.join(self.static_dir, rel))
        root = os.path.realpath(self.static_dir)
        if not full.startswith(root + os.sep) and full != root:
            self._json(404, {"error": "not found"})
            return
        ctype = {"html": "text/html; charset=utf-8", "js": "text/javascript",
                 "css": "text/css", "map": "application/json"}.get(
            full.rsplit(".", 1)[-1], "application/octet-stream")
        self._serve_file(full, ctype)

    def do_GET(self) -> None:
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts[:1] == ["api"]:
                if len(parts) == 4 and parts[1] == "session" and parts[3] == "next":
                    self._json(200, self.service.next_payload(parts[2]))
                elif len(parts) == 3 and parts[1] == "audio":
                    sample = self.service.by_id.get(parts[2])
                    if sample is None:
                        self._json(404, {"error": "unknown sample"})
                    else:
                        self._serve_file(sample.wav_path, "audio/wav")
                elif len(parts) == 2 and parts[1] == "report":
                    model = parse_qs(url.query).get("model", [None])[0]
                    self._json(200, self.service.report_payload(model))
                else:
                    self._json(404, {"error": "unknown endpoint"})
            else:
                self._serve_static("/".join(parts))
        except KeyError as exc:
            self._json(404, {"error": f"unknown id {exc}"})

    def do_POST(self) -> None:
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            payload = self._read_json()
        except (ValueError, UnicodeDecodeError) as exc:
            self._json(400, {"error": f"bad request body: {exc}"})
            return
        try:
            if parts == ["api", "session"]:
                rater = payload.get("rater_id")
                if not rater or not isinstance(rater, str):
                    self._json(400, {"error": "rater_id required"})
                    return
                session = self.service.open_session(rater)
                self._json(200, {"session_id": session.session_id,
                                 "position": session.cursor + 1,
                                 "total": len(session.queue)})
            elif len(parts) == 4 and parts[:2] == ["api", "session"] and parts[3] == "rating":
                result = self.service.submit_rating(
                    parts[2], payload.get("sample_id"), payload.get("score"))
                self._json(200, result)
            else:
                self._json(404, {"error": "unknown endpoint"})
        except KeyError as exc:
            self._json(404, {"error": f"unknown id {exc}"})
        except ScoreOutOfRange as exc:
            self._json(400, {"error": str(exc)})
        except DuplicateRating as exc:
            self._json(409, {"error": str(exc)})


def make_server(service: ListeningService, port: int, host: str = "127.0.0.1",
                static_dir: str | None = None) -> ThreadingHTTPServer:
    """Binds and returns the HTTP server; caller runs serve_forever()."""
    handler = type("BoundHandler", (_Handler,),
                   {"service": service, "static_dir": static_dir})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
