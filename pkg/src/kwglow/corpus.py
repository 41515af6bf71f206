"""Manifest ingestion, split hygiene, and audio auditing.

Manifests are tab-separated UTF-8, one record per line:
    id <TAB> split <TAB> category <TAB> audio_path <TAB> text
split is train or test. Test records may leave audio_path empty (their audio
is what the vocoder produces); the audit skips them.
"""

import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

from .dsp import load_wav, probe_wav
from .errors import (
    DuplicateId,
    IoFailure,
    KwglowError,
    ParseError,
    SplitLeak,
    UnknownNormalizer,
)

_SPLITS = ("train", "test")


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    split: str
    category: str
    audio_path: str
    text: str


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    source_path: str = ""

    def __len__(self) -> int:
        return len(self.records)


def _validate_records(numbered: list[tuple[int, UtteranceRecord]], where: str) -> None:
    seen_ids: dict[str, int] = {}
    train_texts: dict[str, str] = {}
    for lineno, rec in numbered:
        if rec.id in seen_ids:
            raise DuplicateId(
                f"{where}:{lineno}: id {rec.id!r} already used on line {seen_ids[rec.id]}")
        seen_ids[rec.id] = lineno
        if rec.split == "train":
            train_texts.setdefault(rec.text, rec.id)
    for _, rec in numbered:
        if rec.split == "test" and rec.text in train_texts:
            raise SplitLeak(
                f"{where}: test record {rec.id!r} repeats the text of train "
                f"record {train_texts[rec.text]!r}")


def parse_manifest_line(line: str, lineno: int, where: str) -> UtteranceRecord:
    parts = line.split("\t")
    if len(parts) != 5:
        raise ParseError(f"{where}:{lineno}: expected 5 tab-separated fields, "
                         f"got {len(parts)}")
    rec_id, split, category, audio_path, text = parts
    if split not in _SPLITS:
        raise ParseError(f"{where}:{lineno}: split must be train or test, "
                         f"got {split!r}")
    if not rec_id or not category or not text:
        raise ParseError(f"{where}:{lineno}: id, category and text must be non-empty")
    if split == "train" and not audio_path:
        raise ParseError(f"{where}:{lineno}: train records need an audio_path")
    return UtteranceRecord(rec_id, split, category, audio_path, text)


def load_manifest(path) -> Manifest:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    numbered = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        numbered.append((lineno, parse_manifest_line(line, lineno, str(path))))
    _validate_records(numbered, str(path))
    return Manifest([rec for _, rec in numbered], str(path))


def write_manifest(manifest: Manifest, path) -> None:
    rows = []
    for rec in manifest.records:
        fields = (rec.id, rec.split, rec.category, rec.audio_path, rec.text)
        for value in fields:
            if "\t" in value or "\n" in value:
                raise ParseError(f"record {rec.id!r}: fields may not contain "
                                 "tabs or newlines")
        rows.append("\t".join(fields))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + ("\n" if rows else ""))
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def category_stats(manifest: Manifest, split: str) -> dict[str, int]:
    """Record count per category within one split."""
    return dict(Counter(r.category for r in manifest.records if r.split == split))


# --- text normalization hooks ---

def _identity(text: str) -> str:
    return text


def _nfc_trim(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split())


NORMALIZERS = {
    "identity": _identity,
    "nfc-trim": _nfc_trim,
}


def normalize_text(text: str, normalizer_id: str = "identity") -> str:
    try:
        fn = NORMALIZERS[normalizer_id]
    except KeyError:
        raise UnknownNormalizer(
            f"unknown normalizer {normalizer_id!r}; have {sorted(NORMALIZERS)}") from None
    return fn(text)


# --- audio audit ---

@dataclass
class AudioAuditReport:
    n_audited: int = 0
    n_skipped: int = 0
    missing: list[tuple[str, str]] = field(default_factory=list)
    wrong_format: list[tuple[str, str, str]] = field(default_factory=list)
    total_duration_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.missing and not self.wrong_format

    def to_text(self) -> str:
        lines = [f"audited\t{self.n_audited}",
                 f"skipped\t{self.n_skipped}",
                 f"total_duration_seconds\t{self.total_duration_seconds:.3f}"]
        for rec_id, path in self.missing:
            lines.append(f"missing\t{rec_id}\t{path}")
        for rec_id, path, reason in self.wrong_format:
            lines.append(f"wrong_format\t{rec_id}\t{path}\t{reason}")
        return "\n".join(lines) + "\n"

    def to_mapping(self) -> dict:
        return {
            "audited": self.n_audited,
            "skipped": self.n_skipped,
            "total_duration_seconds": self.total_duration_seconds,
            "missing": [list(m) for m in self.missing],
            "wrong_format": [list(w) for w in self.wrong_format],
        }


def audit_audio(manifest: Manifest, metadata_only: bool = False) -> AudioAuditReport:
    """Probes every record that carries an audio path, manifest order.

    metadata_only trusts WAV headers instead of decoding payloads, which is
    how multi-hour synthetic fixtures stay small.
    """
    report = AudioAuditReport()
    for rec in manifest.records:
        if not rec.audio_path:
            report.n_skipped += 1
            continue
        if not os.path.isfile(rec.audio_path):
            report.missing.append((rec.id, rec.audio_path))
            continue
        try:
            if metadata_only:
                info = probe_wav(rec.audio_path)
                duration = info["duration"]
            else:
                clip = load_wav(rec.audio_path)
                duration = clip.duration
        except KwglowError as exc:
            report.wrong_format.append((rec.id, rec.audio_path, str(exc)))
            continue
        report.n_audited += 1
        report.total_duration_seconds += duration
    return report
