"""Line-oriented key/value text map.

One format serves both checkpoint headers and CLI config files: UTF-8
lines of ``dotted.key = <json value>``, ``#`` comments, blank lines
ignored. Values are JSON scalars or arrays, so the format stays
self-describing and byte-deterministic when dumped from an ordered dict.
"""

import json

from .errors import ParseError


def dumps(mapping: dict) -> str:
    lines = []
    for key, value in mapping.items():
        lines.append(f"{key} = {json.dumps(value, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if not key:
            raise ParseError(f"line {lineno}: empty key")
        if key in out:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return out


def load_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
