"""Canonical text form for hierarchical data and the repository digest.

Maps render as ``{key=value,...}`` with keys sorted ascending, lists as
``[a,b,...]``, strings JSON-quoted and numbers in their shortest
round-trip decimal form. The encoded bytes are the hashing input for
every structured payload.
"""

import hashlib
import json
import math
import re
from numbers import Integral, Real
from typing import Any

from .errors import CanonicalError

DIGEST_NAME = "sha256"

BARE_KEY_PATTERN = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*\Z")
NUMBER_PATTERN = re.compile(r"-?(?:inf|nan|\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)")
BARE_TOKEN_PATTERN = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*")
WHITESPACE_PATTERN = re.compile(r"\s*")

_STRING_DECODER = json.JSONDecoder()


def digest(data: bytes) -> str:
    """Lowercase hex SHA-256 of raw bytes."""
    return hashlib.sha256(data).hexdigest()


def encode(value: Any) -> str:
    """Encode a finite tree of maps, lists, strings, numbers and booleans."""
    parts: list[str] = []
    _encode_into(value, parts, depth=0)
    return "".join(parts)


def encode_bytes(value: Any) -> bytes:
    return encode(value).encode("utf-8")


def tree_digest(value: Any) -> str:
    return digest(encode_bytes(value))


def _encode_into(value: Any, parts: list[str], depth: int) -> None:
    if depth > 256:
        raise CanonicalError("tree too deep (cyclic reference?)")

    if isinstance(value, bool):
        parts.append("true" if value else "false")
    elif isinstance(value, Integral):
        parts.append(str(int(value)))
    elif isinstance(value, Real):
        parts.append(_format_float(float(value)))
    elif isinstance(value, str):
        parts.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, dict):
        parts.append("{")
        for i, key in enumerate(sorted(value)):
            if not isinstance(key, str):
                raise CanonicalError(f"map keys must be strings, got {key!r}")
            if i:
                parts.append(",")
            parts.append(_format_key(key))
            parts.append("=")
            _encode_into(value[key], parts, depth + 1)
        parts.append("}")
    elif isinstance(value, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(value):
            if i:
                parts.append(",")
            _encode_into(item, parts, depth + 1)
        parts.append("]")
    else:
        raise CanonicalError(f"cannot encode {type(value).__name__} value {value!r}")


def _format_float(value: float) -> str:
    if math.isnan(value):
        return "nan"
    # repr is the shortest string that round-trips
    return repr(value)


def _format_key(key: str) -> str:
    if BARE_KEY_PATTERN.match(key):
        return key
    return json.dumps(key, ensure_ascii=False)


def decode(text: str | bytes) -> Any:
    """Decode canonical text back into Python values.

    Whitespace between tokens is tolerated so hand-written definition
    files can be laid out over several lines.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    value, pos = _Decoder(text).value(0)
    pos = _skip(text, pos)
    if pos != len(text):
        raise CanonicalError(f"trailing data at offset {pos}")
    return value


def _skip(text: str, pos: int) -> int:
    return WHITESPACE_PATTERN.match(text, pos).end()


class _Decoder:
    """Recursive-descent decoder over a canonical text buffer."""

    def __init__(self, text: str):
        self.text = text

    def value(self, pos: int) -> tuple[Any, int]:
        text = self.text
        pos = _skip(text, pos)
        if pos >= len(text):
            raise CanonicalError("unexpected end of input")

        char = text[pos]
        if char == "{":
            return self._map(pos + 1)
        if char == "[":
            return self._list(pos + 1)
        if char == '"':
            return self._string(pos)

        number = NUMBER_PATTERN.match(text, pos)
        if number and number.end() > pos:
            return self._number(number.group(0)), number.end()

        bare = BARE_TOKEN_PATTERN.match(text, pos)
        if bare:
            word = bare.group(0)
            if word == "true":
                return True, bare.end()
            if word == "false":
                return False, bare.end()
        raise CanonicalError(f"unexpected character {char!r} at offset {pos}")

    def _number(self, token: str) -> int | float:
        if any(marker in token for marker in (".", "e", "E", "inf", "nan")):
            return float(token)
        return int(token)

    def _string(self, pos: int) -> tuple[str, int]:
        try:
            value, end = _STRING_DECODER.raw_decode(self.text, pos)
        except json.JSONDecodeError as e:
            raise CanonicalError(f"bad string at offset {pos}: {e.msg}") from e
        return value, end

    def _key(self, pos: int) -> tuple[str, int]:
        pos = _skip(self.text, pos)
        if pos < len(self.text) and self.text[pos] == '"':
            return self._string(pos)
        bare = BARE_TOKEN_PATTERN.match(self.text, pos)
        if not bare:
            raise CanonicalError(f"expected key at offset {pos}")
        return bare.group(0), bare.end()

    def _map(self, pos: int) -> tuple[dict[str, Any], int]:
        result: dict[str, Any] = {}
        pos = _skip(self.text, pos)
        if self.text.startswith("}", pos):
            return result, pos + 1

        while True:
            key, pos = self._key(pos)
            pos = _skip(self.text, pos)
            if not self.text.startswith("=", pos):
                raise CanonicalError(f"expected '=' after key {key!r} at offset {pos}")
            if key in result:
                raise CanonicalError(f"duplicate key {key!r}")
            result[key], pos = self.value(pos + 1)
            pos = _skip(self.text, pos)
            if self.text.startswith(",", pos):
                pos += 1
                continue
            if self.text.startswith("}", pos):
                return result, pos + 1
            raise CanonicalError(f"expected ',' or '}}' at offset {pos}")

    def _list(self, pos: int) -> tuple[list[Any], int]:
        result: list[Any] = []
        pos = _skip(self.text, pos)
        if self.text.startswith("]", pos):
            return result, pos + 1

        while True:
            item, pos = self.value(pos)
            result.append(item)
            pos = _skip(self.text, pos)
            if self.text.startswith(",", pos):
                pos += 1
                continue
            if self.text.startswith("]", pos):
                return result, pos + 1
            raise CanonicalError(f"expected ',' or ']' at offset {pos}")


def read_table(path) -> list[dict[str, Any]]:
    """Read a canonical-text table: one encoded map per line."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(decode(line))
            except CanonicalError as e:
                raise CanonicalError(f"{path}:{number}: {e}") from e
    return rows


def append_row(path, row: dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(encode(row) + "\n")
