"""Self-describing binary container for named float64 matrices.

Layout::

    HYLOVQA-CONTAINER 1
    kind = <stream|checkpoint|...>
    meta.<key> = <value>            (zero or more, one per line)
    payload_bytes = <int>
    payload_sha256 = <hex>
    array <name> <rows> <cols> <byte offset>   (manifest order)
    end
    <payload: little-endian float64, row-major, arrays back to back>

Offsets are relative to the first payload byte. The header is UTF-8 text and
ends with the line ``end``; everything after the newline is payload.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError

MAGIC = "HYLOVQA-CONTAINER 1"
_LE_F8 = np.dtype("<f8")


def _check_token(s: str, what: str) -> str:
    s = str(s)
    if any(c in s for c in "\r\n") or (what == "name" and (" " in s or not s)):
        raise ValueError(f"invalid {what} {s!r} for container header")
    return s


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None,
           kind: str = "data") -> bytes:
    chunks = []
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        if a.ndim != 2:
            raise ValueError(f"array {name!r} has rank {a.ndim}; only rank <= 2 is stored")
        payload = a.astype(_LE_F8, copy=False).tobytes(order="C")
        manifest.append(f"array {_check_token(name, 'name')} {a.shape[0]} {a.shape[1]} {offset}")
        chunks.append(payload)
        offset += len(payload)
    body = b"".join(chunks)
    lines = [MAGIC, f"kind = {_check_token(kind, 'kind')}"]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{_check_token(k, 'name')} = {_check_token(v, 'value')}")
    lines += [f"payload_bytes = {len(body)}",
              f"payload_sha256 = {hashlib.sha256(body).hexdigest()}"]
    lines += manifest
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + body


def write(path, arrays, meta=None, kind: str = "data") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(arrays, meta, kind)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def decode(blob: bytes) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    """Parse a container; returns ``(kind, meta, arrays)``."""
    marker = b"\nend\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise IntegrityError("not a hylovqa container (bad magic or missing header end)")
    header = blob[:cut].decode("utf-8").split("\n")
    body = blob[cut + len(marker):]

    kind = ""
    meta: dict[str, str] = {}
    manifest = []
    declared = None
    digest = None
    for lineno, line in enumerate(header[1:], start=2):
        if line.startswith("array "):
            parts = line.split(" ")
            if len(parts) != 5:
                raise IntegrityError(f"header line {lineno}: malformed manifest entry {line!r}")
            manifest.append((parts[1], int(parts[2]), int(parts[3]), int(parts[4])))
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise IntegrityError(f"header line {lineno}: cannot parse {line!r}")
        if key == "kind":
            kind = value
        elif key == "payload_bytes":
            declared = int(value)
        elif key == "payload_sha256":
            digest = value
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            raise IntegrityError(f"header line {lineno}: unknown key {key!r}")

    expected = sum(r * c * 8 for _, r, c, _ in manifest)
    if declared is None or declared != expected:
        raise IntegrityError(f"manifest describes {expected} bytes but header declares {declared}")
    if len(body) != declared:
        raise IntegrityError(f"payload is {len(body)} bytes, header declares {declared} (truncated?)")
    if digest is not None and hashlib.sha256(body).hexdigest() != digest:
        raise IntegrityError("payload checksum mismatch")

    arrays: dict[str, np.ndarray] = {}
    pos = 0
    for name, rows, cols, off in manifest:
        if off != pos:
            raise IntegrityError(f"array {name!r}: offset {off} does not follow previous array ({pos})")
        n = rows * cols
        arrays[name] = np.frombuffer(body, dtype=_LE_F8, count=n, offset=off).astype(
            np.float64).reshape(rows, cols)
        pos += n * 8
    return kind, meta, arrays


def read(path, expect_kind: str | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    kind, meta, arrays = decode(path.read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise IntegrityError(f"{path} holds a {kind!r} container, expected {expect_kind!r}")
    return meta, arrays
