"""Versioned plain-text key=value files.

One format serves manifests, model configs, and resolved run configs: a
header line ``DROPCLIP-<KIND> v<N>`` followed by one ``key=value`` pair per
line. Blank lines and ``#`` comments are ignored. Values are stored as
strings; typed access is up to the caller.
"""

from __future__ import annotations

from pathlib import Path


class KvFormatError(ValueError):
    """Malformed or wrong-version key=value file."""


def header_line(kind: str, version: int = 1) -> str:
    return f"DROPCLIP-{kind} v{version}"


def dump_kv(path, kind: str, pairs: dict[str, str], version: int = 1) -> None:
    lines = [header_line(kind, version)]
    for key, value in pairs.items():
        if "=" in key or "\n" in key:
            raise KvFormatError(f"invalid key {key!r}")
        if "\n" in str(value):
            raise KvFormatError(f"value for {key!r} contains a newline")
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_kv(path, kind: str, version: int = 1) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != header_line(kind, version):
        got = lines[0].strip() if lines else "<empty file>"
        raise KvFormatError(f"{path}: expected header {header_line(kind, version)!r}, got {got!r}")
    pairs: dict[str, str] = {}
    for num, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise KvFormatError(f"{path}: malformed line {num}: {line!r}")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def require_keys(pairs: dict[str, str], keys, path="") -> None:
    for key in keys:
        if key not in pairs:
            raise KvFormatError(f"{path}: missing required key {key!r}")
