"""Key-value document format shared by all on-disk configs.

Every document starts with a header line ``gridmesh/<doctype> v<version>``
followed by ``key = value`` lines. ``#`` starts a comment (whole line or
trailing), blank lines are ignored, and keys may repeat (list-valued
entries such as ``node`` or ``event``). Values are kept as raw strings;
typed accessors on :class:`KvDocument` do the parsing and name the
offending key on failure.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

_HEADER_RE = re.compile(r"^gridmesh/([a-z0-9-]+)\s+v(\d+)$")


class KvFormatError(Exception):
    """Document violates the kv schema; message names the offending field."""


@dataclass
class KvDocument:
    doctype: str
    version: int
    entries: list[tuple[str, str]] = field(default_factory=list)

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.entries:
            if k == key:
                return v
        return default

    def require(self, key: str) -> str:
        value = self.get(key)
        if value is None:
            raise KvFormatError(f"{self.doctype}: missing required key '{key}'")
        return value

    def get_all(self, key: str) -> list[str]:
        return [v for k, v in self.entries if k == key]

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self.get(key)
        if raw is None:
            if default is None:
                raise KvFormatError(f"{self.doctype}: missing required key '{key}'")
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise KvFormatError(f"{self.doctype}: key '{key}' is not a number: {raw!r}") from exc

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self.get(key)
        if raw is None:
            if default is None:
                raise KvFormatError(f"{self.doctype}: missing required key '{key}'")
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise KvFormatError(f"{self.doctype}: key '{key}' is not an integer: {raw!r}") from exc

    def add(self, key: str, value) -> None:
        self.entries.append((key, str(value)))

    def dump(self) -> str:
        lines = [f"gridmesh/{self.doctype} v{self.version}"]
        lines += [f"{k} = {v}" for k, v in self.entries]
        return "\n".join(lines) + "\n"


def parse_kv(text: str, expect_doctype: str | None = None) -> KvDocument:
    lines = text.splitlines()
    header = None
    body_start = 0
    for i, line in enumerate(lines):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        header = stripped
        body_start = i + 1
        break
    if header is None:
        raise KvFormatError("empty document (missing header line)")
    m = _HEADER_RE.match(header)
    if not m:
        raise KvFormatError(f"bad header line: {header!r}")
    doc = KvDocument(doctype=m.group(1), version=int(m.group(2)))
    if expect_doctype is not None and doc.doctype != expect_doctype:
        raise KvFormatError(
            f"expected a gridmesh/{expect_doctype} document, got gridmesh/{doc.doctype}"
        )

    for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise KvFormatError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise KvFormatError(f"line {lineno}: empty key")
        doc.entries.append((key, value.strip()))
    return doc


def load_kv(path, expect_doctype: str | None = None) -> KvDocument:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read(), expect_doctype)


def save_kv(doc: KvDocument, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc.dump())


def apply_env_overrides(doc: KvDocument, environ=None, prefix: str = "GRIDMESH") -> KvDocument:
    """Override scalar keys from environment variables.

    ``GRIDMESH_<DOCTYPE>_<KEY>`` (key uppercased, ``-``/``.`` mapped to
    ``_``) replaces every occurrence of that key. List-valued keys are not
    overridable this way.
    """
    environ = os.environ if environ is None else environ
    tag = doc.doctype.upper().replace("-", "_")
    out = KvDocument(doc.doctype, doc.version, list(doc.entries))
    seen = {k for k, _ in out.entries}
    for key in sorted(seen):
        env_key = f"{prefix}_{tag}_{key.upper().replace('-', '_').replace('.', '_')}"
        if env_key in environ:
            value = environ[env_key]
            out.entries = [(k, v) for k, v in out.entries if k != key]
            out.entries.append((key, value))
    return out
