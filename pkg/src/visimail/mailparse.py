"""RFC822/MIME parsing, banner stripping and in-place body rewriting.

Decoding is delegated to the stdlib ``email`` package (compat32 policy, which
keeps 8-bit bytes intact). Rewriting works on byte offsets instead of
re-generating the message, so headers and sibling parts survive untouched.
"""
from __future__ import annotations

import base64
import hashlib
import html as html_lib
import quopri
import re
import time
from dataclasses import dataclass, field
from datetime import timezone
from email import policy
from email.message import Message
from email.parser import BytesParser
from email.utils import parsedate_to_datetime
from typing import Callable, Iterator, Sequence

import lxml.html
from lxml import etree
from lxml.cssselect import CSSSelector

from .errors import MalformedMessage, NoRenderablePart

KNOWN_ENCODINGS = frozenset({"7bit", "8bit", "binary", "quoted-printable", "base64", "x-uuencode", "uuencode", "uue", "x-uue"})

_SEPARATOR = re.compile(rb"\r?\n\r?\n")


@dataclass
class MimePart:
    content_type: str
    charset: str | None
    transfer_encoding: str
    body: bytes
    headers: list[tuple[str, str]] = field(default_factory=list)
    children: list["MimePart"] = field(default_factory=list)
    disposition: str | None = None
    unsupported_encoding: bool = False

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self) -> Iterator["MimePart"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def leaves(self) -> list["MimePart"]:
        return [p for p in self.walk() if p.is_leaf]


@dataclass
class EmailRecord:
    id: str
    received_at: float
    source: str
    headers: list[tuple[str, str]]
    root: MimePart
    raw: bytes = field(repr=False)

    @property
    def leaves(self) -> list[MimePart]:
        return self.root.leaves()

    def header(self, name: str) -> str | None:
        name = name.lower()
        for key, value in self.headers:
            if key.lower() == name:
                return value
        return None


def email_id(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _build_part(msg: Message) -> MimePart:
    cte = str(msg.get("Content-Transfer-Encoding", "7bit")).strip().lower() or "7bit"
    disposition = msg.get_content_disposition()
    headers = [(k, str(v)) for k, v in msg.items()]
    if msg.is_multipart():
        children = [_build_part(sub) for sub in msg.get_payload()]
        return MimePart(msg.get_content_type(), msg.get_content_charset(), cte, b"",
                        headers, children, disposition)
    if cte in KNOWN_ENCODINGS:
        body = msg.get_payload(decode=True) or b""
        unsupported = False
    else:
        payload = msg.get_payload()
        body = payload.encode("ascii", "surrogateescape") if isinstance(payload, str) else bytes(payload or b"")
        unsupported = True
    return MimePart(msg.get_content_type(), msg.get_content_charset(), cte, body,
                    headers, [], disposition, unsupported)


def _received_at(msg: Message, fallback: float | Callable[[], float] | None) -> float:
    date = msg.get("Date")
    if date:
        try:
            dt = parsedate_to_datetime(str(date))
        except (TypeError, ValueError, IndexError):
            dt = None
        if dt is not None:
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            return dt.timestamp()
    if fallback is None:
        return time.time()
    return float(fallback() if callable(fallback) else fallback)


def parse_email(raw: bytes, source: str = "", fallback_time: float | Callable[[], float] | None = None) -> EmailRecord:
    """Parse raw message bytes.

    ``received_at`` comes from the Date header when it parses, otherwise from
    ``fallback_time`` (a number or a zero-argument clock; wall time if None).
    Parts with an unknown transfer encoding keep their raw bytes and are
    flagged ``unsupported_encoding``.
    """
    if not raw:
        raise MalformedMessage("empty message")
    if not _SEPARATOR.search(raw) and not raw.startswith((b"\n", b"\r\n")):
        raise MalformedMessage("no blank line between headers and body")
    msg = BytesParser(policy=policy.compat32).parsebytes(raw)
    return EmailRecord(
        id=email_id(raw),
        received_at=_received_at(msg, fallback_time),
        source=source,
        headers=[(k, str(v)) for k, v in msg.items()],
        root=_build_part(msg),
        raw=raw,
    )


# --------------------------------------------------------------------------
# render-part selection
# --------------------------------------------------------------------------


def _candidate_leaves(rec: EmailRecord) -> list[MimePart]:
    return [p for p in rec.leaves if p.disposition != "attachment"]


def _select_leaf(rec: EmailRecord) -> tuple[int, MimePart, bool]:
    """Return (leaf index, part, wrapped) for the part that gets rendered."""
    leaves = rec.leaves
    candidates = _candidate_leaves(rec)
    html_parts = [p for p in candidates if p.content_type == "text/html"]
    if html_parts:
        part = html_parts[-1]
        return _index_of(leaves, part), part, False
    plain = [p for p in candidates if p.content_type == "text/plain"]
    if plain:
        return _index_of(leaves, plain[0]), plain[0], True
    raise NoRenderablePart("no text/html or text/plain part")


def _index_of(leaves: list[MimePart], part: MimePart) -> int:
    for i, leaf in enumerate(leaves):
        if leaf is part:
            return i
    raise ValueError("part not in tree")  # pragma: no cover


def decode_text(part: MimePart) -> str:
    charset = part.charset or "utf-8"
    try:
        return part.body.decode(charset, errors="replace")
    except LookupError:
        return part.body.decode("utf-8", errors="replace")


def wrap_plain(text: str) -> str:
    return "<html><body><pre>" + html_lib.escape(text, quote=False) + "</pre></body></html>"


def select_render_part(rec: EmailRecord) -> str:
    """The last text/html leaf, else the first text/plain leaf wrapped in ``<pre>``."""
    _, part, wrapped = _select_leaf(rec)
    text = decode_text(part)
    return wrap_plain(text) if wrapped else text


# --------------------------------------------------------------------------
# banner stripping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BannerRule:
    kind: str  # "selector" | "regex"
    scope: str

    def __post_init__(self):
        if self.kind not in ("selector", "regex"):
            raise ValueError(f"unknown banner rule kind {self.kind!r}")


@dataclass(frozen=True)
class BannerPatternSet:
    patterns: tuple[BannerRule, ...] = ()

    @classmethod
    def default(cls) -> "BannerPatternSet":
        rules = [
            BannerRule("selector", f'[class*="{s}"], [id*="{s}"]')
            for s in ("banner", "external-sender", "disclaimer")
        ]
        rules.append(BannerRule("regex", r"^\s*(CAUTION|EXTERNAL|WARNING)[:!]"))
        return cls(tuple(rules))

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "BannerPatternSet":
        """Parse ``"selector <css>"`` / ``"regex <pattern>"`` lines."""
        rules = []
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, _, scope = line.partition(" ")
            rules.append(BannerRule(kind.strip(), scope.strip()))
        return cls(tuple(rules))

    def to_lines(self) -> list[str]:
        return [f"{r.kind} {r.scope}" for r in self.patterns]


_PROTECTED = {"html", "head", "body"}


def _own_text(el) -> str:
    parts = [el.text or ""]
    parts.extend(child.tail or "" for child in el)
    return "".join(parts)


def _matches(root, rule: BannerRule, compiled) -> list:
    if rule.kind == "selector":
        found = compiled(root)
    else:
        found = [el for el in root.iter() if isinstance(el.tag, str) and compiled.search(_own_text(el))]
    hits = [el for el in found if isinstance(el.tag, str) and el.tag.lower() not in _PROTECTED and el is not root]
    # outermost only: an element whose ancestor is also hit goes with it
    hit_ids = {id(el) for el in hits}
    outer = []
    for el in hits:
        if not any(id(anc) in hit_ids for anc in el.iterancestors()):
            outer.append(el)
    return outer


def _compile(rule: BannerRule):
    if rule.kind == "selector":
        return CSSSelector(rule.scope, translator="html")
    return re.compile(rule.scope)


def strip_banners(html: str, patterns: BannerPatternSet) -> tuple[str, int]:
    """Remove elements matched by the banner rules, outermost first.

    Rules run in order, repeatedly, until a full pass removes nothing, so the
    output contains no match and a second call is a no-op. When nothing is
    removed the input string is returned as-is.
    """
    if not patterns.patterns or not html.strip():
        return html, 0
    is_document = re.search(r"<\s*(html|body|head|!doctype)\b", html, re.I) is not None
    try:
        if is_document:
            root = lxml.html.document_fromstring(html)
        else:
            root = lxml.html.fragment_fromstring(html, create_parent="div")
    except (etree.ParserError, ValueError):
        return html, 0
    compiled = [(_compile(rule), rule) for rule in patterns.patterns]
    removed = 0
    while True:
        before = removed
        for comp, rule in compiled:
            for el in _matches(root, rule, comp):
                el.drop_tree()
                removed += 1
        if removed == before:
            break
    if removed == 0:
        return html, 0
    if is_document:
        tree = root.getroottree()
        if re.search(r"<!doctype", html, re.I):
            out = etree.tostring(tree, method="html", encoding="unicode", doctype=tree.docinfo.doctype)
        else:
            out = lxml.html.tostring(root, encoding="unicode")
    else:
        out = (root.text or "") + "".join(
            lxml.html.tostring(child, encoding="unicode") for child in root
        )
    return out, removed


# --------------------------------------------------------------------------
# rewriting
# --------------------------------------------------------------------------


@dataclass
class _Span:
    header_start: int
    header_end: int  # exclusive, before the blank line
    body_start: int
    body_end: int
    content_type: str
    children: list["_Span"] = field(default_factory=list)

    def leaves(self) -> list["_Span"]:
        if not self.children:
            return [self]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out


_LINE_END = re.compile(rb"\r\n|\n|\r")


def _lines(raw: bytes, start: int, end: int):
    """Yield (line_start, content_end, next_start) for lines in raw[start:end]."""
    pos = start
    while pos < end:
        m = _LINE_END.search(raw, pos, end)
        if m is None:
            yield pos, end, end
            return
        yield pos, m.start(), m.end()
        pos = m.end()


def _entity_span(raw: bytes, start: int, end: int, default_type: str = "text/plain") -> _Span:
    if raw.startswith(b"\r\n", start):
        header_end, body_start = start, start + 2
    elif raw.startswith(b"\n", start):
        header_end, body_start = start, start + 1
    else:
        m = _SEPARATOR.search(raw, start, end)
        if m is None:
            header_end = body_start = end
        else:
            # header block keeps its final line break
            first_break = _LINE_END.search(raw, m.start(), end)
            header_end, body_start = first_break.end(), m.end()
    hdr = BytesParser(policy=policy.compat32).parsebytes(raw[start:header_end] + b"\n", headersonly=True)
    if "content-type" not in {k.lower() for k in hdr.keys()}:
        ctype = default_type
    else:
        ctype = hdr.get_content_type()
    span = _Span(start, header_end, body_start, end, ctype)
    if ctype.startswith("multipart/"):
        boundary = hdr.get_boundary()
        if boundary:
            child_default = "message/rfc822" if ctype == "multipart/digest" else "text/plain"
            span.children = _split_multipart(raw, body_start, end, boundary.encode("ascii", "surrogateescape"), child_default)
    elif ctype == "message/rfc822":
        span.children = [_entity_span(raw, body_start, end)]
    return span


def _split_multipart(raw: bytes, start: int, end: int, boundary: bytes, default_type: str) -> list[_Span]:
    delim = re.compile(rb"--" + re.escape(boundary) + rb"(--)?[ \t]*$")
    # (content end of the line before the delimiter, delimiter's next line start, is_close)
    marks = []
    prev_content_end = start
    for ls, ce, ns in _lines(raw, start, end):
        m = delim.match(raw, ls, ce)
        if m is not None:
            marks.append((prev_content_end, ns, m.group(1) is not None))
            if m.group(1) is not None:
                break
        prev_content_end = ce
    children = []
    for i, (_, body_from, is_close) in enumerate(marks):
        if is_close:
            break
        if i + 1 < len(marks):
            # the line break before a delimiter belongs to the delimiter
            child_end = max(body_from, marks[i + 1][0])
        else:
            child_end = end
        children.append(_entity_span(raw, body_from, child_end, default_type))
    return children


def _line_ending(raw: bytes) -> bytes:
    return b"\r\n" if b"\r\n" in raw[:4096] else b"\n"


def _encode_body(data: bytes, cte: str, eol: bytes) -> tuple[bytes, str]:
    if cte == "base64":
        enc = base64.encodebytes(data).rstrip(b"\n").replace(b"\n", eol)
        return enc, cte
    if cte == "quoted-printable":
        enc = quopri.encodestring(data.replace(b"\r\n", b"\n")).replace(b"\n", eol)
        return enc, cte
    if cte in ("7bit", "") and any(b > 127 for b in data):
        return data, "8bit"
    if cte not in KNOWN_ENCODINGS or cte in ("x-uuencode", "uuencode", "uue", "x-uue"):
        return data, "8bit"
    return data, cte


def _replace_headers(block: bytes, updates: dict[str, str], eol: bytes) -> bytes:
    """Replace (or append) whole header fields in a raw header block."""
    fields: list[list] = []  # [name_lower or None, bytes]
    for ls, ce, ns in _lines(block, 0, len(block)):
        line = block[ls:ns]
        if line[:1] in (b" ", b"\t") and fields:
            fields[-1][1] += line
        else:
            name = block[ls:ce].split(b":", 1)[0].strip().lower().decode("ascii", "replace")
            fields.append([name, line])
    pending = {k.lower(): (k, v) for k, v in updates.items()}
    out = []
    for name, line in fields:
        if name in pending:
            key, value = pending.pop(name)
            out.append(f"{key}: {value}".encode("ascii", "replace") + eol)
        else:
            out.append(line)
    for key, value in pending.values():
        out.append(f"{key}: {value}".encode("ascii", "replace") + eol)
    return b"".join(out)


def _content_type_value(part: MimePart, charset: str | None, new_type: str | None) -> str:
    msg = Message()
    original = next((v for k, v in part.headers if k.lower() == "content-type"), part.content_type)
    msg["Content-Type"] = original
    if new_type:
        msg.set_type(new_type)
    if charset:
        msg.set_param("charset", charset)
    return msg["Content-Type"]


def _encode_html(new_html: str, part: MimePart) -> tuple[bytes, str | None]:
    """Encode with the part's charset; return (bytes, charset to declare or None if unchanged)."""
    charset = part.charset
    if charset:
        try:
            return new_html.encode(charset), None
        except (UnicodeEncodeError, LookupError):
            pass
    return new_html.encode("utf-8"), "utf-8"


def rewrite_email(rec: EmailRecord, new_html: str) -> bytes:
    """Swap the rendered part's body for ``new_html``, preserving everything else.

    A plain-text-only message has its selected part converted to text/html.
    """
    leaf_index, part, wrapped = _select_leaf(rec)
    data, new_charset = _encode_html(new_html, part)
    raw = rec.raw
    eol = _line_ending(raw)
    root = _entity_span(raw, 0, len(raw))
    spans = root.leaves()
    if len(spans) != len(rec.leaves) or any(
        s.content_type != p.content_type for s, p in zip(spans, rec.leaves)
    ):
        return _rewrite_by_regeneration(rec, leaf_index, new_html, wrapped)
    span = spans[leaf_index]
    body, cte = _encode_body(data, part.transfer_encoding, eol)
    original_body = raw[span.body_start:span.body_end]
    if cte == "base64" and original_body.endswith((b"\n", b"\r")):
        body += eol
    updates: dict[str, str] = {}
    if new_charset or wrapped:
        updates["Content-Type"] = _content_type_value(part, new_charset, "text/html" if wrapped else None)
    if cte != part.transfer_encoding:
        updates["Content-Transfer-Encoding"] = cte
    header = raw[span.header_start:span.header_end]
    if updates:
        header = _replace_headers(header, updates, eol)
    gap = raw[span.header_end:span.body_start]
    if span.header_start == span.header_end and updates:
        gap = eol
    return raw[:span.header_start] + header + gap + body + raw[span.body_end:]


def _rewrite_by_regeneration(rec: EmailRecord, leaf_index: int, new_html: str, wrapped: bool) -> bytes:
    msg = BytesParser(policy=policy.compat32).parsebytes(rec.raw)
    leaves = [m for m in msg.walk() if not m.is_multipart()]
    target = leaves[leaf_index]
    charset = target.get_content_charset() or "utf-8"
    try:
        new_html.encode(charset)
    except (UnicodeEncodeError, LookupError):
        charset = "utf-8"
    del target["Content-Transfer-Encoding"]
    if wrapped:
        target.set_type("text/html")
    target.set_payload(new_html, charset=charset)
    return msg.as_bytes()
