"""Deterministic tag-length-value codec.

Every message type is a frozen dataclass registered under a one-byte type
tag with :func:`message`.  Its fields are emitted in declaration order, each
wrapped in a context tag ``0x80 | index``.  Lengths are definite and
big-endian (short form below 0x80, otherwise ``0x81``-``0x83`` followed by
one to three length bytes).  Decoding is strict: non-minimal lengths or
integers, booleans other than 0x00/0xFF, unknown or out-of-order tags and
trailing bytes are all rejected, so every value has exactly one encoding.

Supported field annotations::

    bytes  str  bool  int (unsigned, at most 64 bits)
    IntEnum / IntFlag subclasses
    registered message classes, and unions of them (a CHOICE)
    tuple[X, ...] of any of the above
    Optional[X]  (absent tag when None)
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from collections.abc import Iterator
from typing import Any

MAX_INPUT = 1 << 20

_TAG_BOOL = 0x01
_TAG_INT = 0x02
_TAG_OCTETS = 0x04
_TAG_UTF8 = 0x0C


class TlvError(ValueError):
    pass


class MalformedTlv(TlvError):
    pass


class LengthOverflow(TlvError):
    pass


_REGISTRY: dict[int, type] = {}


def message(tag: int):
    """Class decorator: make ``cls`` a frozen, keyword-only dataclass with a TLV type tag."""

    def wrap(cls):
        if not 0 < tag < 0x80:
            raise ValueError(f"type tag {tag:#x} outside 0x01..0x7f")
        if tag in _REGISTRY:
            raise ValueError(f"type tag {tag:#x} already used by {_REGISTRY[tag].__name__}")
        cls = dataclasses.dataclass(frozen=True, kw_only=True)(cls)
        if len(dataclasses.fields(cls)) > 32:
            raise ValueError("at most 32 fields per message")
        cls.__tlv_tag__ = tag
        _REGISTRY[tag] = cls
        return cls

    return wrap


def field(*, size: int | tuple[int, int] | None = None, max_size: int | None = None, **kwargs):
    """dataclasses.field with a byte-length constraint for ``bytes`` fields (or their elements)."""
    if max_size is not None:
        size = (0, max_size)
    metadata = dict(kwargs.pop("metadata", {}))
    metadata["size"] = size
    return dataclasses.field(metadata=metadata, **kwargs)


def registry() -> dict[int, type]:
    return dict(sorted(_REGISTRY.items()))


# --- schema -----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class _Kind:
    name: str  # bytes, str, bool, uint, enum, flag, msg, choice, seq
    cls: Any = None
    size: Any = None
    inner: _Kind | None = None


@dataclasses.dataclass(frozen=True)
class _Field:
    name: str
    tag: int
    kind: _Kind
    optional: bool


_SCHEMAS: dict[type, tuple[_Field, ...]] = {}


def _kind_of(tp, size) -> tuple[_Kind, bool]:
    optional = False
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional = len(args) < len(typing.get_args(tp))
        if len(args) == 1:
            kind, _ = _kind_of(args[0], size)
            return kind, optional
        if not all(hasattr(a, "__tlv_tag__") for a in args):
            raise TypeError(f"unsupported union {tp!r}")
        return _Kind("choice", cls=tuple(args)), optional
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) != 2 or args[1] is not Ellipsis:
            raise TypeError(f"only tuple[X, ...] is supported, got {tp!r}")
        inner, _ = _kind_of(args[0], size)
        return _Kind("seq", inner=inner), False
    if tp is bytes:
        return _Kind("bytes", size=size), False
    if tp is str:
        return _Kind("str"), False
    if tp is bool:
        return _Kind("bool"), False
    if isinstance(tp, type) and issubclass(tp, enum.IntFlag):
        return _Kind("flag", cls=tp), False
    if isinstance(tp, type) and issubclass(tp, enum.IntEnum):
        return _Kind("enum", cls=tp), False
    if tp is int:
        return _Kind("uint"), False
    if hasattr(tp, "__tlv_tag__"):
        return _Kind("msg", cls=tp), False
    raise TypeError(f"unsupported field type {tp!r}")


def _schema(cls) -> tuple[_Field, ...]:
    try:
        return _SCHEMAS[cls]
    except KeyError:
        pass
    hints = typing.get_type_hints(cls)
    fields = []
    for i, f in enumerate(dataclasses.fields(cls)):
        kind, optional = _kind_of(hints[f.name], f.metadata.get("size"))
        fields.append(_Field(f.name, 0x80 | i, kind, optional))
    _SCHEMAS[cls] = tuple(fields)
    return _SCHEMAS[cls]


def field_names(cls) -> list[str]:
    return [f.name for f in _schema(cls)]


# --- encoding ----------------------------------------------------------------


def _length(n: int) -> bytes:
    if n > MAX_INPUT:
        raise LengthOverflow(f"content of {n} bytes exceeds {MAX_INPUT}")
    if n < 0x80:
        return bytes([n])
    body = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([0x80 | len(body)]) + body


def _tlv(tag: int, content: bytes) -> bytes:
    return bytes([tag]) + _length(len(content)) + content


def _uint(v: int) -> bytes:
    if v < 0 or v >= 1 << 64:
        raise ValueError(f"integer {v} outside unsigned 64-bit range")
    return v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")


def _check_size(kind: _Kind, v: bytes, exc=ValueError):
    size = kind.size
    if size is None:
        return
    lo, hi = (size, size) if isinstance(size, int) else size
    if not lo <= len(v) <= hi:
        raise exc(f"expected {size} bytes, got {len(v)}")


def _encode_value(kind: _Kind, v) -> bytes:
    if kind.name == "bytes":
        v = bytes(v)
        _check_size(kind, v)
        return v
    if kind.name == "str":
        return v.encode("utf-8")
    if kind.name == "bool":
        return b"\xff" if v else b"\x00"
    if kind.name in ("uint", "enum", "flag"):
        return _uint(int(v))
    if kind.name in ("msg", "choice"):
        return encode_tlv(v)
    if kind.name == "seq":
        return b"".join(_encode_element(kind.inner, item) for item in v)
    raise AssertionError(kind)


def _encode_element(kind: _Kind, v) -> bytes:
    if kind.name in ("msg", "choice"):
        return encode_tlv(v)
    tag = {"bytes": _TAG_OCTETS, "str": _TAG_UTF8, "bool": _TAG_BOOL}.get(kind.name, _TAG_INT)
    return _tlv(tag, _encode_value(kind, v))


def _encode_content(value, stop: str | None = None) -> bytes:
    out = bytearray()
    for f in _schema(type(value)):
        if f.name == stop:
            break
        v = getattr(value, f.name)
        if v is None:
            if f.optional:
                continue
            raise ValueError(f"{type(value).__name__}.{f.name} is mandatory")
        out += _tlv(f.tag, _encode_value(f.kind, v))
    return bytes(out)


def encode_tlv(value) -> bytes:
    tag = getattr(type(value), "__tlv_tag__", None)
    if tag is None:
        raise TypeError(f"{type(value).__name__} is not a registered message")
    return _tlv(tag, _encode_content(value))


def encode_signed_part(value, signature_field: str) -> bytes:
    """Encoding of every field preceding ``signature_field``, under the type's tag."""
    return _tlv(type(value).__tlv_tag__, _encode_content(value, stop=signature_field))


# --- decoding ----------------------------------------------------------------


def _read(buf: bytes, pos: int) -> tuple[int, bytes, int]:
    if pos >= len(buf):
        raise MalformedTlv("truncated: missing tag")
    tag = buf[pos]
    pos += 1
    if pos >= len(buf):
        raise MalformedTlv("truncated: missing length")
    first = buf[pos]
    pos += 1
    if first < 0x80:
        n = first
    else:
        width = first & 0x7F
        if width == 0 or width > 3:
            raise LengthOverflow(f"length form {first:#x} not supported")
        if pos + width > len(buf):
            raise MalformedTlv("truncated length")
        raw = buf[pos : pos + width]
        pos += width
        if raw[0] == 0:
            raise MalformedTlv("non-minimal length")
        n = int.from_bytes(raw, "big")
        if n < 0x80 or (width > 1 and n < 1 << (8 * (width - 1))):
            raise MalformedTlv("non-minimal length")
        if n > MAX_INPUT:
            raise LengthOverflow(f"length {n} exceeds {MAX_INPUT}")
    if pos + n > len(buf):
        raise MalformedTlv("truncated content")
    return tag, bytes(buf[pos : pos + n]), pos + n


def _iter_tlvs(buf: bytes) -> Iterator[tuple[int, bytes]]:
    pos = 0
    while pos < len(buf):
        tag, content, pos = _read(buf, pos)
        yield tag, content


def _decode_uint(content: bytes) -> int:
    if not content:
        raise MalformedTlv("empty integer")
    if len(content) > 1 and content[0] == 0:
        raise MalformedTlv("non-minimal integer")
    if len(content) > 8:
        raise MalformedTlv("integer wider than 64 bits")
    return int.from_bytes(content, "big")


def _decode_value(kind: _Kind, content: bytes):
    if kind.name == "bytes":
        _check_size(kind, content, MalformedTlv)
        return content
    if kind.name == "str":
        try:
            return content.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedTlv(f"bad UTF-8: {e}") from None
    if kind.name == "bool":
        if content not in (b"\x00", b"\xff"):
            raise MalformedTlv("boolean must be 0x00 or 0xff")
        return content == b"\xff"
    if kind.name == "uint":
        return _decode_uint(content)
    if kind.name == "enum":
        try:
            return kind.cls(_decode_uint(content))
        except ValueError:
            raise MalformedTlv(f"unknown {kind.cls.__name__} value") from None
    if kind.name == "flag":
        v = _decode_uint(content)
        known = 0
        for member in kind.cls:
            known |= member.value
        if v & ~known:
            raise MalformedTlv(f"undefined {kind.cls.__name__} bits")
        return kind.cls(v)
    if kind.name in ("msg", "choice"):
        return decode_tlv(content, kind.cls)
    if kind.name == "seq":
        return tuple(_decode_element(kind.inner, tag, c) for tag, c in _iter_tlvs(content))
    raise AssertionError(kind)


def _decode_element(kind: _Kind, tag: int, content: bytes):
    if kind.name in ("msg", "choice"):
        return _decode_typed(tag, content, kind.cls)
    want = {"bytes": _TAG_OCTETS, "str": _TAG_UTF8, "bool": _TAG_BOOL}.get(kind.name, _TAG_INT)
    if tag != want:
        raise MalformedTlv(f"element tag {tag:#x}, expected {want:#x}")
    return _decode_value(kind, content)


def _decode_typed(tag: int, content: bytes, expected):
    candidates = expected if isinstance(expected, tuple) else (expected,)
    for cls in candidates:
        if cls.__tlv_tag__ == tag:
            break
    else:
        names = "/".join(c.__name__ for c in candidates)
        raise MalformedTlv(f"type tag {tag:#x} is not {names}")
    values = {}
    tlvs = list(_iter_tlvs(content))
    i = 0
    for f in _schema(cls):
        if i < len(tlvs) and tlvs[i][0] == f.tag:
            values[f.name] = _decode_value(f.kind, tlvs[i][1])
            i += 1
        elif f.optional:
            values[f.name] = None
        else:
            raise MalformedTlv(f"{cls.__name__}.{f.name} missing")
    if i != len(tlvs):
        raise MalformedTlv(f"unexpected tag {tlvs[i][0]:#x} in {cls.__name__}")
    return cls(**values)


def decode_tlv(data: bytes, expected):
    """Decode one message of type ``expected`` (a class or a tuple of alternatives)."""
    if len(data) > MAX_INPUT:
        raise LengthOverflow(f"input of {len(data)} bytes exceeds {MAX_INPUT}")
    tag, content, end = _read(data, 0)
    if end != len(data):
        raise MalformedTlv(f"{len(data) - end} trailing bytes")
    return _decode_typed(tag, content, expected)


def peek_tag(data: bytes) -> int:
    if not data:
        raise MalformedTlv("empty input")
    return data[0]
