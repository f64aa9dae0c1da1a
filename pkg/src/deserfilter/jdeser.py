"""Reader for Java Object Serialization streams that reports class descriptors.

Nothing is deserialized: the reader walks the stream grammar (protocol version
5) and records, in read order, one :class:`ClassEvent` for every class
descriptor it meets for the first time. Back-references to known descriptors
emit nothing. Primitive field values are skipped using the widths from the
field descriptors; object-typed values and custom write data are walked.

The same reader backs whole-buffer parsing (:func:`parse_stream`) and chunked
parsing (:class:`StreamSession`): it is a generator that suspends whenever it
needs more bytes than have been fed so far.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import _mutf8

STREAM_MAGIC = 0xACED
STREAM_VERSION = 5
BASE_WIRE_HANDLE = 0x7E0000

TC_NULL = 0x70
TC_REFERENCE = 0x71
TC_CLASSDESC = 0x72
TC_OBJECT = 0x73
TC_STRING = 0x74
TC_ARRAY = 0x75
TC_CLASS = 0x76
TC_BLOCKDATA = 0x77
TC_ENDBLOCKDATA = 0x78
TC_RESET = 0x79
TC_BLOCKDATALONG = 0x7A
TC_EXCEPTION = 0x7B
TC_LONGSTRING = 0x7C
TC_PROXYCLASSDESC = 0x7D
TC_ENUM = 0x7E

SC_WRITE_METHOD = 0x01
SC_SERIALIZABLE = 0x02
SC_EXTERNALIZABLE = 0x04
SC_BLOCK_DATA = 0x08
SC_ENUM = 0x10

PRIMITIVE_WIDTHS = {
    ord("B"): 1, ord("C"): 2, ord("D"): 8, ord("F"): 4,
    ord("I"): 4, ord("J"): 8, ord("S"): 2, ord("Z"): 1,
}
OBJECT_TYPECODES = (ord("L"), ord("["))

DEFAULT_MAX_DEPTH = 200

_U2 = struct.Struct(">H")
_I4 = struct.Struct(">i")
_I8 = struct.Struct(">q")


class ParseError(Exception):
    """Base class for stream errors.

    ``events`` holds the class events read before the failure and ``offset``
    the stream position at which it was detected.
    """

    code = "ParseError"

    def __init__(self, detail: str, offset: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        self.offset = offset
        self.events: list[ClassEvent] = []

    def to_dict(self) -> dict:
        return {"error": self.code, "detail": self.detail, "offset": self.offset}


class BadMagic(ParseError):
    code = "BadMagic"


class BadVersion(ParseError):
    code = "BadVersion"


class UnsupportedTag(ParseError):
    code = "UnsupportedTag"


class Truncated(ParseError):
    code = "Truncated"


class TrailingData(ParseError):
    """Bytes after the top-level object graph; one graph per stream is supported."""

    code = "TrailingData"


class BadHandle(ParseError):
    code = "BadHandle"


class MalformedStream(ParseError):
    code = "MalformedStream"


class DepthExceeded(MalformedStream):
    code = "DepthExceeded"


@dataclass(frozen=True)
class ClassEvent:
    class_name: str
    kind: str  # plain | proxy | enum | array
    offset: int

    def to_dict(self) -> dict:
        return {"class": self.class_name, "kind": self.kind, "offset": self.offset}


@dataclass(frozen=True)
class TraceRecord:
    label: str = "unlabeled"
    events: tuple[ClassEvent, ...] = ()
    source: str = ""

    @property
    def class_names(self) -> list[str]:
        return [e.class_name for e in self.events]


@dataclass
class _Desc:
    name: str
    flags: int
    fields: list = field(default_factory=list)  # (typecode, name)
    super_desc: Optional["_Desc"] = None
    proxy: bool = False


_STRING = object()  # handle-table marker for string objects
_OTHER = object()  # objects, arrays, enums and class objects


class _Reader:
    """Suspending recursive-descent walker. All ``_read*`` methods are generators."""

    def __init__(self, max_depth: int):
        self.max_depth = max_depth
        self.buf = bytearray()
        self.pos = 0
        self.base = 0  # absolute offset of buf[0]
        self.eof = False
        self.events: list[ClassEvent] = []
        self.handles: list = []
        self.closed = False

    @property
    def offset(self) -> int:
        return self.base + self.pos

    def compact(self) -> None:
        if self.pos > 65536:
            del self.buf[: self.pos]
            self.base += self.pos
            self.pos = 0

    # -- primitive reads ---------------------------------------------------

    def _need(self, n: int):
        while len(self.buf) - self.pos < n:
            if self.eof:
                raise Truncated(f"stream ends inside an element ({n} more bytes needed)", self.offset)
            yield

    def _u1(self):
        if self.pos >= len(self.buf):
            yield from self._need(1)
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def _u2(self):
        yield from self._need(2)
        (v,) = _U2.unpack_from(self.buf, self.pos)
        self.pos += 2
        return v

    def _i4(self):
        yield from self._need(4)
        (v,) = _I4.unpack_from(self.buf, self.pos)
        self.pos += 4
        return v

    def _i8(self):
        yield from self._need(8)
        (v,) = _I8.unpack_from(self.buf, self.pos)
        self.pos += 8
        return v

    def _skip(self, n: int):
        # Declared lengths are never allocated; bytes are consumed as they arrive.
        while n > 0:
            avail = len(self.buf) - self.pos
            if avail == 0:
                if self.eof:
                    raise Truncated(f"stream ends {n} bytes short of a declared length", self.offset)
                yield
                continue
            take = min(avail, n)
            self.pos += take
            n -= take

    def _utf(self):
        start = self.offset
        n = yield from self._u2()
        yield from self._need(n)
        raw = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        try:
            return _mutf8.decode(raw)
        except UnicodeDecodeError:
            raise MalformedStream("invalid modified UTF-8 string", start) from None

    # -- grammar -------------------------------------------------------------

    def run(self):
        yield from self._need_header(2, BadMagic, "not a serialization stream (too short)")
        magic = yield from self._u2()
        if magic != STREAM_MAGIC:
            raise BadMagic(f"bad stream magic 0x{magic:04X}", 0)
        version = yield from self._u2()
        if version != STREAM_VERSION:
            raise BadVersion(f"unsupported stream version {version}", 2)
        while True:
            if len(self.buf) - self.pos < 1:
                while len(self.buf) - self.pos < 1 and not self.eof:
                    yield
                if len(self.buf) - self.pos < 1:
                    break  # empty body
            tag = self.buf[self.pos]
            if tag in (TC_BLOCKDATA, TC_BLOCKDATALONG):
                self.pos += 1
                yield from self._skip_block(tag)
                continue
            yield from self._content(1)
            break
        self.closed = True
        yield  # let the session observe the end of the graph
        while True:
            if len(self.buf) > self.pos:
                raise TrailingData("data after the top-level object graph", self.offset)
            if self.eof:
                return
            yield

    def _need_header(self, n, exc, detail):
        while len(self.buf) < n:
            if self.buf and self.buf[0] != STREAM_MAGIC >> 8:
                raise exc(f"bad stream magic byte 0x{self.buf[0]:02X}", 0)
            if self.eof:
                raise exc(detail, 0)
            yield

    def _skip_block(self, tag):
        if tag == TC_BLOCKDATA:
            n = yield from self._u1()
        else:
            n = yield from self._i4()
            if n < 0:
                raise MalformedStream(f"negative block data length {n}", self.offset - 4)
        yield from self._skip(n)

    def _new_handle(self, value) -> None:
        self.handles.append(value)

    def _handle(self):
        at = self.offset
        raw = yield from self._i4()
        idx = raw - BASE_WIRE_HANDLE
        if not 0 <= idx < len(self.handles):
            raise BadHandle(f"reference to unknown handle 0x{raw & 0xFFFFFFFF:08X}", at)
        return self.handles[idx]

    def _content(self, depth):
        """Read one object-position element."""
        if depth > self.max_depth:
            raise DepthExceeded(f"object graph nested deeper than {self.max_depth}", self.offset)
        at = self.offset
        tag = yield from self._u1()
        if tag == TC_NULL:
            return None
        if tag == TC_REFERENCE:
            return (yield from self._handle())
        if tag == TC_STRING:
            n = yield from self._u2()
            yield from self._skip(n)
            self._new_handle(_STRING)
            return _STRING
        if tag == TC_LONGSTRING:
            n = yield from self._i8()
            if n < 0:
                raise MalformedStream(f"negative long string length {n}", at)
            yield from self._skip(n)
            self._new_handle(_STRING)
            return _STRING
        if tag == TC_OBJECT:
            desc = yield from self._class_desc(depth, at)
            if desc is None:
                raise MalformedStream("object without a class descriptor", at)
            self._new_handle(_OTHER)
            yield from self._class_data(desc, depth)
            return _OTHER
        if tag == TC_ARRAY:
            desc = yield from self._class_desc(depth, at)
            if desc is None or not desc.name.startswith("[") or len(desc.name) < 2:
                raise MalformedStream("array without an array class descriptor", at)
            self._new_handle(_OTHER)
            size = yield from self._i4()
            if size < 0:
                raise MalformedStream(f"negative array length {size}", self.offset - 4)
            width = PRIMITIVE_WIDTHS.get(ord(desc.name[1]))
            if width is not None:
                yield from self._skip(size * width)
            elif ord(desc.name[1]) in OBJECT_TYPECODES:
                for _ in range(size):
                    yield from self._content(depth + 1)
            else:
                raise MalformedStream(f"bad array component in {desc.name!r}", at)
            return _OTHER
        if tag == TC_ENUM:
            desc = yield from self._class_desc(depth, at)
            if desc is None:
                raise MalformedStream("enum without a class descriptor", at)
            self._new_handle(_OTHER)
            name_at = self.offset
            constant = yield from self._content(depth + 1)
            if constant is not _STRING:
                raise MalformedStream("enum constant name is not a string", name_at)
            return _OTHER
        if tag == TC_CLASS:
            desc = yield from self._class_desc(depth, at)
            if desc is None:
                raise MalformedStream("class object without a descriptor", at)
            self._new_handle(_OTHER)
            return _OTHER
        if tag in (TC_CLASSDESC, TC_PROXYCLASSDESC):
            self.pos -= 1
            return (yield from self._class_desc(depth, at))
        if tag in (TC_RESET, TC_EXCEPTION):
            name = "TC_RESET" if tag == TC_RESET else "TC_EXCEPTION"
            raise UnsupportedTag(f"{name} is not supported", at)
        if tag in (TC_BLOCKDATA, TC_BLOCKDATALONG, TC_ENDBLOCKDATA):
            raise MalformedStream(f"block data tag 0x{tag:02X} where an object was expected", at)
        raise UnsupportedTag(f"unknown tag 0x{tag:02X}", at)

    def _class_desc(self, depth, owner_at):
        if depth > self.max_depth:
            raise DepthExceeded(f"descriptor chain deeper than {self.max_depth}", self.offset)
        at = self.offset
        tag = yield from self._u1()
        if tag == TC_NULL:
            return None
        if tag == TC_REFERENCE:
            desc = yield from self._handle()
            if not isinstance(desc, _Desc):
                raise BadHandle("class descriptor reference points at a non-descriptor", at)
            return desc
        if tag == TC_CLASSDESC:
            name = yield from self._utf()
            if not name:
                raise MalformedStream("empty class name", at)
            yield from self._skip(8)  # serialVersionUID
            desc = _Desc(name=name, flags=0)
            self._new_handle(desc)
            desc.flags = yield from self._u1()
            count = yield from self._u2()
            if count & 0x8000:
                raise MalformedStream(f"negative field count {count - 0x10000}", self.offset - 2)
            for _ in range(count):
                code_at = self.offset
                code = yield from self._u1()
                fname = yield from self._utf()
                if code in OBJECT_TYPECODES:
                    type_at = self.offset
                    type_name = yield from self._content(depth + 1)
                    if type_name is not _STRING:
                        raise MalformedStream("field type is not a string", type_at)
                elif code not in PRIMITIVE_WIDTHS:
                    raise MalformedStream(f"bad field typecode 0x{code:02X}", code_at)
                desc.fields.append((code, fname))
            if name.startswith("["):
                kind = "array"
            elif desc.flags & SC_ENUM:
                kind = "enum"
            else:
                kind = "plain"
            self.events.append(ClassEvent(name, kind, at))
            yield from self._annotation(depth)
            desc.super_desc = yield from self._class_desc(depth + 1, at)
            return desc
        if tag == TC_PROXYCLASSDESC:
            desc = _Desc(name="", flags=SC_SERIALIZABLE, proxy=True)
            self._new_handle(desc)
            count = yield from self._i4()
            if not 0 <= count <= 65535:
                raise MalformedStream(f"bad proxy interface count {count}", self.offset - 4)
            names = []
            for _ in range(count):
                name_at = self.offset
                iface = yield from self._utf()
                if not iface:
                    raise MalformedStream("empty proxy interface name", name_at)
                names.append((iface, name_at))
            for iface, name_at in names:
                self.events.append(ClassEvent(iface, "proxy", name_at))
            desc.name = names[0][0] if names else "<proxy>"
            yield from self._annotation(depth)
            desc.super_desc = yield from self._class_desc(depth + 1, at)
            return desc
        if tag in (TC_RESET, TC_EXCEPTION):
            raise UnsupportedTag(f"tag 0x{tag:02X} in descriptor position is not supported", at)
        raise MalformedStream(f"tag 0x{tag:02X} where a class descriptor was expected", at)

    def _annotation(self, depth):
        """Custom data: block data segments and objects up to TC_ENDBLOCKDATA."""
        while True:
            yield from self._need(1)
            tag = self.buf[self.pos]
            if tag == TC_ENDBLOCKDATA:
                self.pos += 1
                return
            if tag in (TC_BLOCKDATA, TC_BLOCKDATALONG):
                self.pos += 1
                yield from self._skip_block(tag)
            else:
                yield from self._content(depth + 1)

    def _class_data(self, desc, depth):
        if desc.flags & SC_EXTERNALIZABLE:
            if not desc.flags & SC_BLOCK_DATA:
                raise UnsupportedTag("externalizable data written without block mode", self.offset)
            yield from self._annotation(depth)
            return
        chain = []
        d = desc
        while d is not None:
            if d in chain:
                raise MalformedStream("cyclic superclass descriptor chain", self.offset)
            chain.append(d)
            d = d.super_desc
        for d in reversed(chain):
            if d.proxy or not d.flags & SC_SERIALIZABLE:
                continue
            for code, _name in d.fields:
                width = PRIMITIVE_WIDTHS.get(code)
                if width is not None:
                    yield from self._skip(width)
                else:
                    yield from self._content(depth + 1)
            if d.flags & SC_WRITE_METHOD:
                yield from self._annotation(depth)


class StreamSession:
    """Incremental parse of one stream.

    Feed chunks in order with :meth:`feed`; call :meth:`close` once the input
    is exhausted. Both return the class events completed by that call and a
    flag that is true only on the call during which the top-level object
    graph closed.
    """

    def __init__(self, max_depth: int = DEFAULT_MAX_DEPTH):
        self._reader = _Reader(max_depth)
        self._gen: Optional[Iterator] = self._reader.run()
        self._emitted = 0
        self.ended = False
        self.error: Optional[ParseError] = None

    @property
    def events(self) -> list[ClassEvent]:
        return list(self._reader.events)

    def _advance(self) -> tuple[list[ClassEvent], bool]:
        if self.error is not None:
            raise self.error
        was_ended = self.ended
        try:
            if self._gen is not None:
                next(self._gen)
        except StopIteration:
            self._gen = None
        except ParseError as exc:
            exc.events = list(self._reader.events)
            self.error = exc
            self._gen = None
            raise
        except RecursionError:
            exc = DepthExceeded("object graph too deep for this interpreter", self._reader.offset)
            exc.events = list(self._reader.events)
            self.error = exc
            self._gen = None
            raise exc from None
        self.ended = self._reader.closed
        events = self._reader.events
        new = events[self._emitted :]
        self._emitted = len(events)
        self._reader.compact()
        return new, self.ended and not was_ended

    def feed(self, chunk: bytes) -> tuple[list[ClassEvent], bool]:
        if self.error is None and self._reader.eof:
            raise ValueError("session already closed")
        self._reader.buf += chunk
        new, ended = self._advance()
        if self._reader.closed and self._gen is not None and len(self._reader.buf) > self._reader.pos:
            more, _ = self._advance()
            new += more
        return new, ended

    def close(self) -> tuple[list[ClassEvent], bool]:
        self._reader.eof = True
        new, ended = self._advance()
        if self._gen is not None:
            more, ended2 = self._advance()
            new += more
            ended = ended or ended2
        return new, ended


def parse_incremental(session: StreamSession, chunk: bytes) -> tuple[list[ClassEvent], bool]:
    return session.feed(chunk)


def parse_stream(data: bytes, label: str = "unlabeled", source: str = "",
                 max_depth: int = DEFAULT_MAX_DEPTH) -> TraceRecord:
    """Parse a complete stream. Raises :class:`ParseError` (with partial ``events``)."""
    session = StreamSession(max_depth=max_depth)
    session.feed(bytes(data))
    session.close()
    return TraceRecord(label=label, events=tuple(session.events), source=source)


def _dumps(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"))


def events_to_jsonl(events, error: Optional[ParseError] = None) -> str:
    """Render events as JSONL, closed by an ``end`` or ``error`` line."""
    lines = [_dumps(e.to_dict()) for e in events]
    if error is None:
        lines.append(_dumps({"end": True}))
    else:
        lines.append(_dumps(error.to_dict()))
    return "\n".join(lines) + "\n"
