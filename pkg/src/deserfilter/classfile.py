"""Minimal JVM class-file reader.

Decodes what feature extraction needs: the constant pool, this/super class,
direct interfaces, the field and method tables, and every method reference
in the pool. Attributes (method bodies included) are skipped by length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from . import _mutf8

CLASS_MAGIC = 0xCAFEBABE

CONSTANT_Utf8 = 1
CONSTANT_Integer = 3
CONSTANT_Float = 4
CONSTANT_Long = 5
CONSTANT_Double = 6
CONSTANT_Class = 7
CONSTANT_String = 8
CONSTANT_Fieldref = 9
CONSTANT_Methodref = 10
CONSTANT_InterfaceMethodref = 11
CONSTANT_NameAndType = 12
CONSTANT_MethodHandle = 15
CONSTANT_MethodType = 16
CONSTANT_Dynamic = 17
CONSTANT_InvokeDynamic = 18
CONSTANT_Module = 19
CONSTANT_Package = 20

# Payload size after the tag byte; Utf8 is variable.
_FIXED_SIZES = {
    CONSTANT_Integer: 4, CONSTANT_Float: 4, CONSTANT_Long: 8, CONSTANT_Double: 8,
    CONSTANT_Class: 2, CONSTANT_String: 2, CONSTANT_Fieldref: 4, CONSTANT_Methodref: 4,
    CONSTANT_InterfaceMethodref: 4, CONSTANT_NameAndType: 4, CONSTANT_MethodHandle: 3,
    CONSTANT_MethodType: 2, CONSTANT_Dynamic: 4, CONSTANT_InvokeDynamic: 4,
    CONSTANT_Module: 2, CONSTANT_Package: 2,
}

ACC_PUBLIC = 0x0001
ACC_PRIVATE = 0x0002
ACC_STATIC = 0x0008
ACC_INTERFACE = 0x0200
ACC_ABSTRACT = 0x0400


class ClassFormatError(Exception):
    code = "ClassFormatError"


class BadClassMagic(ClassFormatError):
    code = "BadClassMagic"


class MalformedConstantPool(ClassFormatError):
    code = "MalformedConstantPool"


class Truncated(ClassFormatError):
    code = "Truncated"


@dataclass(frozen=True)
class MemberInfo:
    name: str
    descriptor: str
    access_flags: int = 0


@dataclass(frozen=True)
class MethodRef:
    owner: str
    name: str
    descriptor: str


@dataclass
class ClassInfo:
    name: str
    super_name: Optional[str]
    interfaces: list[str] = field(default_factory=list)
    fields: list[MemberInfo] = field(default_factory=list)
    methods: list[MemberInfo] = field(default_factory=list)
    method_refs: list[MethodRef] = field(default_factory=list)
    access_flags: int = 0
    version: tuple[int, int] = (0, 0)


def dotted(internal_name: str) -> str:
    return internal_name.replace("/", ".")


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise Truncated(f"class file ends at {len(self.data)}, needed {end}")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def u1(self) -> int:
        return self.take(1)[0]

    def u2(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u4(self) -> int:
        return struct.unpack(">I", self.take(4))[0]


class ConstantPool:
    def __init__(self, entries: list):
        self.entries = entries  # index -> (tag, payload) or None

    def _get(self, index: int, *tags: int):
        if not 0 < index < len(self.entries) or self.entries[index] is None:
            raise MalformedConstantPool(f"bad constant pool index {index}")
        tag, value = self.entries[index]
        if tags and tag not in tags:
            raise MalformedConstantPool(f"constant #{index} has tag {tag}, expected {tags}")
        return value

    def utf8(self, index: int) -> str:
        return self._get(index, CONSTANT_Utf8)

    def class_name(self, index: int) -> str:
        return self.utf8(self._get(index, CONSTANT_Class))

    def method_refs(self) -> list[MethodRef]:
        refs = []
        for entry in self.entries:
            if entry is None or entry[0] not in (CONSTANT_Methodref, CONSTANT_InterfaceMethodref):
                continue
            class_index, nat_index = entry[1]
            name_index, desc_index = self._get(nat_index, CONSTANT_NameAndType)
            refs.append(MethodRef(dotted(self.class_name(class_index)),
                                  self.utf8(name_index), self.utf8(desc_index)))
        return refs


def _read_pool(cur: _Cursor) -> ConstantPool:
    count = cur.u2()
    if count == 0:
        raise MalformedConstantPool("constant pool count is zero")
    entries: list = [None] * count
    i = 1
    while i < count:
        tag = cur.u1()
        if tag == CONSTANT_Utf8:
            raw = cur.take(cur.u2())
            try:
                entries[i] = (tag, _mutf8.decode(raw))
            except UnicodeDecodeError:
                raise MalformedConstantPool(f"constant #{i} is not valid modified UTF-8") from None
        elif tag in _FIXED_SIZES:
            raw = cur.take(_FIXED_SIZES[tag])
            if tag in (CONSTANT_Class, CONSTANT_String, CONSTANT_MethodType,
                       CONSTANT_Module, CONSTANT_Package):
                entries[i] = (tag, struct.unpack(">H", raw)[0])
            elif tag in (CONSTANT_Fieldref, CONSTANT_Methodref, CONSTANT_InterfaceMethodref,
                         CONSTANT_NameAndType, CONSTANT_Dynamic, CONSTANT_InvokeDynamic):
                entries[i] = (tag, struct.unpack(">HH", raw))
            else:
                entries[i] = (tag, raw)
        else:
            raise MalformedConstantPool(f"unknown constant tag {tag} at #{i}")
        # 8-byte constants occupy two slots.
        i += 2 if tag in (CONSTANT_Long, CONSTANT_Double) else 1
    return ConstantPool(entries)


def _skip_attributes(cur: _Cursor) -> None:
    for _ in range(cur.u2()):
        cur.take(2)
        cur.take(cur.u4())


def _read_members(cur: _Cursor, pool: ConstantPool) -> list[MemberInfo]:
    members = []
    for _ in range(cur.u2()):
        flags = cur.u2()
        name = pool.utf8(cur.u2())
        desc = pool.utf8(cur.u2())
        _skip_attributes(cur)
        members.append(MemberInfo(name, desc, flags))
    return members


def parse_class(data: bytes) -> ClassInfo:
    cur = _Cursor(bytes(data))
    if len(cur.data) < 4 or cur.u4() != CLASS_MAGIC:
        raise BadClassMagic("not a class file")
    minor, major = cur.u2(), cur.u2()
    pool = _read_pool(cur)
    access = cur.u2()
    name = dotted(pool.class_name(cur.u2()))
    super_index = cur.u2()
    super_name = dotted(pool.class_name(super_index)) if super_index else None
    interfaces = [dotted(pool.class_name(cur.u2())) for _ in range(cur.u2())]
    fields = _read_members(cur, pool)
    methods = _read_members(cur, pool)
    _skip_attributes(cur)
    return ClassInfo(
        name=name,
        super_name=super_name,
        interfaces=interfaces,
        fields=fields,
        methods=methods,
        method_refs=pool.method_refs(),
        access_flags=access,
        version=(major, minor),
    )
