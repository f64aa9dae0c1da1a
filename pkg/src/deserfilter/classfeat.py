"""Feature extraction for JVM classes, read offline from class roots."""

from __future__ import annotations

import json
import logging
import os
import threading
import zipfile
from typing import Iterable, Optional

from .classfile import ACC_ABSTRACT, ClassInfo, parse_class
from .features import FeatureVector

log = logging.getLogger(__name__)

REFLECTION_CALLS = {
    ("java.lang.reflect.Constructor", "newInstance"),
    ("java.lang.reflect.Field", "set"),
    ("java.lang.reflect.Method", "invoke"),
}
READ_OBJECT = ("readObject", "(Ljava/io/ObjectInputStream;)V")
HASH_CODE = ("hashCode", "()I")
GENERIC_FIELD_TYPES = {"Ljava/lang/Object;", "Ljava/lang/Comparable;", "Ljava/util/Comparator;"}
MAP = "java.util.Map"
COMPARATOR = "java.util.Comparator"
COMPARE_NAMES = {"compare", "compareTo"}

ARCHIVE_SUFFIXES = (".jar", ".zip", ".war", ".ear")


class ClassResolver:
    """Finds and caches classes by dotted name across ordered search roots.

    Roots are directories laid out by package, or ZIP-format archives. The
    first root holding a class wins.
    """

    def __init__(self, roots: Iterable = ()):
        self.roots = [os.fspath(r) for r in roots]
        self._archives: dict[str, zipfile.ZipFile] = {}
        self._cache: dict[str, Optional[ClassInfo]] = {}
        self._lock = threading.Lock()
        for root in self.roots:
            if not os.path.exists(root):
                raise FileNotFoundError(f"class root does not exist: {root}")
            if os.path.isfile(root):
                self._archives[root] = zipfile.ZipFile(root)

    def close(self) -> None:
        for zf in self._archives.values():
            zf.close()
        self._archives.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_bytes(self, name: str) -> Optional[bytes]:
        entry = name.replace(".", "/") + ".class"
        for root in self.roots:
            zf = self._archives.get(root)
            if zf is not None:
                try:
                    return zf.read(entry)
                except KeyError:
                    continue
            else:
                path = os.path.join(root, *entry.split("/"))
                if os.path.isfile(path):
                    with open(path, "rb") as fh:
                        return fh.read()
        return None

    def resolve(self, name: str) -> Optional[ClassInfo]:
        with self._lock:
            if name in self._cache:
                return self._cache[name]
            data = self._read_bytes(name)
            info = parse_class(data) if data is not None else None
            self._cache[name] = info
            return info

    def names(self) -> list[str]:
        """Every class name present under the roots, in root order."""
        seen = dict()
        for root in self.roots:
            zf = self._archives.get(root)
            if zf is not None:
                entries = zf.namelist()
            else:
                entries = []
                for dirpath, _dirs, files in os.walk(root):
                    for f in files:
                        entries.append(os.path.relpath(os.path.join(dirpath, f), root).replace(os.sep, "/"))
            for e in sorted(entries):
                if e.endswith(".class") and not e.startswith("META-INF/"):
                    seen.setdefault(e[: -len(".class")].replace("/", "."), None)
        return list(seen)


def ancestors(info: ClassInfo, resolver: Optional[ClassResolver]) -> set[str]:
    """Names of all superclasses and superinterfaces of ``info``.

    Ancestors that cannot be resolved still count by name; their own parents
    are unknown and a warning is logged.
    """
    found: set[str] = set()
    todo = ([info.super_name] if info.super_name else []) + list(info.interfaces)
    while todo:
        name = todo.pop()
        if name in found:
            continue
        found.add(name)
        parent = resolver.resolve(name) if resolver is not None else None
        if parent is None:
            if name != "java.lang.Object":
                log.warning("cannot resolve ancestor %s of %s", name, info.name)
            continue
        if parent.super_name:
            todo.append(parent.super_name)
        todo.extend(parent.interfaces)
    return found


def inherits_hash_code(info: ClassInfo, resolver: Optional[ClassResolver]) -> bool:
    """True if a superclass below Object declares a concrete ``hashCode()``."""
    seen = set()
    name = info.super_name
    while resolver is not None and name and name != "java.lang.Object" and name not in seen:
        seen.add(name)
        parent = resolver.resolve(name)
        if parent is None:
            return False
        for m in parent.methods:
            if (m.name, m.descriptor) == HASH_CODE and not m.access_flags & ACC_ABSTRACT:
                return True
        name = parent.super_name
    return False


def extract_features(info: ClassInfo, resolver: Optional[ClassResolver] = None) -> FeatureVector:
    methods = {(m.name, m.descriptor) for m in info.methods}
    refs = info.method_refs
    supers = ancestors(info, resolver)
    return FeatureVector((
        any((r.owner, r.name) in REFLECTION_CALLS for r in refs),
        READ_OBJECT in methods,
        # the hashCode a call on this class dispatches to is not Object's
        HASH_CODE in methods or inherits_hash_code(info, resolver),
        any(f.descriptor in GENERIC_FIELD_TYPES for f in info.fields),
        MAP in supers,
        COMPARATOR in supers,
        any((r.owner == "java.util.Objects" and r.name in ("hash", "hashCode"))
            or (r.name, r.descriptor) == HASH_CODE for r in refs),
        any(r.name in COMPARE_NAMES for r in refs),
    ))


def scan_corpus(resolver: ClassResolver, class_names: Iterable[str]) -> dict[str, FeatureVector]:
    """Feature vector per class name; unresolvable names get the all-false vector."""
    out: dict[str, FeatureVector] = {}
    for name in class_names:
        if name in out:
            continue
        if name.startswith("["):
            # Array classes have no class file; they carry no features of their own.
            out[name] = FeatureVector.zeros()
            continue
        info = resolver.resolve(name)
        if info is None:
            log.warning("class %s not found on any root; using all-false features", name)
            out[name] = FeatureVector.zeros()
        else:
            out[name] = extract_features(info, resolver)
    return out


def dump_feature_map(mapping: dict[str, FeatureVector], path) -> None:
    with open(path, "w") as fh:
        json.dump({k: str(v) for k, v in sorted(mapping.items())}, fh, indent=1)
        fh.write("\n")


def load_feature_map(path) -> dict[str, FeatureVector]:
    with open(path) as fh:
        return {k: FeatureVector.parse(v) for k, v in json.load(fh).items()}
