"""Rebuild the Java-derived test fixtures.

Needs a Java runtime and the Janino compiler jars (janino + commons-compiler).
Locations are taken from $JAVA and $JANINO_CP, falling back to /opt/jtools.

Outputs (all under tests/fixtures/):
  classes/fx/*.class        compiled feature fixtures
  classes/oracle.txt        reflection view of features 2-6 for each fixture
  java/bin/tools/*.class    helper programs used by the JDK test at run time
  streams/NAME.bin          JVM-written serialization streams
  streams/NAME.jvmfilter.txt  ObjectInputFilter callbacks seen while reading NAME.bin
  streams/NAME.expected.jsonl expected parser output, derived from the two above

The expected event lists are computed from the JVM callbacks and a plain byte
search of the stream, not from the parser under test.
"""

import glob
import json
import os
import shutil
import struct
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
FIX = os.path.join(ROOT, "tests", "fixtures")
SRC = os.path.join(FIX, "java", "src")

SC_ENUM = 0x10


# JDK classes whose reflection view is recorded next to the fixtures
JDK_ORACLE = ["java.util.HashMap", "java.util.Hashtable", "java.util.PriorityQueue", "java.util.TreeMap",
              "java.lang.String"]


def java_cmd():
    java = os.environ.get("JAVA") or shutil.which("java") or "/opt/jtools/jre/bin/java"
    cp = os.environ.get("JANINO_CP") or os.pathsep.join(sorted(glob.glob("/opt/jtools/*.jar")))
    return java, cp


def compile_java(java, janino_cp, sources, outdir, classpath=None):
    os.makedirs(outdir, exist_ok=True)
    cmd = [java, "-cp", janino_cp, "org.codehaus.commons.compiler.samples.CompilerDemo",
           "-rebuild", "-d", outdir]
    if classpath:
        cmd += ["-classpath", classpath]
    subprocess.run(cmd + sources, check=True)


def expected_events(data, filter_log):
    """Reduce JVM filter callbacks to one event per class descriptor in the stream."""
    names = []
    for line in filter_log.splitlines():
        name, array_len, _depth, _nbytes = line.split(" ")
        # "-" lines are reference/depth checks; array_len >= 0 is the JVM rechecking
        # an array class it already reported, with its length.
        if name == "-" or int(array_len) >= 0:
            continue
        names.append(name)
    events = []
    pos = 0
    for name in names:
        raw = name.encode("utf-8")
        utf = struct.pack(">H", len(raw)) + raw
        at = data.find(b"\x72" + utf, pos)
        if at >= 0:
            flags = data[at + 1 + len(utf) + 8]
            if name.startswith("["):
                kind = "array"
            elif flags & SC_ENUM:
                kind = "enum"
            else:
                kind = "plain"
            events.append({"class": name, "kind": kind, "offset": at})
            pos = at + 1
            continue
        at = data.find(utf, pos)
        # Interface names of a proxy descriptor; the generated proxy class itself
        # never appears in the stream and is dropped here.
        if at >= 0 and b"\x7d" in data[max(0, at - 400):at]:
            events.append({"class": name, "kind": "proxy", "offset": at})
            pos = at + 1
    return events


def main():
    java, janino_cp = java_cmd()
    classes = os.path.join(FIX, "classes")
    shutil.rmtree(os.path.join(classes, "fx"), ignore_errors=True)
    compile_java(java, janino_cp, sorted(glob.glob(os.path.join(SRC, "fx", "*.java"))), classes)
    helpers = os.path.join(FIX, "java", "bin")
    compile_java(java, janino_cp, sorted(glob.glob(os.path.join(SRC, "tools", "*.java"))), helpers)

    fx_names = sorted("fx." + os.path.basename(p)[:-6]
                      for p in glob.glob(os.path.join(classes, "fx", "*.class")))
    out = subprocess.run([java, "-cp", classes + os.pathsep + helpers, "tools.FeatureOracle"] + fx_names + JDK_ORACLE,
                         check=True, capture_output=True, text=True).stdout
    with open(os.path.join(classes, "oracle.txt"), "w") as fh:
        fh.write(out)

    streams = os.path.join(FIX, "streams")
    os.makedirs(streams, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        compile_java(java, janino_cp, sorted(glob.glob(os.path.join(SRC, "sf", "*.java"))), tmp)
        subprocess.run([java, "-cp", tmp, "sf.StreamFixtures", streams], check=True)

    for path in sorted(glob.glob(os.path.join(streams, "*.bin"))):
        stem = path[:-4]
        with open(path, "rb") as fh:
            data = fh.read()
        with open(stem + ".jvmfilter.txt") as fh:
            log = fh.read()
        lines = [json.dumps(e, separators=(",", ":")) for e in expected_events(data, log)]
        lines.append(json.dumps({"end": True}, separators=(",", ":")))
        with open(stem + ".expected.jsonl", "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(os.path.basename(stem), len(lines) - 1, "events")


if __name__ == "__main__":
    sys.exit(main())
