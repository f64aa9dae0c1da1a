"""Decoding of the JVM's "modified UTF-8" string encoding."""


def decode(raw: bytes) -> str:
    """Decode modified UTF-8 (NUL as C0 80, supplementary chars as surrogate pairs).

    Raises UnicodeDecodeError on byte sequences that are not valid in either form.
    """
    if raw.isascii():
        return raw.decode("ascii")
    text = raw.replace(b"\xc0\x80", b"\x00").decode("utf-8", "surrogatepass")
    # Recombine surrogate pairs; lone surrogates survive as-is.
    return text.encode("utf-16-le", "surrogatepass").decode("utf-16-le", "surrogatepass")
