"""Boolean class features and the state catalog built over them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

FEATURE_NAMES = (
    "uses_reflection",
    "overrides_read_object",
    "overrides_hash_code",
    "has_generic_field",
    "implements_map",
    "implements_comparator",
    "calls_hash_code",
    "calls_compare",
)
WIDTH = len(FEATURE_NAMES)


@dataclass(frozen=True)
class FeatureVector:
    """Ordered tuple of Boolean class features; index 0 is feature 1."""

    bits: tuple[bool, ...]

    def __post_init__(self):
        if not all(isinstance(b, bool) for b in self.bits):
            object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))
        if len(self.bits) != WIDTH:
            raise ValueError(f"feature vector needs {WIDTH} bits, got {len(self.bits)}")

    @classmethod
    def parse(cls, text: str) -> "FeatureVector":
        if len(text) != WIDTH or set(text) - {"0", "1"}:
            raise ValueError(f"not a {WIDTH}-bit feature string: {text!r}")
        return cls(tuple(c == "1" for c in text))

    @classmethod
    def zeros(cls) -> "FeatureVector":
        return cls((False,) * WIDTH)

    @classmethod
    def of(cls, **flags: bool) -> "FeatureVector":
        unknown = set(flags) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown features: {sorted(unknown)}")
        return cls(tuple(bool(flags.get(n, False)) for n in FEATURE_NAMES))

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    def __getitem__(self, name: str) -> bool:
        return self.bits[FEATURE_NAMES.index(name)]


class StateCatalog:
    """Bijection between observed feature vectors and Markov states.

    The state after the last observed vector is the generic OTHER state; every
    vector not seen in training maps there.
    """

    def __init__(self, states: Sequence[FeatureVector] = (), width: int = WIDTH):
        self.width = width
        self._states = tuple(states)
        self._index = {v: i for i, v in enumerate(self._states)}
        if len(self._index) != len(self._states):
            raise ValueError("duplicate feature vectors in catalog")
        if any(len(v.bits) != width for v in self._states):
            raise ValueError("feature vector width does not match catalog")

    @property
    def states(self) -> tuple[FeatureVector, ...]:
        return self._states

    @property
    def other_index(self) -> int:
        return len(self._states)

    @property
    def size(self) -> int:
        """Number of Markov states, OTHER included."""
        return len(self._states) + 1

    def encode(self, v: FeatureVector) -> int:
        return self._index.get(v, self.other_index)

    def encode_all(self, vectors: Iterable[FeatureVector]) -> list[int]:
        return [self.encode(v) for v in vectors]

    def __eq__(self, other):
        return isinstance(other, StateCatalog) and (self.width, self._states) == (other.width, other._states)

    def __hash__(self):
        return hash((self.width, self._states))

    def __repr__(self):
        return f"StateCatalog({[str(v) for v in self._states]!r})"

    def to_dict(self) -> dict:
        return {"width": self.width, "states": [str(v) for v in self._states]}

    @classmethod
    def from_dict(cls, data: dict) -> "StateCatalog":
        width = int(data.get("width", WIDTH))
        if width != WIDTH:
            raise ValueError(f"unsupported catalog width {width}")
        return cls([FeatureVector.parse(s) for s in data["states"]], width=width)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "StateCatalog":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_catalog(training_vectors: Iterable[FeatureVector]) -> StateCatalog:
    """Distinct vectors in first-occurrence order, OTHER implied last."""
    return StateCatalog(list(dict.fromkeys(training_vectors)))


def encode(catalog: StateCatalog, v: FeatureVector) -> int:
    return catalog.encode(v)
