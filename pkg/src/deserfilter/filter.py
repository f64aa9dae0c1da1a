"""Per-stream accept/reject filter over benign and malicious chain ensembles.

A session receives classes one at a time, in deserialization order. After
each class it compares the benign and malicious mean log probabilities of
the sequence so far, each widened to an interval of ``t`` standard
deviations across its ensemble, and returns ``accepted``, ``rejected`` or
``undecided``. A terminal answer is latched.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import jdeser
from .bayes import LOG_FLOOR, PosteriorEnsemble, aggregate
from .features import FeatureVector, StateCatalog

log = logging.getLogger(__name__)

ACCEPTED = "accepted"
REJECTED = "rejected"
UNDECIDED = "undecided"


class MalformedTrace(ValueError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    t: float = 2.0
    l: float = math.inf

    def __post_init__(self):
        if not self.t >= 0:
            raise ValueError("t must be nonnegative")
        if not (self.l >= 1 and (self.l == math.inf or float(self.l).is_integer())):
            raise ValueError("l must be a positive integer or infinity")


def disjoint(m_b: float, s_b: float, m_m: float, s_m: float, t: float) -> bool:
    """True when [m_b +- t*s_b] and [m_m +- t*s_m] share no point."""
    return m_b + t * s_b < m_m - t * s_m or m_m + t * s_m < m_b - t * s_b


def decide(m_b: float, s_b: float, m_m: float, s_m: float, n: int, end: bool,
           config: FilterConfig) -> tuple[str, bool]:
    """Decision after ``n`` classes; returns (decision, disjoint)."""
    dis = disjoint(m_b, s_b, m_m, s_m, config.t)
    if end:
        if dis:
            return (REJECTED if m_m > m_b else ACCEPTED), dis
        return REJECTED, dis
    if dis and n >= config.l and m_m > m_b:
        return REJECTED, dis
    return UNDECIDED, dis


@dataclass
class StepRecord:
    index: int
    m_b: float
    s_b: float
    m_m: float
    s_m: float
    disjoint: bool
    decision: str
    fault: Optional[str] = None

    def to_dict(self) -> dict:
        num = lambda x: None if math.isnan(x) else x  # faults carry no scores
        out = {"index": self.index, "mB": num(self.m_b), "sB": num(self.s_b), "mM": num(self.m_m),
               "sM": num(self.s_m), "disjoint": self.disjoint, "decision": self.decision}
        if self.fault:
            out["fault"] = self.fault
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(", ", ": "))


def _shared_catalog(benign: PosteriorEnsemble, malicious: PosteriorEnsemble) -> Optional[StateCatalog]:
    if benign.k != malicious.k:
        raise ValueError(f"benign model has {benign.k} states, malicious {malicious.k}")
    if benign.catalog is not None and malicious.catalog is not None and benign.catalog != malicious.catalog:
        raise ValueError("benign and malicious models use different catalogs")
    return benign.catalog or malicious.catalog


class FilterSession:
    """Stateful filter for one stream."""

    def __init__(self, benign: PosteriorEnsemble, malicious: PosteriorEnsemble,
                 config: FilterConfig = FilterConfig(), catalog: Optional[StateCatalog] = None,
                 floor: float = LOG_FLOOR):
        self.benign = benign
        self.malicious = malicious
        self.catalog = catalog or _shared_catalog(benign, malicious)
        self.config = config
        self.floor = floor
        self.seq: list[int] = []
        self.decided: Optional[str] = None
        self.history: list[StepRecord] = []
        self._score_b: Optional[np.ndarray] = None
        self._score_m: Optional[np.ndarray] = None

    def _extend(self, scores, model: PosteriorEnsemble, state: int) -> np.ndarray:
        if not 0 <= state < model.k:
            raise IndexError(f"state {state} outside model with {model.k} states")
        if scores is None:
            return model.log_init[:, state].copy()
        with np.errstate(invalid="ignore"):
            return scores + model.log_tr_by_pair[self.seq[-1], state]

    def step_state(self, state: int, end: bool) -> str:
        if self.decided is not None:
            return self.decided
        score_b = self._extend(self._score_b, self.benign, state)
        score_m = self._extend(self._score_m, self.malicious, state)
        self.seq.append(state)
        self._score_b, self._score_m = score_b, score_m
        m_b, s_b = aggregate(score_b, self.floor)
        m_m, s_m = aggregate(score_m, self.floor)
        decision, dis = decide(m_b, s_b, m_m, s_m, len(self.seq), end, self.config)
        self.history.append(StepRecord(len(self.seq), m_b, s_b, m_m, s_m, dis, decision))
        if decision != UNDECIDED:
            self.decided = decision
        return decision

    def step(self, v: FeatureVector, end: bool) -> str:
        """Encode ``v``, append it and decide. Internal faults reject the stream."""
        if self.decided is not None:
            return self.decided
        try:
            if self.catalog is None:
                raise ValueError("no state catalog available to encode feature vectors")
            return self.step_state(self.catalog.encode(v), end)
        except Exception as exc:  # fail closed
            return self.fault(f"{type(exc).__name__}: {exc}")

    def fault(self, detail: str) -> str:
        if self.decided is None:
            log.warning("filter fault, rejecting stream: %s", detail)
            nan = float("nan")
            self.history.append(StepRecord(len(self.seq), nan, nan, nan, nan, False, REJECTED, detail))
            self.decided = REJECTED
        return self.decided


def run_stream(benign: PosteriorEnsemble, malicious: PosteriorEnsemble, config: FilterConfig,
               events: Iterable[tuple[FeatureVector, bool]]) -> tuple[str, int]:
    """Drive a session over (vector, end) pairs; returns (decision, 1-based index)."""
    events = list(events)
    if not events:
        raise MalformedTrace("empty trace")
    if not events[-1][1] or any(end for _, end in events[:-1]):
        raise MalformedTrace("exactly the last event must carry end=True")
    session = FilterSession(benign, malicious, config)
    for i, (v, end) in enumerate(events, 1):
        decision = session.step(v, end)
        if decision != UNDECIDED:
            return decision, i
    raise AssertionError("end event returned undecided")


def run_vectors(benign, malicious, config, vectors: Sequence[FeatureVector]) -> tuple[str, int]:
    n = len(vectors)
    return run_stream(benign, malicious, config, ((v, i == n - 1) for i, v in enumerate(vectors)))


FeatureLookup = Union[Mapping[str, FeatureVector], Callable[[str], FeatureVector]]


def _lookup_fn(lookup: FeatureLookup) -> Callable[[str], FeatureVector]:
    if callable(lookup):
        return lookup
    def get(name: str) -> FeatureVector:
        v = lookup.get(name)
        if v is None:
            log.warning("no features for class %s; using all-false vector", name)
            return FeatureVector.zeros()
        return v
    return get


@dataclass
class StreamDecision:
    decision: str
    index: int
    history: list = field(default_factory=list)
    error: Optional[jdeser.ParseError] = None


def filter_stream(benign: PosteriorEnsemble, malicious: PosteriorEnsemble, config: FilterConfig,
                  chunks: Iterable[bytes], features: FeatureLookup) -> StreamDecision:
    """Filter a serialized stream as it arrives.

    Each class is handed to the session one event late, so the final class
    can be flagged as the end of the stream once the object graph closes.
    Parse errors, and streams without any class, are rejected.
    """
    get = _lookup_fn(features)
    session = FilterSession(benign, malicious, config)
    parser = jdeser.StreamSession()
    pending: Optional[jdeser.ClassEvent] = None

    def push(ev: jdeser.ClassEvent, end: bool) -> Optional[str]:
        d = session.step(get(ev.class_name), end)
        return None if d == UNDECIDED else d

    def result(decision: str, error=None) -> StreamDecision:
        return StreamDecision(decision, len(session.seq), session.history, error)

    try:
        for chunk in list(chunks) + [None]:
            if chunk is None:
                events, _ = parser.close()
            else:
                events, _ = parser.feed(chunk)
            for ev in events:
                if pending is not None:
                    d = push(pending, False)
                    if d is not None:
                        return result(d)
                pending = ev
    except jdeser.ParseError as exc:
        session.fault(f"{exc.code}: {exc.detail}")
        return result(REJECTED, exc)
    if pending is None:
        session.fault("stream contains no classes")
        return result(REJECTED)
    d = push(pending, True)
    return result(d)
