"""Cross-validated evaluation of the filter and a synthetic corpus generator."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import bayes, markov
from .bayes import LOG_FLOOR, MHConfig, PosteriorEnsemble
from .features import WIDTH, FeatureVector, StateCatalog, build_catalog
from .filter import REJECTED, UNDECIDED, FilterConfig, decide
from .jdeser import TraceRecord
from .markov import MarkovChain

log = logging.getLogger(__name__)

BENIGN = "benign"
MALICIOUS = "malicious"
LABELS = (BENIGN, MALICIOUS)
ESTIMATORS = ("bayesian", "conjugate", "empirical")


class TooFewExamples(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    traces: list
    feature_map: dict = field(default_factory=dict)
    # trace index -> parse error detail; such traces are always rejected
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.traces:
            if tr.label not in LABELS:
                raise ValueError(f"trace label must be benign or malicious, got {tr.label!r}")

    def __len__(self):
        return len(self.traces)

    def labels(self) -> list[str]:
        return [tr.label for tr in self.traces]

    def vectors(self, trace: TraceRecord) -> list[FeatureVector]:
        get = self.feature_map.get
        zero = FeatureVector.zeros()
        return [get(name, zero) for name in trace.class_names]

    def subset(self, idx: Iterable[int]) -> "Dataset":
        idx = list(idx)
        errors = {n: self.errors[i] for n, i in enumerate(idx) if i in self.errors}
        return Dataset([self.traces[i] for i in idx], self.feature_map, errors)

    def to_jsonl(self) -> str:
        lines = []
        for i, tr in enumerate(self.traces):
            d = {"label": tr.label, "classes": list(tr.class_names)}
            if tr.source:
                d["source"] = tr.source
            if i in self.errors:
                d["error"] = self.errors[i]
            lines.append(json.dumps(d))
        return "".join(line + "\n" for line in lines)

    def dump(self, traces_path, feature_map_path) -> None:
        with open(traces_path, "w") as fh:
            fh.write(self.to_jsonl())
        with open(feature_map_path, "w") as fh:
            json.dump({k: str(v) for k, v in sorted(self.feature_map.items())}, fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_jsonl(cls, text: str, feature_map: Optional[dict] = None) -> "Dataset":
        traces, errors = [], {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                traces.append(trace_from_classes(d["label"], d["classes"], d.get("source", "")))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"line {n}: bad trace record ({exc})") from None
            if d.get("error"):
                errors[len(traces) - 1] = str(d["error"])
        return cls(traces, dict(feature_map or {}), errors)

    @classmethod
    def load(cls, traces_path, feature_map_path=None) -> "Dataset":
        fmap = {}
        if feature_map_path is not None:
            with open(feature_map_path) as fh:
                fmap = {k: FeatureVector.parse(v) for k, v in json.load(fh).items()}
        with open(traces_path) as fh:
            return cls.from_jsonl(fh.read(), fmap)


def trace_from_classes(label: str, classes: Sequence[str], source: str = "") -> TraceRecord:
    from .jdeser import ClassEvent
    events = tuple(ClassEvent(name, "plain", -1) for name in classes)
    return TraceRecord(label=label, events=events, source=source)


def kfold_split(labels: Sequence[str], k: int = 5, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Stratified folds: each label's indices are shuffled and dealt round-robin."""
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=int)
    for lab in LABELS:
        idx = np.array([i for i, x in enumerate(labels) if x == lab], dtype=int)
        if len(idx) < k:
            raise TooFewExamples(f"{len(idx)} {lab} traces for {k} folds")
        fold_of[rng.permutation(idx)] = np.arange(len(idx)) % k
    out = []
    for f in range(k):
        test = [i for i in range(len(labels)) if fold_of[i] == f]
        train = [i for i in range(len(labels)) if fold_of[i] != f]
        out.append((train, test))
    return out


def stratified_limit(labels: Sequence[str], idx: Sequence[int], limit: int, seed: int) -> list[int]:
    """Keep ``limit`` of ``idx`` with label proportions preserved, at least one per label."""
    if limit >= len(idx):
        return list(idx)
    rng = np.random.default_rng(seed)
    groups = {lab: [i for i in idx if labels[i] == lab] for lab in LABELS}
    n_mal = len(groups[MALICIOUS])
    want_mal = min(n_mal, max(1, round(limit * n_mal / len(idx))))
    want = {MALICIOUS: want_mal, BENIGN: min(len(groups[BENIGN]), limit - want_mal)}
    keep = []
    for lab in LABELS:
        g = np.array(groups[lab], dtype=int)
        keep.extend(int(i) for i in rng.permutation(g)[: want[lab]])
    return sorted(keep)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    estimator: str = "bayesian"
    mh: MHConfig = MHConfig()
    pseudocount: float = 0.0
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")


def train_models(sequences: dict, catalog: StateCatalog, config: TrainConfig,
                 seed: int = 0) -> dict[str, PosteriorEnsemble]:
    """Fit one model per label over a shared catalog.

    ``sequences`` maps label to a list of state sequences. ``seed`` offsets
    the sampler seed so each label and fold draws its own stream.
    """
    k = catalog.size
    models = {}
    for li, lab in enumerate(LABELS):
        seqs = sequences.get(lab, [])
        alpha = None if config.alpha is None else np.full(k, config.alpha)
        sub_seed = int(np.random.SeedSequence([config.mh.seed, seed, li]).generate_state(1)[0])
        if config.estimator == "empirical":
            chain = markov.empirical_fit(seqs, k, config.pseudocount, catalog=catalog) if seqs else \
                MarkovChain(np.full(k, 1 / k), np.full((k, k), 1 / k), catalog)
            models[lab] = PosteriorEnsemble.from_chain(chain)
        elif config.estimator == "conjugate":
            models[lab] = bayes.conjugate_sample(bayes.count(seqs, k), alpha, config.mh.keep, sub_seed, catalog)
        else:
            mh = dataclasses.replace(config.mh, seed=sub_seed)
            models[lab] = bayes.mh_sample(bayes.count(seqs, k), alpha, mh, catalog)
            log.info("MH for %s: acceptance %.3f", lab, models[lab].acceptance_rate)
    return models


def fit_dataset(ds: Dataset, config: TrainConfig, seed: int = 0):
    """Catalog and per-label models for every trace of ``ds``."""
    keep = [i for i in range(len(ds)) if i not in ds.errors]
    vecs = [ds.vectors(ds.traces[i]) for i in keep]
    catalog = build_catalog(v for vs in vecs for v in vs)
    seqs = {lab: [] for lab in LABELS}
    for i, vs in zip(keep, vecs):
        tr = ds.traces[i]
        if vs:
            seqs[tr.label].append(catalog.encode_all(vs))
    return catalog, train_models(seqs, catalog, config, seed)


# --------------------------------------------------------------------------
# prediction


def _prefix_stats(model: PosteriorEnsemble, seq: Sequence[int], floor: float):
    # (n, S) so each prefix reduces over a contiguous row, matching the session.
    scores = np.ascontiguousarray(model.prefix_log_probs(seq).T)
    scores = np.where(np.isneginf(scores), floor, scores)
    return scores.mean(axis=1), scores.std(axis=1)


@dataclass
class PrefixScores:
    m_b: np.ndarray
    s_b: np.ndarray
    m_m: np.ndarray
    s_m: np.ndarray

    @classmethod
    def compute(cls, benign, malicious, seq, floor=LOG_FLOOR) -> "PrefixScores":
        return cls(*_prefix_stats(benign, seq, floor), *_prefix_stats(malicious, seq, floor))

    def decide(self, config: FilterConfig) -> tuple[str, int]:
        n = len(self.m_b)
        for i in range(n):
            d, _ = decide(float(self.m_b[i]), float(self.s_b[i]), float(self.m_m[i]), float(self.s_m[i]),
                          i + 1, i == n - 1, config)
            if d != UNDECIDED:
                return d, i + 1
        raise AssertionError("end step returned undecided")


@dataclass
class FoldResult:
    fold: int
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    decisions: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def zero_positive(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def precision(self) -> float:
        return 0.0 if self.zero_positive else 100.0 * self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        pos = self.tp + self.fn
        return 0.0 if pos == 0 else 100.0 * self.tp / pos

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r) / 100.0

    @property
    def mean_index(self) -> float:
        idx = [i for _, d, i in self.decisions if d == REJECTED]
        return float(np.mean(idx)) if idx else math.nan

    def add(self, label: str, decision: str, index: int) -> None:
        rejected = decision == REJECTED
        if label == MALICIOUS:
            if rejected:
                self.tp += 1
            else:
                self.fn += 1
        elif rejected:
            self.fp += 1
        else:
            self.tn += 1
        self.decisions.append((label, decision, index))

    def to_dict(self) -> dict:
        return {"fold": self.fold, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "zero_positive": self.zero_positive, "mean_index": _nan_none(self.mean_index)}


def _nan_none(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def _mean_std(xs) -> tuple[float, float]:
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std())


@dataclass
class MetricsReport:
    estimator: str
    t: float
    l: float
    k: int
    seed: int
    folds: list
    train_seconds: float
    predict_seconds: float
    precision_mean: float = 0.0
    precision_std: float = 0.0
    recall_mean: float = 0.0
    recall_std: float = 0.0
    f1_mean: float = 0.0
    f1_std: float = 0.0
    mean_index: float = math.nan
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.precision_mean, self.precision_std = _mean_std([f.precision for f in self.folds])
        self.recall_mean, self.recall_std = _mean_std([f.recall for f in self.folds])
        self.f1_mean, self.f1_std = _mean_std([f.f1 for f in self.folds])
        idx = [i for f in self.folds for _, d, i in f.decisions if d == REJECTED]
        self.mean_index = float(np.mean(idx)) if idx else math.nan
        self.flags = [f"fold {f.fold}: no predicted positives, precision reported as 0"
                      for f in self.folds if f.zero_positive]

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "estimator": self.estimator, "t": self.t, "l": "inf" if self.l == math.inf else int(self.l),
            "k": self.k, "seed": self.seed,
            "precision_mean": self.precision_mean, "precision_std": self.precision_std,
            "recall_mean": self.recall_mean, "recall_std": self.recall_std,
            "f1_mean": self.f1_mean, "f1_std": self.f1_std,
            "mean_index": _nan_none(self.mean_index),
            "train_seconds": self.train_seconds, "predict_seconds": self.predict_seconds,
            "flags": self.flags, "folds": [f.to_dict() for f in self.folds],
        }
        if not timing:
            del out["train_seconds"], out["predict_seconds"]
        return out


def evaluate_grid(ds: Dataset, grid: Sequence[FilterConfig], train: TrainConfig = TrainConfig(),
                  k: int = 5, seed: int = 0, train_limit: Optional[int] = None,
                  floor: float = LOG_FLOOR) -> list[MetricsReport]:
    """k-fold evaluation for several filter settings with one training run per fold."""
    labels = ds.labels()
    splits = kfold_split(labels, k, seed)
    folds = [[FoldResult(f) for f in range(k)] for _ in grid]
    train_s = predict_s = 0.0
    for f, (train_idx, test_idx) in enumerate(splits):
        if train_limit is not None:
            train_idx = stratified_limit(labels, train_idx, train_limit, seed * 7919 + f)
        t0 = time.perf_counter()
        catalog, models = fit_dataset(ds.subset(train_idx), train, seed=f)
        train_s += time.perf_counter() - t0
        t0 = time.perf_counter()
        for i in test_idx:
            tr = ds.traces[i]
            vecs = ds.vectors(tr)
            if not vecs or i in ds.errors:
                # nothing to score: fail closed
                for g in range(len(grid)):
                    folds[g][f].add(tr.label, REJECTED, max(len(vecs), 1))
                continue
            ps = PrefixScores.compute(models[BENIGN], models[MALICIOUS], catalog.encode_all(vecs), floor)
            for g, cfg in enumerate(grid):
                folds[g][f].add(tr.label, *ps.decide(cfg))
        predict_s += time.perf_counter() - t0
        log.debug("fold %d: %d train, %d test, %d states", f, len(train_idx), len(test_idx), catalog.size)
    return [MetricsReport(train.estimator, cfg.t, cfg.l, k, seed, folds[g], train_s, predict_s)
            for g, cfg in enumerate(grid)]


def evaluate(ds: Dataset, train: TrainConfig = TrainConfig(), t: float = 2.0, l: float = math.inf,
             k: int = 5, seed: int = 0, train_limit: Optional[int] = None) -> MetricsReport:
    return evaluate_grid(ds, [FilterConfig(t, l)], train, k, seed, train_limit)[0]


def sweep_l(ds: Dataset, train: TrainConfig = TrainConfig(), t: float = 2.0,
            l_values: Sequence[float] = (1, 2, 4, 8, math.inf), k: int = 5, seed: int = 0,
            train_limit: Optional[int] = None) -> list[MetricsReport]:
    return evaluate_grid(ds, [FilterConfig(t, l) for l in l_values], train, k, seed, train_limit)


def _fmt_l(l: float) -> str:
    return "inf" if l == math.inf else str(int(l))


def sweep_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["l", "precision", "recall", "mean_index"])
    for r in reports:
        mi = "" if math.isnan(r.mean_index) else f"{r.mean_index:.4f}"
        w.writerow([_fmt_l(r.l), f"{r.precision_mean:.4f}", f"{r.recall_mean:.4f}", mi])
    return buf.getvalue()


def format_table(reports: Sequence[MetricsReport], timing: bool = True) -> str:
    """Aligned text table: estimator, t, precision, recall, F1 and training time."""
    head = ("", "t", "Precision", "Recall", "F1-score", "Time (sec)")
    rows = []
    prev = None
    for r in reports:
        name = r.estimator.capitalize() if r.estimator != prev else ""
        t = "---" if r.estimator == "empirical" else f"{r.t:g}"
        if r.l != math.inf:
            t += f" l={_fmt_l(r.l)}"
        time_s = (f"{r.train_seconds:.1f}" if timing else "-") if r.estimator != prev else ""
        rows.append((name, t, f"{r.precision_mean:.2f}±{r.precision_std:.2f}",
                     f"{r.recall_mean:.2f}±{r.recall_std:.2f}", f"{r.f1_mean:.2f}±{r.f1_std:.2f}", time_s))
        prev = r.estimator
    widths = [max(len(x[c]) for x in [head] + rows) for c in range(len(head))]
    lines = []
    for n, row in enumerate([head] + rows):
        cells = [row[0].ljust(widths[0]), row[1].center(widths[1])] + \
                [row[c].rjust(widths[c]) for c in range(2, len(row))]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class LengthDist:
    kind: str = "geometric"
    mean: float = 10.0

    def __post_init__(self):
        if self.kind not in ("geometric", "fixed"):
            raise InvalidSpec(f"unknown length distribution {self.kind!r}")
        if not self.mean >= 1 or (self.kind == "fixed" and not float(self.mean).is_integer()):
            raise InvalidSpec("length mean must be >= 1 (an integer for fixed lengths)")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return int(self.mean)
        return int(rng.geometric(1.0 / self.mean))


@dataclass(frozen=True)
class SynthSpec:
    benign: MarkovChain
    malicious: MarkovChain
    n_benign: int = 200
    n_malicious: int = 40
    benign_length: LengthDist = LengthDist("geometric", 39)
    malicious_length: LengthDist = LengthDist("geometric", 17)
    names_per_state: int = 3

    def __post_init__(self):
        for chain in (self.benign, self.malicious):
            if chain.catalog is None or chain.catalog.size != chain.k:
                raise InvalidSpec("planted chains need a catalog matching their state count")
        if self.benign.catalog != self.malicious.catalog:
            raise InvalidSpec("planted chains must share one catalog")
        if self.n_benign < 0 or self.n_malicious < 0 or self.names_per_state < 1:
            raise InvalidSpec("counts must be nonnegative")

    @property
    def catalog(self) -> StateCatalog:
        return self.benign.catalog

    def to_dict(self) -> dict:
        return {
            "benign": self.benign.to_dict(), "malicious": self.malicious.to_dict(),
            "n_benign": self.n_benign, "n_malicious": self.n_malicious,
            "benign_length": dataclasses.asdict(self.benign_length),
            "malicious_length": dataclasses.asdict(self.malicious_length),
            "names_per_state": self.names_per_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        try:
            return cls(MarkovChain.from_dict(d["benign"]), MarkovChain.from_dict(d["malicious"]),
                       d.get("n_benign", 200), d.get("n_malicious", 40),
                       LengthDist(**d.get("benign_length", {"kind": "geometric", "mean": 39})),
                       LengthDist(**d.get("malicious_length", {"kind": "geometric", "mean": 17})),
                       d.get("names_per_state", 3))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpec):
                raise
            raise InvalidSpec(str(exc)) from None


def _sample_chain(chain: MarkovChain, n: int, rng: np.random.Generator) -> list[int]:
    k = chain.k
    seq = [int(rng.choice(k, p=chain.p_init))]
    for _ in range(n - 1):
        seq.append(int(rng.choice(k, p=chain.p_tr[seq[-1]])))
    return seq


def synth_generate(spec: SynthSpec, seed: int = 0) -> Dataset:
    """Sample labeled traces from the planted chains.

    Each catalog state is rendered as one of ``names_per_state`` class names
    sharing its vector; the OTHER state becomes a class whose vector lies
    outside the catalog, drawn afresh at every visit.
    """
    rng = np.random.default_rng(seed)
    cat = spec.catalog
    known = set(cat.states)
    unseen = [v for v in (FeatureVector.parse(format(i, f"0{WIDTH}b")) for i in range(2 ** WIDTH))
              if v not in known]
    fmap: dict[str, FeatureVector] = {}
    traces = []

    def name_for(state: int) -> str:
        if state == cat.other_index:
            if not unseen:
                raise InvalidSpec("no vector left outside the catalog for the OTHER state")
            v = unseen[int(rng.integers(len(unseen)))]
            name = f"synth.other.X{v}"
        else:
            v = cat.states[state]
            name = f"synth.s{state:02d}.C{int(rng.integers(spec.names_per_state))}"
        fmap[name] = v
        return name

    plan = [(BENIGN, spec.benign, spec.benign_length)] * spec.n_benign + \
           [(MALICIOUS, spec.malicious, spec.malicious_length)] * spec.n_malicious
    for n, (label, chain, lengths) in enumerate(plan):
        seq = _sample_chain(chain, lengths.sample(rng), rng)
        traces.append(trace_from_classes(label, [name_for(s) for s in seq], f"synth:{seed}:{n}"))
    return Dataset(traces, fmap)


# Vectors of the default planted catalog. The first group resembles ordinary
# data classes, the last one gadget-like classes; a few sit in between.
_DEFAULT_VECTORS = (
    "00000000", "00010000", "00001000", "01101010", "00100010", "00010010",
    "01000000", "00000101", "10000000", "11000010", "10010001",
)


def _planted_rows(rng, k: int, support: Sequence[int], fanout: int, leak: float) -> np.ndarray:
    rows = np.empty((k, k))
    other = [j for j in range(k) if j not in support]
    for i in range(k):
        row = np.zeros(k)
        succ = rng.choice(support, size=min(fanout, len(support)), replace=False)
        row[succ] = rng.dirichlet(np.ones(len(succ)))
        row *= 1 - leak
        row[other] += leak / len(other)
        rows[i] = row / row.sum()
    return rows


def default_spec(n_benign: int = 200, n_malicious: int = 40, seed: int = 10) -> SynthSpec:
    """Desk-scale planted corpus: 11 vectors plus OTHER, benign and malicious
    chains on overlapping supports, mean lengths 39 and 17."""
    cat = StateCatalog([FeatureVector.parse(v) for v in _DEFAULT_VECTORS])
    k = cat.size
    rng = np.random.default_rng(seed)
    benign_support = list(range(0, 8))
    malicious_support = list(range(5, 11))
    b_tr = _planted_rows(rng, k, benign_support, 4, 0.02)
    m_tr = _planted_rows(rng, k, malicious_support, 3, 0.02)
    b_init = np.zeros(k)
    b_init[:4] = rng.dirichlet(np.ones(4))
    m_init = np.zeros(k)
    # Gadget chains often open with the same map-like container benign ones use.
    m_init[[3, 6, 8, 9]] = rng.dirichlet(np.ones(4))
    return SynthSpec(MarkovChain(b_init, b_tr, cat), MarkovChain(m_init, m_tr, cat), n_benign, n_malicious)
