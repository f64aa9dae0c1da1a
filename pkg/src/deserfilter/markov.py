"""First-order Markov chains over catalog states, scored in log space."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import StateCatalog

ROW_TOL = 1e-9


class EmptySequence(ValueError):
    pass


class IndexOutOfRange(ValueError):
    pass


class NoSequences(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MarkovChain:
    p_init: np.ndarray
    p_tr: np.ndarray
    catalog: Optional[StateCatalog] = None

    def __post_init__(self):
        p_init = np.asarray(self.p_init, dtype=float)
        p_tr = np.asarray(self.p_tr, dtype=float)
        k = p_init.shape[0] if p_init.ndim == 1 else 0
        if k < 1 or p_tr.shape != (k, k):
            raise ValueError(f"shape mismatch: p_init {p_init.shape}, p_tr {p_tr.shape}")
        if self.catalog is not None and self.catalog.size != k:
            raise ValueError(f"catalog has {self.catalog.size} states, chain has {k}")
        if (p_init < 0).any() or (p_tr < 0).any():
            raise ValueError("negative probability")
        if abs(p_init.sum() - 1.0) > ROW_TOL or (np.abs(p_tr.sum(axis=1) - 1.0) > ROW_TOL).any():
            raise ValueError("probabilities do not sum to one")
        p_init.setflags(write=False)
        p_tr.setflags(write=False)
        object.__setattr__(self, "p_init", p_init)
        object.__setattr__(self, "p_tr", p_tr)

    @property
    def k(self) -> int:
        return self.p_init.shape[0]

    def to_dict(self, kind: str = "empirical") -> dict:
        out = {"p_init": self.p_init.tolist(), "p_tr": self.p_tr.tolist(), "kind": kind}
        if self.catalog is not None:
            out = {"catalog": self.catalog.to_dict(), **out}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MarkovChain":
        catalog = StateCatalog.from_dict(data["catalog"]) if "catalog" in data else None
        return cls(np.array(data["p_init"]), np.array(data["p_tr"]), catalog)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MarkovChain":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def check_sequence(seq: Sequence[int], k: int) -> np.ndarray:
    idx = np.asarray(seq, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise EmptySequence("cannot score an empty sequence")
    if idx.min() < 0 or idx.max() >= k:
        raise IndexOutOfRange(f"state index outside [0, {k})")
    return idx


def log_prob(chain: MarkovChain, seq: Sequence[int]) -> float:
    """ln p_init(x1) + sum ln p_tr(x_{i-1}, x_i); -inf when any factor is zero."""
    idx = check_sequence(seq, chain.k)
    with np.errstate(divide="ignore"):
        terms = np.log(chain.p_init[idx[0]]) + np.log(chain.p_tr[idx[:-1], idx[1:]]).sum()
    return float(terms)


def _normalize_rows(counts: np.ndarray, pseudocount: float) -> np.ndarray:
    smoothed = counts + pseudocount
    totals = smoothed.sum(axis=-1, keepdims=True)
    k = counts.shape[-1]
    # Rows without evidence get the uniform distribution (the flat-prior mean).
    return np.where(totals > 0, smoothed / np.where(totals > 0, totals, 1.0), 1.0 / k)


def count(sequences: Sequence[Sequence[int]], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial-state counts and transition counts for ``sequences``."""
    init = np.zeros(k, dtype=np.int64)
    tr = np.zeros((k, k), dtype=np.int64)
    for seq in sequences:
        if len(seq) == 0:
            continue
        idx = np.asarray(seq, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= k:
            raise IndexOutOfRange(f"state index outside [0, {k})")
        init[idx[0]] += 1
        np.add.at(tr, (idx[:-1], idx[1:]), 1)
    return init, tr


def empirical_fit(sequences: Sequence[Sequence[int]], k: int, pseudocount: float = 0.0,
                  catalog: Optional[StateCatalog] = None) -> MarkovChain:
    if pseudocount < 0:
        raise ValueError("pseudocount must be nonnegative")
    if k < 1:
        raise ValueError("need at least one state")
    if not any(len(s) for s in sequences):
        raise NoSequences("no training sequences")
    init, tr = count(sequences, k)
    return MarkovChain(_normalize_rows(init.astype(float), pseudocount),
                       _normalize_rows(tr.astype(float), pseudocount), catalog)
