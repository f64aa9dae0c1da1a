"""Bayesian estimation of Markov chain parameters.

The initial-state vector and every transition row get an independent
Dirichlet(alpha) prior and a multinomial likelihood in their observed counts.
:func:`mh_sample` draws from that posterior with random-walk
Metropolis-Hastings; :func:`conjugate_sample` draws from the closed-form
Dirichlet(alpha + counts) posterior directly and doubles as its test oracle.
"""

from __future__ import annotations

import gzip
import json
import sys
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from . import markov
from .features import StateCatalog
from .markov import MarkovChain

# ln of the smallest positive normal double; stands in for -inf scores.
LOG_FLOOR = float(np.log(sys.float_info.min))


class NonPositiveAlpha(ValueError):
    pass


@dataclass(frozen=True)
class CountSummary:
    init_counts: np.ndarray
    tr_counts: np.ndarray

    @property
    def k(self) -> int:
        return self.init_counts.shape[0]

    def scaled(self, factor: int) -> "CountSummary":
        return CountSummary(self.init_counts * factor, self.tr_counts * factor)

    def rows(self) -> np.ndarray:
        """(K+1) x K matrix: the initial counts followed by each transition row."""
        return np.vstack([self.init_counts[None, :], self.tr_counts]).astype(float)


def count(sequences: Sequence[Sequence[int]], k: int) -> CountSummary:
    init, tr = markov.count(sequences, k)
    return CountSummary(init, tr)


@dataclass(frozen=True)
class MHConfig:
    draws: int = 5000
    keep: int = 500
    proposal_scale: float = 0.1
    seed: int = 0
    # Gaussian row updates per recorded draw; with one step the retained draws
    # are too correlated for their mean to track the posterior mean.
    steps_per_draw: int = 10
    tune_interval: int = 100

    def __post_init__(self):
        if not 0 < self.keep <= self.draws:
            raise ValueError("need 0 < keep <= draws")
        if self.proposal_scale <= 0:
            raise ValueError("proposal_scale must be positive")
        if self.steps_per_draw < 1 or self.tune_interval < 1:
            raise ValueError("steps_per_draw and tune_interval must be positive")


class PosteriorEnsemble:
    """A set of Markov chains over one catalog, stored as stacked arrays."""

    def __init__(self, p_init: np.ndarray, p_tr: np.ndarray, catalog: Optional[StateCatalog] = None,
                 kind: str = "bayesian", config: Optional[dict] = None,
                 acceptance_rate: Optional[float] = None):
        p_init = np.asarray(p_init, dtype=float)
        p_tr = np.asarray(p_tr, dtype=float)
        if p_init.ndim != 2 or p_tr.shape != p_init.shape + (p_init.shape[1],):
            raise ValueError(f"shape mismatch: {p_init.shape} vs {p_tr.shape}")
        if p_init.shape[0] < 1:
            raise ValueError("empty ensemble")
        if (p_init < 0).any() or (p_tr < 0).any():
            raise ValueError("negative probability in ensemble")
        if (np.abs(p_init.sum(-1) - 1) > markov.ROW_TOL).any() or (np.abs(p_tr.sum(-1) - 1) > markov.ROW_TOL).any():
            raise ValueError("ensemble rows do not sum to one")
        if catalog is not None and catalog.size != p_init.shape[1]:
            raise ValueError("catalog size does not match ensemble")
        self.p_init = p_init
        self.p_tr = p_tr
        self.catalog = catalog
        self.kind = kind
        self.config = config or {}
        self.acceptance_rate = acceptance_rate
        with np.errstate(divide="ignore"):
            self.log_init = np.log(p_init)
            # (K, K, S): one contiguous vector of samples per transition.
            self.log_tr_by_pair = np.ascontiguousarray(np.log(p_tr).transpose(1, 2, 0))

    @classmethod
    def from_chain(cls, chain: MarkovChain, kind: str = "empirical") -> "PosteriorEnsemble":
        return cls(chain.p_init[None, :], chain.p_tr[None, :, :], chain.catalog, kind=kind)

    @property
    def k(self) -> int:
        return self.p_init.shape[1]

    def __len__(self) -> int:
        return self.p_init.shape[0]

    @property
    def samples(self) -> list[MarkovChain]:
        return [MarkovChain(a, b, self.catalog) for a, b in zip(self.p_init, self.p_tr)]

    def sample_log_probs(self, seq: Sequence[int]) -> np.ndarray:
        """Log probability of ``seq`` under every sample (may contain -inf)."""
        idx = markov.check_sequence(seq, self.k)
        out = self.log_init[:, idx[0]].copy()
        if idx.size > 1:
            out += self.log_tr_by_pair[idx[:-1], idx[1:]].sum(axis=0)
        return out

    def prefix_log_probs(self, seq: Sequence[int]) -> np.ndarray:
        """(S, n) matrix of log probabilities of every prefix of ``seq``."""
        idx = markov.check_sequence(seq, self.k)
        steps = np.empty((len(self), idx.size))
        steps[:, 0] = self.log_init[:, idx[0]]
        if idx.size > 1:
            steps[:, 1:] = self.log_tr_by_pair[idx[:-1], idx[1:]].T
        with np.errstate(invalid="ignore"):
            return np.cumsum(steps, axis=1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "config": self.config}
        if self.catalog is not None:
            out["catalog"] = self.catalog.to_dict()
        if self.acceptance_rate is not None:
            out["acceptance_rate"] = self.acceptance_rate
        out["samples"] = [{"p_init": a.tolist(), "p_tr": b.tolist()} for a, b in zip(self.p_init, self.p_tr)]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PosteriorEnsemble":
        if "samples" not in data:  # a single chain model file
            return cls.from_chain(MarkovChain.from_dict(data), kind=data.get("kind", "empirical"))
        catalog = StateCatalog.from_dict(data["catalog"]) if "catalog" in data else None
        p_init = np.array([s["p_init"] for s in data["samples"]])
        p_tr = np.array([s["p_tr"] for s in data["samples"]])
        return cls(p_init, p_tr, catalog, kind=data.get("kind", "bayesian"),
                   config=data.get("config"), acceptance_rate=data.get("acceptance_rate"))

    def dump(self, path) -> None:
        path = str(path)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "wt") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PosteriorEnsemble":
        path = str(path)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rt") as fh:
            return cls.from_dict(json.load(fh))


def _alpha_rows(alpha, k: int) -> np.ndarray:
    a = np.broadcast_to(np.asarray(1.0 if alpha is None else alpha, dtype=float), (k,))
    if (a <= 0).any() or not np.isfinite(a).all():
        raise NonPositiveAlpha("concentration parameters must be positive")
    return a


def _log_target(z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # Density of the softmax coordinates: the Dirichlet-multinomial kernel
    # times its Jacobian gives prod x_i^a_i; a standard normal on mean(z)
    # pins the direction softmax ignores.
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    mean = z.mean(axis=1)
    return (a * z).sum(axis=1) - a.sum(axis=1) * lse - 0.5 * mean * mean


@numba.njit(cache=True)
def _row_log_target(z, a):
    k = z.shape[0]
    m = z[0]
    for i in range(1, k):
        if z[i] > m:
            m = z[i]
    total = 0.0
    dot = 0.0
    asum = 0.0
    zsum = 0.0
    for i in range(k):
        total += np.exp(z[i] - m)
        dot += a[i] * z[i]
        asum += a[i]
        zsum += z[i]
    mean = zsum / k
    return dot - asum * (m + np.log(total)) - 0.5 * mean * mean


@numba.njit(cache=True)
def _mh_block(z, current, a, scale, noise, log_u, acc, out, record):
    n_draws, steps, n_rows, k = noise.shape
    proposal = np.empty(k)
    for d in range(n_draws):
        for s in range(steps):
            for r in range(n_rows):
                for i in range(k):
                    proposal[i] = z[r, i] + scale[r] * noise[d, s, r, i]
                cand = _row_log_target(proposal, a[r])
                if log_u[d, s, r] < cand - current[r]:
                    z[r, :] = proposal
                    current[r] = cand
                    acc[r] += 1.0
        if record:
            for r in range(n_rows):
                m = z[r, 0]
                for i in range(1, k):
                    if z[r, i] > m:
                        m = z[r, i]
                total = 0.0
                for i in range(k):
                    out[d, r, i] = np.exp(z[r, i] - m)
                    total += out[d, r, i]
                for i in range(k):
                    out[d, r, i] /= total


def _tune(scale: np.ndarray, rate: np.ndarray) -> np.ndarray:
    # Same schedule as PyMC's Metropolis step tuning.
    factor = np.select(
        [rate < 0.001, rate < 0.05, rate < 0.2, rate > 0.95, rate > 0.75, rate > 0.5],
        [0.1, 0.5, 0.9, 10.0, 2.0, 1.1],
        1.0,
    )
    return scale * factor


def mh_sample(counts: CountSummary, alpha=None, config: MHConfig = MHConfig(),
              catalog: Optional[StateCatalog] = None) -> PosteriorEnsemble:
    """Random-walk Metropolis-Hastings over p_init and every p_tr row.

    Each row is a point on the simplex parameterized by unconstrained
    coordinates ``z`` with ``x = softmax(z)``. A step perturbs every row's
    ``z`` with isotropic Gaussian noise and accepts or rejects each row on
    its own; the posterior factorizes over rows, so this is the same kernel
    as updating the rows one after another. Step sizes start at
    ``proposal_scale`` and are tuned per row during burn-in
    (``draws - keep`` draws), then frozen. The last ``keep`` draws are kept.
    """
    k = counts.k
    a = _alpha_rows(alpha, k)[None, :] + counts.rows()
    n_rows = a.shape[0]
    rng = np.random.default_rng(config.seed)

    z = np.log(a)
    z -= z.mean(axis=1, keepdims=True)
    current = _log_target(z, a)
    scale = np.full(n_rows, config.proposal_scale)
    burn = config.draws - config.keep
    kept = np.empty((config.keep, n_rows, k))
    window_acc = np.zeros(n_rows)
    window_steps = 0
    kept_acc = 0

    steps = config.steps_per_draw
    block = config.tune_interval
    draw = 0
    while draw < config.draws:
        # Blocks never straddle the end of burn-in or a tuning boundary.
        n = min(block, (burn - draw) if draw < burn else config.draws - draw)
        noise = rng.standard_normal((n, steps, n_rows, k))
        log_u = np.log(rng.random((n, steps, n_rows)))
        acc = np.zeros(n_rows)
        out = kept[draw - burn : draw - burn + n] if draw >= burn else kept[:0]
        _mh_block(z, current, a, scale, noise, log_u, acc, out, draw >= burn)
        if draw < burn:
            window_acc += acc
            window_steps += n * steps
            if window_steps >= block * steps:
                scale = _tune(scale, window_acc / window_steps)
                window_acc[:] = 0
                window_steps = 0
        else:
            kept_acc += int(acc.sum())
        draw += n

    kept /= kept.sum(axis=2, keepdims=True)
    rate = kept_acc / (config.keep * config.steps_per_draw * n_rows)
    return PosteriorEnsemble(kept[:, 0, :], kept[:, 1:, :], catalog, kind="bayesian",
                             config={"sampler": "mh", **asdict(config)}, acceptance_rate=rate)


def conjugate_sample(counts: CountSummary, alpha=None, keep: int = 500, seed: int = 0,
                     catalog: Optional[StateCatalog] = None) -> PosteriorEnsemble:
    """Exact draws from Dirichlet(alpha + counts) for every row."""
    k = counts.k
    a = _alpha_rows(alpha, k)[None, :] + counts.rows()
    rng = np.random.default_rng(seed)
    # Normalized gammas: same law as rng.dirichlet, vectorized over rows.
    g = rng.standard_gamma(np.broadcast_to(a, (keep,) + a.shape))
    g /= g.sum(axis=2, keepdims=True)
    # Rows whose gammas all underflow (tiny alpha) fall back to uniform.
    bad = ~np.isfinite(g).all(axis=2)
    g[bad] = 1.0 / k
    return PosteriorEnsemble(g[:, 0, :], g[:, 1:, :], catalog, kind="bayesian",
                             config={"sampler": "conjugate", "keep": keep, "seed": seed})


def posterior_mean(counts: CountSummary, alpha=None) -> np.ndarray:
    """Closed-form posterior mean of every row, (K+1) x K."""
    a = _alpha_rows(alpha, counts.k)[None, :] + counts.rows()
    return a / a.sum(axis=1, keepdims=True)


def ensemble_score(ensemble: PosteriorEnsemble, seq: Sequence[int], floor: float = LOG_FLOOR) -> tuple[float, float]:
    """Mean and population std of the sequence log probability across samples."""
    scores = ensemble.sample_log_probs(seq)
    return aggregate(scores, floor)


def aggregate(scores: np.ndarray, floor: float = LOG_FLOOR) -> tuple[float, float]:
    scores = np.where(np.isneginf(scores), floor, scores)
    return float(scores.mean()), float(scores.std())
