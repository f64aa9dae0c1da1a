"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are
also printed in the terminal summary.
"""

import itertools
import math
import random
import subprocess
import time

import numpy as np
import pytest

import conftest
from conftest import CLASSES, JAVA, JAVA_BIN, STREAMS, stream_fixtures
from oracles import conjugate_fixtures, dirichlet_mean, intervals_disjoint
from deserfilter import evaluation as ev
from deserfilter import jdeser
from deserfilter.bayes import CountSummary, MHConfig, PosteriorEnsemble, mh_sample
from deserfilter.classfeat import ClassResolver, extract_features
from deserfilter.features import FeatureVector, StateCatalog
from deserfilter.filter import ACCEPTED, REJECTED, UNDECIDED, FilterConfig, FilterSession, decide
from deserfilter.markov import MarkovChain, log_prob


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_RESULTS[n] = (ok, detail)
    print(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}")
    assert ok, detail


def test_criterion_1_sequence_probability():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    chains = 0
    for k in range(1, 5):
        for trial in range(4):
            p_init = rng.dirichlet(np.ones(k))
            p_tr = rng.dirichlet(np.ones(k), size=k)
            if trial % 2:  # sparse rows with exact zeros
                p_tr = np.where(rng.random((k, k)) < 0.4, 0.0, p_tr)
                p_tr[np.arange(k), rng.integers(0, k, size=k)] += 1e-3
                p_tr /= p_tr.sum(axis=1, keepdims=True)
            chain = MarkovChain(p_init, p_tr)
            chains += 1
            for n in range(1, 6):
                total = math.fsum(math.exp(log_prob(chain, s)) for s in itertools.product(range(k), repeat=n))
                worst = max(worst, abs(total - 1.0))
    hand = MarkovChain(np.array([0.5, 0.5]), np.array([[0.9, 0.1], [0.2, 0.8]]))
    hand_err = abs(log_prob(hand, [0, 0, 1]) - math.log(0.045))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and hand_err <= 1e-12 and elapsed < 1.0
    record(1, ok, f"{chains} chains, K<=4, n<=5: max |sum-1| = {worst:.2e}; ln 0.045 error {hand_err:.1e}; "
                  f"{elapsed:.2f}s")


def test_criterion_2_conjugate_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    rates = []
    for i, (init, tr) in enumerate(conjugate_fixtures(20)):
        k = len(init)
        ens = mh_sample(CountSummary(init, tr), config=MHConfig(seed=i))
        means = np.vstack([ens.p_init.mean(0)[None, :], ens.p_tr.mean(0)])
        for r, counts in enumerate([init] + list(tr)):
            worst = max(worst, float(np.max(np.abs(means[r] - dirichlet_mean([1.0] * k, counts.tolist())))))
        rates.append(ens.acceptance_rate)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and all(0.05 < r < 0.95 for r in rates) and elapsed < 60
    record(2, ok, f"20 fixtures: max |MH mean - closed form| = {worst:.4f}; acceptance "
                  f"{min(rates):.2f}..{max(rates):.2f}; {elapsed:.1f}s")


def test_criterion_3_decision_table():
    t0 = time.perf_counter()
    inf = math.inf
    table = [
        ((-10, 0.5, -3, 0.5, 4, True, FilterConfig(2, inf)), REJECTED),    # end, disjoint, malicious
        ((-5, 0.0, -6, 0.0, 4, True, FilterConfig(0, inf)), ACCEPTED),     # end, disjoint, benign
        ((-5, 1.0, -6, 1.0, 4, True, FilterConfig(2, inf)), REJECTED),     # end, overlapping
        ((-10, 0.5, -3, 0.5, 3, False, FilterConfig(2, 3)), REJECTED),     # early abort at |seq| = l
        ((-10, 0.5, -3, 0.5, 2, False, FilterConfig(2, 3)), UNDECIDED),    # otherwise
        ((-4, 0.0, -4, 0.0, 4, True, FilterConfig(0, inf)), REJECTED),     # tie
    ]
    table_ok = all(decide(*args)[0] == want for args, want in table)
    outcomes = {want for _, want in table}
    rng = np.random.default_rng(7)
    mono_ok = True
    for _ in range(1000):
        m_b, m_m = rng.normal(-20, 10, size=2)
        s_b, s_m = rng.exponential(2, size=2)
        t1, t2 = np.sort(rng.uniform(0, 3, size=2))
        d1 = decide(m_b, s_b, m_m, s_m, 5, True, FilterConfig(t1))
        d2 = decide(m_b, s_b, m_m, s_m, 5, True, FilterConfig(t2))
        if d2[1] and not d1[1]:
            mono_ok = False
        if d1[1] != intervals_disjoint(m_b, s_b, m_m, s_m, t1):
            mono_ok = False
        if d1 == (REJECTED, False) and d2[0] == ACCEPTED:
            mono_ok = False
    elapsed = time.perf_counter() - t0
    ok = table_ok and outcomes == {ACCEPTED, REJECTED, UNDECIDED} and mono_ok and elapsed < 5
    record(3, ok, f"decision table {'ok' if table_ok else 'WRONG'} (end/disjoint both ways, end/overlap, "
                  f"early abort, undecided, tie); t-monotonicity over 1000 tuples "
                  f"{'ok' if mono_ok else 'VIOLATED'}; {elapsed:.2f}s")


def test_criterion_4_parser_fidelity():
    t0 = time.perf_counter()
    names = stream_fixtures()
    data = {n: (STREAMS / f"{n}.bin").read_bytes() for n in names}
    golden_ok = all(jdeser.events_to_jsonl(jdeser.parse_stream(data[n]).events) ==
                    (STREAMS / f"{n}.expected.jsonl").read_text() for n in names)
    required = {"empty", "hashmap", "nested", "array", "enum", "strref"} <= set(names)
    rng = random.Random(4)
    chunk_ok = True
    for n in names:
        raw = data[n]
        whole = list(jdeser.parse_stream(raw).events)
        for _ in range(100):
            cut = sorted(rng.sample(range(len(raw) + 1), min(rng.randint(1, 6), len(raw) + 1)))
            s = jdeser.StreamSession()
            got, prev = [], 0
            for c in cut + [len(raw)]:
                got += s.feed(raw[prev:c])[0]
                prev = c
            got += s.close()[0]
            chunk_ok &= got == whole
    crashes = 0
    seeds = list(data.values())
    for _ in range(100_000):
        b = bytearray(rng.choice(seeds))
        for _ in range(rng.randint(1, 4)):
            op = rng.random()
            if op < 0.6 and b:
                b[rng.randrange(len(b))] = rng.randrange(256)
            elif op < 0.8 and b:
                i = rng.randrange(len(b))
                del b[i:i + rng.randint(1, 8)]
            else:
                i = rng.randrange(len(b) + 1)
                b[i:i] = bytes(rng.randrange(256) for _ in range(rng.randint(1, 8)))
        try:
            jdeser.parse_stream(bytes(b))
        except jdeser.ParseError:
            pass
        except Exception:
            crashes += 1
    elapsed = time.perf_counter() - t0
    ok = golden_ok and required and chunk_ok and crashes == 0 and elapsed < 60
    record(4, ok, f"{len(names)} golden fixtures {'match' if golden_ok else 'DIFFER'}; chunking invariance "
                  f"{'holds' if chunk_ok else 'BROKEN'} (100 splits each); 1e5 mutations, {crashes} crashes; "
                  f"{elapsed:.1f}s")


def test_criterion_5_feature_extraction(tmp_path):
    single = {
        "fx.UsesReflection": "10000000", "fx.OverridesReadObject": "01000000",
        "fx.OverridesHashCode": "00100000", "fx.GenericField": "00010000",
        "fx.ImplementsMap": "00001000", "fx.ImplementsComparator": "00000100",
        "fx.CallsHashCode": "00000010", "fx.CallsCompare": "00000001",
    }
    with ClassResolver([CLASSES]) as r:
        got = {n: str(extract_features(r.resolve(n), r)) for n in single}
    fixtures_ok = got == single
    if not JAVA:
        conftest.ACCEPTANCE_RESULTS[5] = (fixtures_ok, "8 fixtures ok; JDK HashMap part SKIPPED (no java runtime)")
        pytest.skip("no java runtime to provide java.util.HashMap")
    out = tmp_path / "jdk"
    subprocess.run([JAVA, "-cp", str(JAVA_BIN), "tools.ClassDump", str(out), "java.util.HashMap"],
                   check=True, capture_output=True, timeout=120)
    with ClassResolver([out]) as r:
        hm = extract_features(r.resolve("java.util.HashMap"), r)
    ok = fixtures_ok and hm["implements_map"] and hm["overrides_hash_code"]
    record(5, ok, f"8 single-feature fixtures {'exact' if fixtures_ok else 'WRONG ' + str(got)}; "
                  f"java.util.HashMap = {hm} (F5={int(hm['implements_map'])}, F3={int(hm['overrides_hash_code'])})")


def test_criterion_6_desk_scale_trend():
    t0 = time.perf_counter()
    spec = ev.default_spec()
    corpus = ev.synth_generate(spec, seed=0)
    fast = ev.evaluate(corpus, ev.TrainConfig("conjugate"), t=2, l=math.inf, seed=0)
    mh = ev.evaluate(corpus, ev.TrainConfig("bayesian"), t=2, l=math.inf, seed=0)
    bayes_prec, emp_prec = [], []
    for s in range(10):
        ds = ev.synth_generate(spec, seed=s)
        bayes_prec.append(ev.evaluate(ds, ev.TrainConfig("conjugate"), seed=s, train_limit=30).precision_mean)
        emp_prec.append(ev.evaluate(ds, ev.TrainConfig("empirical"), seed=s, train_limit=30).precision_mean)
    mh_scarce = ev.evaluate(corpus, ev.TrainConfig("bayesian"), seed=0, train_limit=30).precision_mean
    elapsed = time.perf_counter() - t0
    ok = (fast.f1_mean >= 0.90 and mh.f1_mean >= 0.90 and np.mean(bayes_prec) >= np.mean(emp_prec)
          and mh_scarce >= emp_prec[0] and elapsed < 900)
    record(6, ok, f"F1 conjugate {fast.f1_mean:.3f}, MH {mh.f1_mean:.3f} (>= 0.90); 30-trace training over 10 "
                  f"seeds: precision bayesian {np.mean(bayes_prec):.1f} vs empirical {np.mean(emp_prec):.1f} "
                  f"(MH seed 0: {mh_scarce:.1f}); {elapsed:.0f}s")


def test_criterion_7_l_sweep():
    corpus = ev.synth_generate(ev.default_spec(), seed=0)
    reps = ev.sweep_l(corpus, ev.TrainConfig("conjugate"), t=2, l_values=[1, 2, 4, 8, math.inf], seed=0)
    prec = {r.l: r.precision_mean for r in reps}
    rec = [r.recall_mean for r in reps]
    ok = prec[8] >= prec[1] - 2 and max(rec) - min(rec) <= 5
    record(7, ok, "precision by l " + ", ".join(f"{'inf' if l == math.inf else int(l)}:{p:.1f}"
                                                for l, p in prec.items())
              + f"; recall spread {max(rec) - min(rec):.1f} points")


def test_criterion_8_step_latency():
    rng = np.random.default_rng(0)
    vecs = [FeatureVector.parse(format(i, "08b")) for i in range(63)]
    cat = StateCatalog(vecs)
    k = cat.size
    benign = PosteriorEnsemble(rng.dirichlet(np.ones(k), size=500), rng.dirichlet(np.ones(k), size=(500, k)), cat)
    malicious = PosteriorEnsemble(rng.dirichlet(np.ones(k), size=500), rng.dirichlet(np.ones(k), size=(500, k)), cat)
    session = FilterSession(benign, malicious, FilterConfig(t=1e9))
    for v in vecs[:5]:  # warm up
        session.step(v, False)
    times = []
    for _ in range(2000):
        v = vecs[int(rng.integers(63))]
        t0 = time.perf_counter()
        session.step(v, False)
        times.append(time.perf_counter() - t0)
    times = np.array(times) * 1e3
    p99 = float(np.percentile(times, 99))
    ok = p99 <= 1.0
    record(8, ok, f"K=64, 500 samples per ensemble: step median {np.median(times):.3f} ms, "
                  f"p99 {p99:.3f} ms, max {times.max():.3f} ms")
