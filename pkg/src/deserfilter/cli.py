"""Command-line entry point.

Exit codes: 0 success (or stream accepted), 1 stream rejected, 2 usage
error, 3 parse or training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__, bayes, classfeat, evaluation as ev, jdeser
from .bayes import MHConfig, PosteriorEnsemble
from .features import FeatureVector, StateCatalog
from .filter import ACCEPTED, FilterConfig, filter_stream

log = logging.getLogger("deserfilter")

EXIT_OK, EXIT_REJECTED, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Failure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threshold(text: str) -> float:
    if text.lower() in ("inf", "infinity", "∞"):
        return math.inf
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if v != math.inf and not (v >= 1 and v.is_integer()):
        raise argparse.ArgumentTypeError("l must be a positive integer or inf")
    return v


def _nonneg(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def _list_of(conv):
    def parse(text: str):
        return [conv(x) for x in text.split(",") if x.strip()]
    return parse


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _write(args, text: str) -> None:
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _mh_config(args) -> MHConfig:
    try:
        return MHConfig(draws=args.draws, keep=args.keep, proposal_scale=args.proposal_scale, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_mh(p) -> None:
    p.add_argument("--estimator", choices=ev.ESTIMATORS, default="bayesian")
    p.add_argument("--draws", type=int, default=5000, help="MH draws including burn-in")
    p.add_argument("--keep", type=int, default=500, help="posterior samples retained")
    p.add_argument("--proposal-scale", type=float, default=0.1)
    p.add_argument("--pseudocount", type=_nonneg, default=0.0, help="empirical estimator only")


def _load_features(args) -> dict:
    fmap = {}
    if getattr(args, "feature_map", None):
        try:
            fmap = classfeat.load_feature_map(_existing(args.feature_map))
        except (ValueError, KeyError) as exc:
            raise Failure(f"bad feature map {args.feature_map}: {exc}") from None
    return fmap


def _load_dataset(args) -> ev.Dataset:
    try:
        ds = ev.Dataset.load(_existing(args.dataset))
    except ValueError as exc:
        raise Failure(f"bad dataset {args.dataset}: {exc}") from None
    ds.feature_map = _load_features(args)
    return ds


def _load_model(path: str) -> PosteriorEnsemble:
    try:
        return PosteriorEnsemble.load(_existing(path))
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise Failure(f"bad model file {path}: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_parse(args) -> int:
    data = _existing(args.stream).read_bytes()
    try:
        rec = jdeser.parse_stream(data, max_depth=args.max_depth)
    except jdeser.ParseError as exc:
        _write(args, jdeser.events_to_jsonl(exc.events, exc))
        log.error("parse failed: %s at offset %d", exc.detail, exc.offset)
        return EXIT_FAILURE
    _write(args, jdeser.events_to_jsonl(rec.events))
    return EXIT_OK


def cmd_extract(args) -> int:
    roots = [_existing(r) for r in args.class_root]
    names = list(args.names)
    if args.names_file:
        names += [ln.strip() for ln in _existing(args.names_file).read_text().splitlines() if ln.strip()]
    try:
        with classfeat.ClassResolver(roots) as resolver:
            if args.all:
                names += resolver.names()
            if not names:
                raise UsageError("no class names given (use NAMES, --names-file or --all)")
            fmap = classfeat.scan_corpus(resolver, names)
    except (classfeat.ClassFormatError, OSError) as exc:
        raise Failure(str(exc)) from None
    _write(args, json.dumps({k: str(v) for k, v in sorted(fmap.items())}, indent=1) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_dataset(args)
    if args.train_limit is not None:
        idx = ev.stratified_limit(ds.labels(), range(len(ds)), args.train_limit, args.seed)
        ds = ds.subset(idx)
    cfg = ev.TrainConfig(args.estimator, _mh_config(args), args.pseudocount)
    try:
        catalog, models = ev.fit_dataset(ds, cfg, seed=0)
    except ValueError as exc:
        raise Failure(f"training failed: {exc}") from None
    models[ev.BENIGN].dump(args.model_benign)
    models[ev.MALICIOUS].dump(args.model_malicious)
    if args.catalog:
        catalog.dump(args.catalog)
    for lab, m in models.items():
        extra = f", acceptance {m.acceptance_rate:.3f}" if m.acceptance_rate is not None else ""
        log.info("%s model: %d states, %d samples%s", lab, m.k, len(m), extra)
    return EXIT_OK


def _read_traces(args) -> list[tuple[str, list[str]]]:
    data = _existing(args.trace).read_bytes()
    if data[:2] == b"\xac\xed":
        try:
            rec = jdeser.parse_stream(data)
        except jdeser.ParseError as exc:
            raise Failure(f"parse failed: {exc.detail} at offset {exc.offset}") from None
        return [("unlabeled", rec.class_names)]
    try:
        ds = ev.Dataset.from_jsonl(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise Failure(f"bad trace file {args.trace}: {exc}") from None
    return [(tr.label, tr.class_names) for tr in ds.traces]


def cmd_score(args) -> int:
    model = _load_model(args.model)
    catalog = StateCatalog.load(_existing(args.catalog)) if args.catalog else model.catalog
    if catalog is None:
        raise UsageError("model carries no catalog; pass --catalog")
    fmap = _load_features(args)
    zero = FeatureVector.zeros()
    lines = []
    for n, (label, names) in enumerate(_read_traces(args)):
        if not names:
            raise Failure(f"trace {n} has no classes")
        seq = catalog.encode_all(fmap.get(c, zero) for c in names)
        mean, std = bayes.ensemble_score(model, seq)
        lines.append({"index": n, "label": label, "length": len(seq), "mean": mean, "std": std})
    if args.format == "text":
        text = "".join(f"{d['index']:>5} {d['label']:<10} {d['length']:>4} {d['mean']:>12.4f} {d['std']:>10.4f}\n"
                       for d in lines)
    else:
        text = "".join(json.dumps(d) + "\n" for d in lines)
    _write(args, text)
    return EXIT_OK


def cmd_filter(args) -> int:
    benign = _load_model(args.model_benign)
    malicious = _load_model(args.model_malicious)
    catalog = StateCatalog.load(_existing(args.catalog)) if args.catalog else None
    if catalog is not None:
        for m in (benign, malicious):
            if m.catalog is not None and m.catalog != catalog:
                raise Failure("--catalog differs from the catalog stored in the models")
            m.catalog = catalog
    fmap = _load_features(args)
    resolver = classfeat.ClassResolver([_existing(r) for r in args.class_root]) if args.class_root else None
    zero = FeatureVector.zeros()

    def lookup(name: str) -> FeatureVector:
        v = fmap.get(name)
        if v is None and resolver is not None:
            v = classfeat.scan_corpus(resolver, [name])[name]
            fmap[name] = v
        if v is None:
            log.warning("no features for class %s; using all-false vector", name)
            v = fmap[name] = zero
        return v

    data = _existing(args.stream).read_bytes()
    try:
        config = FilterConfig(args.t, args.l)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        result = filter_stream(benign, malicious, config, [data], lookup)
    except ValueError as exc:  # incompatible models
        raise Failure(str(exc)) from None
    finally:
        if resolver is not None:
            resolver.close()
    if args.format == "text":
        text = f"{result.decision} {result.index}\n"
        if result.error is not None:
            text += f"error: {result.error.code}: {result.error.detail} at offset {result.error.offset}\n"
    else:
        text = "".join(rec.to_json() + "\n" for rec in result.history)
    _write(args, text)
    if result.decision == ACCEPTED:
        return EXIT_OK
    return EXIT_REJECTED


def cmd_eval(args) -> int:
    ds = _load_dataset(args)
    cfg = ev.TrainConfig(args.estimator, _mh_config(args), args.pseudocount)
    ts = args.t if isinstance(args.t, list) else [args.t]
    ls = args.l if isinstance(args.l, list) else [args.l]
    try:
        grid = [FilterConfig(t, l) for l in ls for t in ts]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        reports = ev.evaluate_grid(ds, grid, cfg, k=args.folds, seed=args.seed, train_limit=args.train_limit)
    except ev.TooFewExamples as exc:
        raise Failure(f"evaluation failed: {exc}") from None
    for r in reports:
        log.info("t=%g l=%s: train %.2fs, predict %.2fs", r.t, r.l, r.train_seconds, r.predict_seconds)
    if args.sweep_csv:
        Path(args.sweep_csv).write_text(ev.sweep_csv(reports))
    if args.format == "text":
        text = ev.format_table(reports, timing=args.timing)
    else:
        text = json.dumps([r.to_dict(timing=args.timing) for r in reports], indent=1) + "\n"
    _write(args, text)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec:
        try:
            spec = ev.SynthSpec.from_dict(json.loads(_existing(args.spec).read_text()))
        except (json.JSONDecodeError, ev.InvalidSpec) as exc:
            raise Failure(f"bad synth spec: {exc}") from None
    else:
        spec = ev.default_spec()
    if args.dump_spec:
        Path(args.dump_spec).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    overrides = {k: v for k, v in (("n_benign", args.n_benign), ("n_malicious", args.n_malicious)) if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    ds = ev.synth_generate(spec, seed=args.seed)
    if args.feature_map_out:
        Path(args.feature_map_out).write_text(
            json.dumps({k: str(v) for k, v in sorted(ds.feature_map.items())}, indent=1) + "\n")
    _write(args, ds.to_jsonl())
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deserfilter", description="Markov-chain filter for Java deserialization streams.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, out=True, seed=True, fmt=False):
        sp.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
        if out:
            sp.add_argument("--out", help="output file (default: stdout)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if fmt:
            sp.add_argument("--format", choices=("json", "text"), default="json")

    sp = sub.add_parser("parse", help="list the classes of a serialized stream as JSONL")
    sp.add_argument("stream")
    sp.add_argument("--max-depth", type=int, default=jdeser.DEFAULT_MAX_DEPTH)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("extract", help="compute class feature vectors from class roots")
    sp.add_argument("names", nargs="*", help="fully qualified class names")
    sp.add_argument("--class-root", action="append", required=True, help="directory or jar (repeatable)")
    sp.add_argument("--names-file")
    sp.add_argument("--all", action="store_true", help="every class found under the roots")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="fit benign and malicious models from a labeled dataset")
    sp.add_argument("--dataset", required=True, help="JSONL traces")
    sp.add_argument("--feature-map", help="class name -> feature vector JSON")
    sp.add_argument("--model-benign", required=True, help="output path")
    sp.add_argument("--model-malicious", required=True, help="output path")
    sp.add_argument("--catalog", help="also write the state catalog here")
    sp.add_argument("--train-limit", type=int)
    _add_mh(sp)
    common(sp, out=False)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="mean and std log probability of traces under a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--trace", required=True, help="JSONL traces or a serialized stream")
    sp.add_argument("--feature-map")
    sp.add_argument("--catalog")
    common(sp, seed=False, fmt=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("filter", help="accept or reject a serialized stream")
    sp.add_argument("stream")
    sp.add_argument("--model-benign", required=True)
    sp.add_argument("--model-malicious", required=True)
    sp.add_argument("--catalog")
    sp.add_argument("--feature-map")
    sp.add_argument("--class-root", action="append", help="resolve features of unmapped classes here")
    sp.add_argument("--t", type=_nonneg, default=2.0)
    sp.add_argument("--l", type=_threshold, default=math.inf)
    common(sp, seed=False, fmt=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("eval", help="k-fold evaluation over a grid of t and l")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--feature-map")
    sp.add_argument("--t", type=_list_of(_nonneg), default=[0.0, 1.0, 2.0, 3.0], help="comma list")
    sp.add_argument("--l", type=_list_of(_threshold), default=[math.inf], help="comma list")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--train-limit", type=int, help="training traces kept per fold")
    sp.add_argument("--sweep-csv", help="also write l, precision, recall, mean_index as CSV")
    sp.add_argument("--timing", action="store_true", help="include wall times in the report")
    _add_mh(sp)
    common(sp, fmt=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    sp.add_argument("--spec", help="planted-chain spec JSON (default: built-in desk-scale spec)")
    sp.add_argument("--dump-spec", help="write the corpus spec in use to this path")
    sp.add_argument("--n-benign", type=int)
    sp.add_argument("--n-malicious", type=int)
    sp.add_argument("--feature-map-out")
    common(sp)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"deserfilter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.info("config: %s", json.dumps(resolved, default=str, sort_keys=True))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"deserfilter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Failure as exc:
        print(f"deserfilter: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
