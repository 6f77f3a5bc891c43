"""Command-line entry point: ``grulens <subcommand> ... --out DIR``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure.  Errors are reported as one JSON line on standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    Corpus,
    CorpusError,
    FeatureTable,
    gen_microworld,
    load_features,
    write_annotated,
    write_features,
)
from .model import PATHWAYS, TEXTUAL, VISUAL
from .numkernel import DegenerateVectorError
from .problab import ProbeConvergenceError, SingularDesignError

log = logging.getLogger("grulens")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(args, out: Path, inputs: dict[str, str | None]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    skip = {"func", "out", "command"} | set(inputs)
    resolved = {}
    for name, p in inputs.items():
        if p is None:
            continue
        entry = {"path": os.path.relpath(p, out)}
        if Path(p).is_file():
            entry["sha256"] = _sha256(p)
        resolved[name] = entry
    manifest = {
        "subcommand": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
        "inputs": resolved,
        "seed": getattr(args, "seed", None),
        "output_directory": ".",
        "version": __version__,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_checkpoint_corpus(args):
    from .trainer import load

    ckpt = load(args.checkpoint)
    corpus = Corpus.from_files(args.corpus, vocab=ckpt.vocab)
    return ckpt, corpus


# -- subcommands ------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out)
    _write_manifest(args, out, {})
    sentences, feats = gen_microworld(args.seed, args.n)
    write_annotated(out / "corpus.txt", sentences)
    write_features(out / "features.tsv", feats)


def cmd_train(args):
    from .trainer import TrainConfig, TrainingDiverged, save, train, write_loss_log

    out = Path(args.out)
    _write_manifest(args, out, {"corpus": args.corpus, "features": args.features})
    corpus = Corpus.from_files(args.corpus, args.features, min_count=args.min_count)
    config = TrainConfig(
        seed=args.seed, hidden=args.hidden, emb=args.emb, alpha=args.alpha, lr=args.lr,
        batch_size=args.batch_size, epochs=args.epochs, clip=args.clip,
        visual_encoder=args.visual_encoder, min_count=args.min_count,
    )
    try:
        result = train(config, corpus)
    except TrainingDiverged as exc:
        save(exc.last_good, config, out, corpus.vocab, corpus.stats)
        raise
    save(result.params, config, out, corpus.vocab, corpus.stats)
    write_loss_log(out / "loss.csv", result.history)


def cmd_omit(args):
    from .omission import (
        aggregate_by_label,
        log_ratio_by_label,
        omission_corpus,
        retrieval_demo,
        write_omission_csv,
    )

    out = Path(args.out)
    _write_manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus, "features": args.features})
    ckpt, corpus = _load_checkpoint_corpus(args)
    records = omission_corpus(ckpt.params, corpus.sentences, corpus.vocab)
    write_omission_csv(out / "omission.csv", records)
    for label in ("pos", "deprel"):
        dists = aggregate_by_label(records, label, args.min_count)
        rows = []
        for lab, d in dists.items():
            rows.append([lab, d.count, *d.visual_summary, *d.textual_summary])
        _write_csv(out / f"distribution_{label}.csv",
                   ["label", "count", "visual_q1", "visual_median", "visual_q3",
                    "textual_q1", "textual_median", "textual_q3"], rows)
        report = log_ratio_by_label(records, label, args.min_count)
        _write_csv(out / f"log_ratio_{label}.csv", ["label", "log_ratio"],
                   [[lab, v] for lab, vals in report.ratios.items() for v in vals])
        _write_json(out / f"log_ratio_{label}_summary.json", {
            "direction": "ln(score_visual / score_textual)",
            "min_count": args.min_count,
            "excluded": report.excluded,
            "median": {lab: float(np.median(v)) if v.size else None for lab, v in report.ratios.items()},
        })
    if args.features and args.retrieve > 0:
        raw = load_features(args.features)
        vals = raw.values if ckpt.stats is None else ckpt.stats.apply(raw.values)
        db = FeatureTable(raw.ids, vals)
        demos = [retrieval_demo(ckpt.params, s, corpus.vocab, db)
                 for s in sorted(corpus.sentences, key=lambda s: s.sid)[: args.retrieve]]
        _write_json(out / "retrieval.json", demos)


def cmd_reglab(args):
    from .omission import read_omission_csv
    from .problab import position_coefficients, rank_words_by_deprel_gain, run_lm_suite, scored_tokens

    out = Path(args.out)
    _write_manifest(args, out, {"omission": args.omission, "sum_omission": args.sum_omission, "corpus": args.corpus})
    corpus = Corpus.from_files(args.corpus)
    records = read_omission_csv(args.omission)
    scores = {}
    if args.sum_omission:
        scores["SUM"] = scored_tokens(read_omission_csv(args.sum_omission), VISUAL)
    scores["VISUAL"] = scored_tokens(records, VISUAL)
    scores["TEXTUAL"] = scored_tokens(records, TEXTUAL)
    for enc, toks in scores.items():
        for t in toks:
            try:
                s = corpus.sentence(t.sentence_id)
            except KeyError:
                raise CorpusError(f"{enc} record for unknown sentence {t.sentence_id!r}") from None
            if t.token_index >= len(s.content) or s.content[t.token_index].form != t.form:
                raise CorpusError(f"{enc} record {t.sentence_id}:{t.token_index} does not match the corpus")

    suite = run_lm_suite(scores, args.seed, args.lam)
    _write_json(out / "lm_suite.json", suite.to_json())
    coef_rows = []
    for enc, fits in suite.fits.items():
        for b, v in position_coefficients(fits["FULL"]).items():
            coef_rows.append([enc, b, v])
    _write_csv(out / "position_coefficients.csv", ["encoder", "position_bin", "coefficient"], coef_rows)

    gain_rows, dist_rows = [], []
    for enc, toks in scores.items():
        ranked, dists = rank_words_by_deprel_gain(toks, args.min_count, args.lam, args.seed, args.gain_metric)
        for rank, wg in enumerate(ranked, start=1):
            gain_rows.append([enc, rank, wg.word, wg.count, wg.gain])
        for wg in ranked[: args.top_words]:
            for dep, vals in sorted(dists[wg.word].items()):
                dist_rows.extend([enc, wg.word, dep, v] for v in vals)
    _write_csv(out / "deprel_gain.csv", ["encoder", "rank", "word", "count", "mean_gain"], gain_rows)
    _write_csv(out / "deprel_gain_distributions.csv", ["encoder", "word", "deprel", "score"], dist_rows)


def cmd_probe(args):
    from .model import encode
    from .problab import fit_logistic_probe

    out = Path(args.out)
    _write_manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus})
    ckpt, corpus = _load_checkpoint_corpus(args)
    sentences = sorted(corpus.sentences, key=lambda s: s.sid)
    for pathway in PATHWAYS:
        hidden = [encode(ckpt.params, pathway, corpus.vocab.encode(s)).hidden for s in sentences]
        res = fit_logistic_probe(sentences, hidden, args.window, args.lam, args.top_k, args.min_feature_count)
        _write_json(out / f"probe_{pathway}.json", {
            "pathway": pathway,
            "window": res.window,
            "lambda": res.lam,
            "min_feature_count": res.min_feature_count,
            "n_ngram_features": len(res.ngram_names),
            "iterations": res.iterations,
            "train_accuracy": res.train_accuracy,
            "top_units": res.top_units,
        })
        rows = [[lab, u, res.activation_coef[k, u]]
                for k, lab in enumerate(res.labels) for u in range(res.activation_coef.shape[1])]
        _write_csv(out / f"probe_{pathway}_unit_coefficients.csv", ["label", "unit", "coefficient"], rows)


def cmd_topk(args):
    from .inspector import capture, top_k_contexts

    out = Path(args.out)
    _write_manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus})
    ckpt, corpus = _load_checkpoint_corpus(args)
    for pathway in PATHWAYS:
        M = capture(ckpt.params, pathway, corpus.sentences, corpus.vocab)
        units = range(M.d) if args.units is None else args.units
        result = [row for u in units for row in top_k_contexts(M, u, args.k, args.n, args.unit_type, args.absolute)]
        _write_json(out / f"topk_{pathway}.json", result)


def cmd_mi(args):
    from .inspector import capture, context_name, run_mi_suite

    out = Path(args.out)
    _write_manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus})
    ckpt, corpus = _load_checkpoint_corpus(args)
    Mt = capture(ckpt.params, TEXTUAL, corpus.sentences, corpus.vocab)
    Mv = capture(ckpt.params, VISUAL, corpus.sentences, corpus.vocab)
    res = run_mi_suite(Mt, Mv, args.bins, args.replicates, args.seed, args.jobs)
    rows = []
    for ctx, bs in res.bootstrap.items():
        rows.extend([context_name(ctx), int(r), v] for r, v in zip(bs.replicate_ids, bs.log_ratios))
    _write_csv(out / "mi_bootstrap.csv", ["context_type", "replicate", "log_ratio"], rows)
    summary = res.summary()
    _write_csv(out / "mi_summary.csv", list(summary[0]), [list(r.values()) for r in summary])
    unit_rows = [[context_name(ctx), pw, u, v]
                 for ctx, per in res.per_unit.items() for pw, vec in per.items() for u, v in enumerate(vec)]
    _write_csv(out / "mi_units.csv", ["context_type", "pathway", "unit", "mi"], unit_rows)


def cmd_trace(args):
    from .figures import heat_strip
    from .inspector import capture, decile_thresholds, trace

    out = Path(args.out)
    _write_manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus})
    ckpt, corpus = _load_checkpoint_corpus(args)
    M = capture(ckpt.params, args.pathway, corpus.sentences, corpus.vocab)
    if not 0 <= args.unit < M.d:
        raise CorpusError(f"unit {args.unit} out of range for {M.d} units")
    thresholds = decile_thresholds(M)
    flags = {}
    for sid in args.sentence_ids:
        try:
            s = corpus.sentence(sid)
        except KeyError:
            raise CorpusError(f"unknown sentence id {sid!r}") from None
        tr = trace(ckpt.params, args.pathway, s, args.unit, corpus.vocab, thresholds)
        _write_csv(out / f"trace_{sid}.csv", ["token", "activation"], zip(tr.tokens, tr.activations))
        if args.svg:
            heat_strip(tr, out / f"trace_{sid}.svg")
        flags[sid] = tr.in_top_decile
    _write_json(out / "traces.json", {
        "pathway": args.pathway, "unit": args.unit,
        "decile_threshold": float(thresholds[args.unit]), "in_top_decile": flags,
    })


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grulens", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    g = add("gen", cmd_gen, "generate a micro-world corpus")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n", type=int, default=500, help="number of scenes")

    t = add("train", cmd_train, "train and checkpoint a model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--hidden", type=int, default=256)
    t.add_argument("--emb", type=int, default=256)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--clip", type=float, default=5.0)
    t.add_argument("--min-count", type=int, default=1)
    t.add_argument("--visual-encoder", choices=["gru", "sum"], default="gru")

    o = add("omit", cmd_omit, "omission scores and per-label reports")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--corpus", required=True)
    o.add_argument("--features", help="feature file for the retrieval demo")
    o.add_argument("--retrieve", type=int, default=0, help="sentences to run the retrieval demo on")
    o.add_argument("--min-count", type=int, default=500)

    r = add("reglab", cmd_reglab, "regression analysis of omission scores")
    r.add_argument("--omission", required=True)
    r.add_argument("--sum-omission", help="omission CSV of a model trained with --visual-encoder sum")
    r.add_argument("--corpus", required=True)
    r.add_argument("--lam", type=float, default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--min-count", type=int, default=100)
    r.add_argument("--gain-metric", choices=["abs", "squared"], default="abs")
    r.add_argument("--top-words", type=int, default=5)

    pr = add("probe", cmd_probe, "logistic probes for dependency labels")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--corpus", required=True)
    pr.add_argument("--window", type=int, default=4)
    pr.add_argument("--lam", type=float, default=0.01)
    pr.add_argument("--top-k", type=int, default=5)
    pr.add_argument("--min-feature-count", type=int, default=5)

    k = add("topk", cmd_topk, "top-K contexts per hidden unit")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--corpus", required=True)
    k.add_argument("--k", type=int, default=20)
    k.add_argument("--n", type=int, default=3, help="context length")
    k.add_argument("--unit-type", choices=["word", "deprel"], default="word")
    k.add_argument("--units", type=int, nargs="+")
    k.add_argument("--absolute", action="store_true", help="rank by |activation|")

    m = add("mi", cmd_mi, "mutual information suite with bootstrap")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--corpus", required=True)
    m.add_argument("--bins", type=int, default=20)
    m.add_argument("--replicates", type=int, default=5000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--jobs", type=int, default=1)

    tr = add("trace", cmd_trace, "activation traces of one unit")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--unit", type=int, required=True)
    tr.add_argument("--sentence-ids", nargs="+", required=True)
    tr.add_argument("--pathway", choices=list(PATHWAYS), default=VISUAL)
    tr.add_argument("--svg", action=argparse.BooleanOptionalAction, default=True)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(msg, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .trainer import CheckpointError, TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (TrainingDiverged, DegenerateVectorError, SingularDesignError, ProbeConvergenceError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (CorpusError, CheckpointError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
