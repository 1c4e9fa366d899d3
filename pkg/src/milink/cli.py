"""Batch command-line entry points wiring the library into reproducible
pipelines.

Every subcommand takes ``--out`` and writes its artifacts there together
with an ``effective_config.json`` echo sufficient to re-run it; an already
populated output directory is never overwritten (a timestamped
subdirectory is created instead).  All randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import autodiff as ad
from .candidates import (
    DataPoint,
    Mention,
    build_dataset,
    oracle_recall,
    read_corpus,
    read_datapoints,
    read_noise_labels,
    write_datapoints,
)
from .evaluation import (
    evaluate,
    format_report,
    link_batch,
    link_by_prominence,
    nd_accuracy_curve,
    report_records,
)
from .kb import load_kb_files
from .model import EntityTypeTable, LinkingModel, ModelConfig, WordVectors
from .synth import SynthConfig, generate_splits
from .training import TRAIN_MODES, loss_l1, loss_l2, train


def _fail(message: str) -> "NoReturn":  # noqa: F821 - py3.10 compat
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(1)


def prepare_run_dir(out: str) -> str:
    """Use ``out`` when it is empty or fresh; otherwise create a
    timestamped subdirectory so existing runs are never overwritten."""
    if not os.path.exists(out):
        os.makedirs(out)
        return out
    if os.path.isdir(out) and not os.listdir(out):
        return out
    stamp = time.strftime("run-%Y%m%d-%H%M%S")
    candidate = os.path.join(out, stamp)
    n = 1
    while os.path.exists(candidate):
        candidate = os.path.join(out, f"{stamp}-{n}")
        n += 1
    os.makedirs(candidate)
    return candidate


def _echo_config(run_dir: str, command: str, settings: dict) -> None:
    with open(os.path.join(run_dir, "effective_config.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": command, **settings}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_kb_dir(kb_dir: str, strict: bool = False):
    entities = os.path.join(kb_dir, "entities.tsv")
    relations = os.path.join(kb_dir, "relations.tsv")
    for path in (entities, relations):
        if not os.path.exists(path):
            _fail(f"knowledge base file not found: {path}")
    return load_kb_files(entities, relations, on_dangling="error" if strict else "skip")


def _file_config(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        _fail(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            _fail(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        _fail(f"config file {path} must hold a JSON object")
    return data


def _build_config(cls, file_values: dict, overrides: dict):
    """Dataclass config from defaults, then file values, then CLI flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(file_values) - names
    if unknown:
        _fail(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        _fail(f"invalid configuration: {exc}")


def _model_overrides(args) -> dict:
    return {
        "margin": args.margin,
        "temperature": args.temperature,
        "eta": args.eta,
        "prior_noise": args.prior,
        "tau": args.tau,
        "lr": args.lr,
        "batch_size": args.batch,
        "epochs": args.epochs,
    }


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with model-config keys (flags override it)")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--prior", type=float, default=None, help="prior noise probability")
    p.add_argument("--tau", type=float, default=None, help="abstention threshold")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_kb_build(args) -> int:
    kb = _load_kb_dir(args.kb, strict=args.strict)
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "kb-build", {"kb": args.kb, "strict": args.strict})
    n_tokens = len(kb.token_index)
    postings = sum(len(rows) for rows in kb.token_index.values())
    summary = {
        "entities": len(kb),
        "triples": len(kb.triples),
        "index_tokens": n_tokens,
        "index_postings": postings,
        "entities_with_relations": len(kb.adjacency),
    }
    with open(os.path.join(run_dir, "kb_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def cmd_synth(args) -> int:
    overrides = {
        "n_entities": args.entities,
        "n_sentences": args.sentences,
        "noise_rate": args.noise_rate,
        "seed": args.seed,
    }
    config = _build_config(SynthConfig, _file_config(args.config), overrides)
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "synth", {**asdict(config), "n_dev": args.dev_sentences,
                                    "n_test": args.test_sentences})
    paths = generate_splits(config, run_dir, n_dev=args.dev_sentences, n_test=args.test_sentences)
    for key in sorted(paths):
        print(f"{key}: {paths[key]}")
    return 0


def cmd_gen_data(args) -> int:
    kb = _load_kb_dir(args.kb, strict=args.strict)
    if not os.path.exists(args.corpus):
        _fail(f"corpus file not found: {args.corpus}")
    corpus = read_corpus(args.corpus)
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "gen-data", {
        "kb": args.kb, "corpus": args.corpus, "mode": args.mode,
        "cap": args.cap, "n_neg": args.n_neg, "seed": args.seed,
    })
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(11,)))
    points = list(build_dataset(kb, corpus, cap=args.cap, n_neg=args.n_neg,
                                mode=args.mode, rng=rng))
    out_points = os.path.join(run_dir, "datapoints.jsonl")
    write_datapoints(out_points, points)
    n_empty = sum(1 for p in points if not p.positive)
    print(f"wrote {len(points)} data points to {out_points} ({n_empty} with empty candidates)")
    if all(p.mention.gold is not None for p in points):
        caps = sorted({c for c in (10, 50, 100, args.cap) if c <= args.cap})
        with open(os.path.join(run_dir, "oracle_recall.tsv"), "w", encoding="utf-8") as fh:
            for cap in caps:
                fh.write(f"{cap}\t{oracle_recall(points, cap):.6f}\n")
        print(f"oracle recall at cap {args.cap}: {oracle_recall(points, args.cap):.4f}")
    return 0


def _load_points(args, kb):
    for path in (args.corpus, args.points):
        if not os.path.exists(path):
            _fail(f"input file not found: {path}")
    corpus = read_corpus(args.corpus)
    return read_datapoints(args.points, corpus)


def cmd_train(args) -> int:
    kb = _load_kb_dir(args.kb)
    train_points = _load_points(argparse.Namespace(corpus=args.corpus, points=args.points), kb)
    dev_points = _load_points(argparse.Namespace(corpus=args.dev_corpus, points=args.dev_points), kb)
    if not os.path.exists(args.vectors):
        _fail(f"word vector file not found: {args.vectors}")
    word_vectors = WordVectors.load(args.vectors)
    file_cfg = _file_config(args.config)
    file_cfg.setdefault("word_dim", word_vectors.dim)
    config = _build_config(ModelConfig, file_cfg, _model_overrides(args))
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "train", {
        "kb": args.kb, "corpus": args.corpus, "points": args.points,
        "dev_corpus": args.dev_corpus, "dev_points": args.dev_points,
        "vectors": args.vectors, "mode": args.mode, "seed": args.seed,
        "resample_negatives": args.resample_negatives, **asdict(config),
    })
    model = LinkingModel(config, word_vectors, EntityTypeTable.from_kb(kb),
                         seed=args.seed, kb=kb)
    state = train(model, train_points, dev_points, mode=args.mode, seed=args.seed,
                  log_path=os.path.join(run_dir, "train_log.jsonl"),
                  kb=kb, resample_negatives=args.resample_negatives)
    model.save(run_dir)
    print(f"best dev F1 {state.best_f1:.4f} at epoch {state.best_epoch}; "
          f"model saved to {run_dir}")
    return 0


def _predictions(model, points, tau):
    return link_batch(model, points, tau=tau)


def cmd_eval(args) -> int:
    kb = _load_kb_dir(args.kb)
    points = _load_points(args, kb)
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "eval", {
        "kb": args.kb, "corpus": args.corpus, "points": args.points,
        "model": args.model, "setting": args.setting, "tau": args.tau,
        "baseline": args.baseline, "cap_grid": args.cap_grid,
    })
    settings = ["all", "in-e-plus"] if args.setting == "both" else [args.setting]
    if args.baseline:
        preds = [link_by_prominence(dp) for dp in points]
    else:
        model = LinkingModel.load(args.model, kb=kb)
        preds = _predictions(model, points, args.tau)
    reports = [evaluate(preds, points, setting) for setting in settings]
    txt = format_report(reports)
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(txt)
    with open(os.path.join(run_dir, "report.jsonl"), "w", encoding="utf-8") as fh:
        for rec in report_records(reports):
            fh.write(json.dumps(rec) + "\n")
    print(txt, end="")
    if args.cap_grid and not args.baseline:
        caps = sorted({int(c) for c in args.cap_grid.split(",")})
        with open(os.path.join(run_dir, "f1_vs_cap.tsv"), "w", encoding="utf-8") as fh:
            for cap in caps:
                capped = [
                    DataPoint(mention=dp.mention, tokens=dp.tokens,
                              positive=dp.positive[:cap], negative=dp.negative,
                              noise_label=dp.noise_label)
                    for dp in points
                ]
                cpreds = _predictions(model, capped, args.tau)
                for setting in settings:
                    rep = evaluate(cpreds, capped, setting)
                    fh.write(f"{cap}\t{setting}\t{rep.f1:.6f}\n")
        print(f"cap sweep written to {os.path.join(run_dir, 'f1_vs_cap.tsv')}")
    return 0


def cmd_link(args) -> int:
    kb = _load_kb_dir(args.kb)
    points = _load_points(args, kb)
    model = LinkingModel.load(args.model, kb=kb)
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "link", {
        "kb": args.kb, "corpus": args.corpus, "points": args.points,
        "model": args.model, "tau": args.tau,
    })
    preds = _predictions(model, points, args.tau)
    out_path = os.path.join(run_dir, "predictions.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        for pred in preds:
            fh.write(json.dumps({
                "point_id": pred.mention.point_id,
                "predicted": pred.predicted,
                "p_noise": pred.p_noise,
                "best_score": pred.best_score,
            }) + "\n")
    n_emitted = sum(1 for p in preds if p.predicted is not None)
    print(f"wrote {len(preds)} predictions ({n_emitted} emitted) to {out_path}")
    return 0


def cmd_noise_report(args) -> int:
    kb = _load_kb_dir(args.kb)
    points = _load_points(args, kb)
    model = LinkingModel.load(args.model, kb=kb)
    run_dir = prepare_run_dir(args.out)
    _echo_config(run_dir, "noise-report", {
        "kb": args.kb, "corpus": args.corpus, "points": args.points,
        "model": args.model, "labels": args.labels, "tau": args.tau,
    })
    if args.labels:
        labels = read_noise_labels(args.labels)
        missing = [dp.point_id for dp in points if dp.point_id not in labels]
        if missing:
            _fail(f"{len(missing)} points missing from label sidecar (first: {missing[0]})")
        validity = {dp.point_id: not labels[dp.point_id] for dp in points}
    else:
        if any(dp.mention.gold is None for dp in points):
            _fail("points lack gold annotations; pass --labels with ground-truth noise flags")
        validity = {dp.point_id: dp.gold_in_positive() for dp in points}
    scored = [dp for dp in points if dp.positive]
    preds = link_batch(model, scored)
    pairs = [(pred.p_noise, validity[dp.point_id]) for pred, dp in zip(preds, scored)]
    grid = [round(0.1 * i, 1) for i in range(1, 10)]
    curve = nd_accuracy_curve(pairs, grid)
    with open(os.path.join(run_dir, "nd_accuracy.tsv"), "w", encoding="utf-8") as fh:
        for tau, acc in curve:
            fh.write(f"{tau}\t{'' if acc is None else f'{acc:.6f}'}\n")
    above = [p for p, _ in pairs if p > args.tau]
    frac_above = len(above) / len(pairs) if pairs else 0.0
    noisy_above = sum(1 for p, valid in pairs if p > args.tau and not valid)
    precision_above = noisy_above / len(above) if above else float("nan")
    summary = {
        "n_points": len(pairs),
        "tau": args.tau,
        "fraction_above_tau": frac_above,
        "noisy_fraction_above_tau": precision_above,
    }
    with open(os.path.join(run_dir, "noise_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{len(above)} of {len(pairs)} points above tau={args.tau} "
          f"({100 * frac_above:.1f}%); {100 * precision_above:.1f}% of those are truly noisy")
    return 0


def cmd_gradcheck(args) -> int:
    from .kb import load_kb

    entity_lines = [
        "e1\talpha beta north\tt0,t1",
        "e2\talpha beta south\tt2",
        "e3\tgamma delta\tt3",
        "e4\tgamma delta east\tt1",
        "e5\tqoph resh\tt0",
        "e6\tqoph waw\tt2",
    ]
    kb = load_kb(entity_lines, ["e1\tassoc\te3", "e5\tassoc\te4"])
    config = ModelConfig(word_dim=8, pos_dim=2, type_dim=4, entity_dim=6, lstm_hidden=8,
                         ffn_g_hidden=8, ffn_f_hidden=8, max_offset=10)
    rng = np.random.default_rng(args.seed)
    vocab = ["alpha", "beta", "gamma", "delta", "qoph", "resh", "waw", "met", "visited", "near"]
    word_vectors = WordVectors(8, {w: rng.normal(0.0, 0.5, 8) for w in vocab})
    model = LinkingModel(config, word_vectors, EntityTypeTable.from_kb(kb),
                         seed=args.seed, kb=kb)
    toks1 = ("met", "alpha", "beta", "near", "gamma", "delta")
    toks2 = ("qoph", "resh", "visited", "gamma", "delta")
    points = [
        DataPoint(Mention("s1", (2, 3), "PER", "e1"), toks1, ("e1", "e2"), ("e3", "e5", "e6")),
        DataPoint(Mention("s1", (5, 6), "LOC", "e3"), toks1, ("e3", "e4"), ("e1", "e6")),
        DataPoint(Mention("s2", (1, 2), "ORG", "e5"), toks2, ("e5", "e6"), ("e2", "e4")),
        DataPoint(Mention("s2", (4, 5), "LOC", "e3"), toks2, ("e3", "e4"), ("e1", "e2", "e5")),
    ]
    params = model.params.trainables()
    worst = 0.0
    for name, builder in (
        ("L1", lambda tape: loss_l1(model, points, tape)),
        ("L2", lambda tape: loss_l2(model, points, tape)),
    ):
        report = ad.gradient_check(builder, params, eps=args.eps,
                                   max_coords_per_param=args.max_coords, seed=args.seed)
        print(f"{name}: {report}")
        worst = max(worst, report.max_rel_error)
    if worst >= args.threshold:
        print(f"FAIL: max relative error {worst:.3e} >= {args.threshold:g}")
        return 1
    print(f"OK: max relative error {worst:.3e} < {args.threshold:g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milink",
        description="surface-matched entity linking trained without labeled data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kb-build", help="load and index a knowledge base, print a summary")
    p.add_argument("--kb", required=True, help="directory with entities.tsv and relations.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="error on dangling relation endpoints")
    p.set_defaults(func=cmd_kb_build)

    p = sub.add_parser("synth", help="generate a synthetic KB plus corpora with noise labels")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with synthesis-config keys")
    p.add_argument("--entities", type=int, default=None)
    p.add_argument("--sentences", type=int, default=None, help="training sentences")
    p.add_argument("--dev-sentences", type=int, default=300)
    p.add_argument("--test-sentences", type=int, default=300)
    p.add_argument("--noise-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-data", help="build data points from a corpus and a KB")
    p.add_argument("--kb", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["train", "test", "supervised"], default="train")
    p.add_argument("--cap", type=int, default=100, help="positive candidate cap")
    p.add_argument("--n-neg", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a linking model")
    p.add_argument("--kb", required=True)
    p.add_argument("--corpus", required=True, help="training corpus")
    p.add_argument("--points", required=True, help="training data points")
    p.add_argument("--dev-corpus", required=True)
    p.add_argument("--dev-points", required=True)
    p.add_argument("--vectors", required=True, help="word vector text file")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=list(TRAIN_MODES), default="mil")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resample-negatives", action="store_true",
                   help="redraw negative sets every epoch")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model (or the name-matching baseline)")
    p.add_argument("--kb", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--model", help="model directory (from train)")
    p.add_argument("--out", required=True)
    p.add_argument("--setting", choices=["all", "in-e-plus", "both"], default="both")
    p.add_argument("--tau", type=float, default=None,
                   help="abstention threshold (omit to always answer)")
    p.add_argument("--baseline", action="store_true",
                   help="evaluate the most-prominent-candidate baseline instead of a model")
    p.add_argument("--cap-grid", help="comma-separated caps for an F1-vs-cap sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("link", help="write predictions for a data point file")
    p.add_argument("--kb", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("noise-report", help="noise-detector accuracy against ground truth")
    p.add_argument("--kb", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="noise-label sidecar (defaults to gold-derived labels)")
    p.add_argument("--tau", type=float, default=0.75)
    p.set_defaults(func=cmd_noise_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of both training losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None,
                   help="subsample this many coordinates per tensor")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        _fail(str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
