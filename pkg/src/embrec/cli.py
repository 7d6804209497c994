"""``recsys`` command line.

Every subcommand takes ``--config`` (key=value file) and ``--seed``; files are
read from and written to ``pipeline.workdir``. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pipeline, report
from .config import Settings, load_settings
from .errors import ConfigError, DataError, RecsysError
from .evaluation import RVI, ablation_curve, evaluate, format_table, select_by_auc
from .synth import (build_dataset, generate_corpus, load_events, load_impressions, load_items, save_events,
                    save_impressions, save_items)
from .text import load_vocab, save_vocab
from .towers import Featurizer
from .training import build_featurizer, train

log = logging.getLogger("embrec")


def _corpus(s: Settings):
    p = s.pipeline
    items = load_items(p.path("items_path"))
    events = load_events(p.path("events_path"))
    impressions = load_impressions(p.path("impressions_path"))
    return items, events, impressions


def _featurizer(s: Settings, items) -> Featurizer:
    p = s.pipeline
    if p.path("title_vocab_path").exists() and p.path("aspect_vocab_path").exists():
        n_cat = max((it.category_id for it in items), default=-1) + 1
        return Featurizer(load_vocab(p.path("title_vocab_path")), load_vocab(p.path("aspect_vocab_path")), n_cat)
    return build_featurizer(items)


def _dataset(s: Settings, items, events, impressions):
    ds = build_dataset(items, events, impressions, s.corpus)
    if not ds.train:
        raise DataError("training split is empty")
    return ds


def _test_split(s: Settings, ds):
    cap = s.experiment.eval_users
    return ds.test if cap is None else ds.test[:cap]


# ---------------------------------------------------------------------------
# commands

def cmd_synth(s: Settings, args) -> dict:
    items, events, impressions = generate_corpus(s.corpus)
    p = s.pipeline
    save_items(items, p.path("items_path"))
    save_events(events, p.path("events_path"))
    save_impressions(impressions, p.path("impressions_path"))
    return {"items": len(items), "events": len(events), "impressions": len(impressions)}


def cmd_build_vocab(s: Settings, args) -> dict:
    items = load_items(s.pipeline.path("items_path"))
    f = build_featurizer(items)
    save_vocab(f.title_vocab, s.pipeline.path("title_vocab_path"))
    save_vocab(f.aspect_vocab, s.pipeline.path("aspect_vocab_path"))
    return {"title_tokens": len(f.title_vocab), "aspect_tokens": len(f.aspect_vocab)}


def _train(s: Settings, ds, items, featurizer, skip_seconds=None, log_path=None):
    tc = s.train_config()
    if skip_seconds is not None:
        tc = dataclasses.replace(tc, skip_window_seconds=skip_seconds)
    return train(ds, tc, items, featurizer=featurizer, log_path=log_path)


def cmd_train(s: Settings, args) -> dict:
    items, events, impressions = _corpus(s)
    ds = _dataset(s, items, events, impressions)
    featurizer = _featurizer(s, items)
    work = Path(s.pipeline.workdir)
    res = _train(s, ds, items, featurizer, log_path=work / "train_metrics.jsonl")
    pipeline.save_model(res.model, s.pipeline, {"skip_window_seconds": s.train.skip_window_seconds})
    if res.metrics:
        report.plot_training(res.metrics, work / "training.png")
    return {"best_epoch": res.best_epoch, "examples": len(ds.train),
            "val_recall_at_20": max((m["val_recall_at_20"] for m in res.metrics), default=None)}


def _stage(fn):
    def run(s: Settings, args) -> dict:
        return fn(s.pipeline)
    return run


def cmd_embed_items(s: Settings, args) -> dict:
    # candidates come from the filter stage; run it if it has not been run
    if not s.pipeline.path("candidates_path").exists():
        pipeline.stage_filter_candidates(s.pipeline)
    return pipeline.stage_embed_items(s.pipeline)


def cmd_evaluate(s: Settings, args) -> dict:
    items, events, impressions = _corpus(s)
    ds = _dataset(s, items, events, impressions)
    test = _test_split(s, ds)
    model = pipeline.load_model(s.pipeline)
    base = evaluate(RVI, test, items, label="RVI")
    rep = evaluate(model, test, items, label="model")
    work = Path(s.pipeline.workdir)
    report.write_tsv(work / "eval.tsv", ("k", "rvi", "model", "delta_pct"), report.recall_rows(base, rep))
    report.plot_recall(base, rep, work / "eval.png")
    (work / "eval.json").write_text(json.dumps({"rvi": json.loads(base.to_json()),
                                                "model": json.loads(rep.to_json())}, indent=2))
    print(format_table(base, rep))
    return {"impressions": rep.impression_count, "recall_at_20": rep.recall_at_k.get(20),
            "rvi_recall_at_20": base.recall_at_k.get(20)}


def cmd_ablation(s: Settings, args) -> dict:
    items, events, impressions = _corpus(s)
    ds = _dataset(s, items, events, impressions)
    test = _test_split(s, ds)
    featurizer = _featurizer(s, items)
    windows = sorted(s.experiment.missing_windows)
    curves = []
    for minutes in s.experiment.skip_minutes:
        res = _train(s, ds, items, featurizer, skip_seconds=int(round(minutes * 60)))
        curves.append(ablation_curve(res.model, test, items, windows, model_skip_minutes=minutes,
                                     label=f"skip {minutes:g} min"))
        log.info("skip %s min: AUC %.3f", minutes, curves[-1].auc())
    chosen = select_by_auc(curves)
    work = Path(s.pipeline.workdir)
    report.write_tsv(work / "ablation.tsv", ("model", "train_skip_min", "missing_min", "recall_at_20", "fallbacks"),
                     report.ablation_rows(curves))
    report.plot_ablation(curves, work / "ablation.png", selected=chosen)
    (work / "ablation.json").write_text(json.dumps(
        {"curves": [json.loads(c.to_json()) for c in curves], "selected": chosen}, indent=2))
    for c in curves:
        print(f"{c.label}\tAUC={c.auc():.4f}\t" + " ".join(f"{w:g}:{r:.4f}" for w, r in c.points))
    print(f"selected\t{curves[chosen].label}")
    return {"selected_skip_minutes": curves[chosen].model_skip_minutes,
            "auc": {c.label: round(c.auc(), 6) for c in curves}}


def cmd_lookup(s: Settings, args) -> dict:
    if not args.user:
        raise ConfigError("--user", "lookup needs a user id")
    res = pipeline.lookup(s.pipeline.path("results_path"), args.user)
    return {"user": args.user, "status": res.status, "source": res.source,
            "items": [[i, score] for i, score in res.items]}


def cmd_run_all(s: Settings, args) -> dict:
    return pipeline.run_all(s.pipeline)


COMMANDS = {
    "synth": cmd_synth,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "embed-items": cmd_embed_items,
    "embed-users": _stage(pipeline.stage_embed_users),
    "build-index": _stage(pipeline.stage_build_index),
    "retrieve": _stage(pipeline.stage_batch_retrieve),
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "lookup": cmd_lookup,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recsys", description="Two-tower embedding recommender, desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value settings file")
        sp.add_argument("--seed", type=int, help="overrides every rng seed")
        sp.add_argument("--workdir", help="overrides pipeline.workdir")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra setting, may repeat")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "lookup":
            sp.add_argument("--user", help="user id to look up")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = []
        for item in args.set:
            if "=" not in item:
                raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
            overrides.append(tuple(x.strip() for x in item.split("=", 1)))
        if args.workdir:
            overrides.append(("pipeline.workdir", args.workdir))
        settings = load_settings(args.config, args.seed, overrides)
        Path(settings.pipeline.workdir).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](settings, args)
    except RecsysError as exc:
        print(f"recsys {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
