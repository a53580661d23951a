"""Command-line entry point: ``demoner <subcommand> [options]``.

Subcommands: synth, run, search, adapt, perturb, ablate, report, stats.
The exit status is 0 only when no failure rows were written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import evaluation
from .corpus import build_entity_index, entity_statistics, subsample
from .demonstration import enumerate_candidates
from .experiment import (
    BASELINE,
    ExperimentConfig,
    cell_data,
    jsonl_sink,
    load_config,
    load_splits,
    model_spec,
    run_ablate,
    run_adapt,
    run_matrix,
    run_one,
    run_perturb,
    train_source,
)
from .model import load_model, save_model
from .synth import SynthSpec, generate, write_splits
from .training import grid_search

log = logging.getLogger("demoner")


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.jobs:
        overrides.append(f"jobs={args.jobs}")
    return load_config(args.config, overrides)


def _finish(cfg: ExperimentConfig, rows, name: str) -> int:
    failures = [r for r in rows if r.error is not None]
    for r in failures:
        log.error("cell n=%s sub=%s seed=%s %s/%s failed: %s", r.n_train, r.subsample, r.seed, r.strategy, r.template, r.error)
    out = cfg.out
    table = evaluation.aggregate(rows)
    if table:
        (out / f"{name}_summary.json").write_text(evaluation.summary_json(table), encoding="utf-8")
        rows_keys = {k.row for k in table}
        if BASELINE in rows_keys:
            text = evaluation.report(table, BASELINE).text
            (out / f"{name}_report.txt").write_text(text, encoding="utf-8")
            print(text, end="")
    print(f"{len(rows)} rows, {len(failures)} failures -> {out / 'results.jsonl'}")
    return 1 if failures else 0


def cmd_synth(args) -> int:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        raw = raw.get("data", raw).get("synth", raw)
    for name in ("seed", "ambiguity", "gazetteer_size", "train_size", "dev_size", "test_size", "template_pool"):
        value = getattr(args, name)
        if value is not None:
            raw[name] = value
    if args.labels:
        raw["labels"] = tuple(args.labels.split(","))
    elif "labels" in raw:
        raw["labels"] = tuple(raw["labels"])
    spec = SynthSpec(**raw)
    paths = write_splits(generate(spec), args.out)
    Path(args.out, "synth_spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2), encoding="utf-8")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    splits = load_splits(cfg.data)
    rows = run_matrix(cfg, run_one, splits, jsonl_sink(cfg.out / "results.jsonl"))
    return _finish(cfg, rows, "run")


def cmd_ablate(args) -> int:
    cfg = _config(args)
    splits = load_splits(cfg.data)
    rows = run_matrix(cfg, run_ablate, splits, jsonl_sink(cfg.out / "results.jsonl"))
    failures = [r for r in rows if r.error]
    ok = [r for r in rows if not r.error]
    groups: dict[str, list[float]] = {}
    for r in ok:
        groups.setdefault(r.extra["ablation"], []).append(r.f1)
    print("train infer  mean_f1  runs")
    for tag in ("XX", "XO", "OX", "OO"):
        vals = groups.get(tag, [])
        if vals:
            print(f"{tag[0]:>5} {tag[1]:>5}  {100 * sum(vals) / len(vals):7.2f}  {len(vals)}")
    print(f"{len(rows)} rows, {len(failures)} failures -> {cfg.out / 'results.jsonl'}")
    return 1 if failures else 0


def cmd_perturb(args) -> int:
    cfg = _config(args)
    if args.mode:
        cfg.perturbation = {**(cfg.perturbation or {"entities": True, "labels": True, "contexts": True}), "mode": args.mode}
    splits = load_splits(cfg.data)
    rows = run_matrix(cfg, run_perturb, splits, jsonl_sink(cfg.out / "results.jsonl"))
    failures = [r for r in rows if r.error]
    ok = [r for r in rows if not r.error]
    orig = evaluation.aggregate([r for r in ok if r.extra.get("demo") == "original"])
    pert = evaluation.aggregate([r for r in ok if r.extra.get("demo") == "perturbed"])
    if orig and pert:
        print(evaluation.format_deltas(evaluation.perturbation_report(orig, pert)), end="")
    print(f"{len(rows)} rows, {len(failures)} failures -> {cfg.out / 'results.jsonl'}")
    return 1 if failures else 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    if not cfg.source and not args.source_weights:
        raise SystemExit("adapt needs a 'source' data section in the config")
    target = load_splits(cfg.data)
    if args.source_weights:
        model = load_model(args.source_weights)
    else:
        model = train_source(cfg, load_splits(cfg.source), target, seed=min(cfg.seeds))
        cfg.out.mkdir(parents=True, exist_ok=True)
        save_model(model, cfg.out / "source_model.bin")
    rows = run_matrix(cfg, run_adapt, target, jsonl_sink(cfg.out / "results.jsonl"), extra=(model,))
    return _finish(cfg, rows, "adapt")


def cmd_search(args) -> int:
    cfg = _config(args)
    splits = load_splits(cfg.data)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for n in cfg.n_train:
        for sub in cfg.subsamples:
            train_set, dev_set = cell_data(cfg, splits, n, sub)
            order = cfg.label_order or train_set.label_set
            for variant in cfg.variants:
                strategy, template = cfg.variant(variant)
                if strategy != "search":
                    continue
                seed = min(cfg.seeds)
                factory = model_spec(cfg, train_set)
                cands = enumerate_candidates(build_entity_index(train_set), cfg.search_k, order)
                try:
                    found = grid_search(cands, template, factory, train_set, dev_set, cfg.train_config(seed), jobs=cfg.jobs)
                except Exception as exc:  # noqa: BLE001
                    log.error("search n=%s sub=%s failed: %s", n, sub, exc)
                    failures += 1
                    continue
                path = out / f"search_n{n}_sub{sub}_{template}.jsonl"
                with open(path, "w", encoding="utf-8") as fh:
                    for row in found.table:
                        fh.write(json.dumps({**row, "n_train": n, "subsample": sub, "seed": seed}, sort_keys=True) + "\n")
                best = [[e.label, e.surface] for e in found.best.entries]
                print(f"n={n} sub={sub} template={template}: {len(found.table)} candidates, best dev F1 {found.best_f1:.4f} {best}")
    return 1 if failures else 0


def cmd_report(args) -> int:
    rows = evaluation.read_results(args.results)
    failures = [r for r in rows if r.error]
    rows = [r for r in rows if not r.error]
    if args.split_by:
        rows = [
            r.__class__(**{**r.__dict__, "strategy": f"{r.strategy}[{r.extra.get(args.split_by)}]"})
            if args.split_by in r.extra else r
            for r in rows
        ]
    if not rows:
        print(f"no successful rows in {args.results} ({len(failures)} failures)")
        return 1 if failures else 0
    if args.perturbation:
        orig = evaluation.aggregate([r for r in rows if r.extra.get("demo") == "original"])
        pert = evaluation.aggregate([r for r in rows if r.extra.get("demo") == "perturbed"])
        text = evaluation.format_deltas(evaluation.perturbation_report(orig, pert))
    else:
        table = evaluation.aggregate(rows)
        if args.baseline:
            baseline = ExperimentConfig.variant(args.baseline)
        else:
            present = [k.row for k in table]
            baseline = BASELINE if BASELINE in present else present[0]
        text = evaluation.report(table, baseline).text
        if args.json:
            Path(args.json).write_text(evaluation.summary_json(table), encoding="utf-8")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 1 if failures else 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    splits = load_splits(cfg.data)
    print("label  " + "  ".join(f"{n:>14}" for n in cfg.n_train))
    stats = {n: entity_statistics([subsample(splits["train"], n, s) for s in cfg.subsamples]) for n in cfg.n_train}
    labels = list(dict.fromkeys(l for n in cfg.n_train for l in stats[n]))
    for lab in labels:
        cells = [f"{stats[n][lab].mean:6.1f} ±{stats[n][lab].std:5.2f}" for n in cfg.n_train]
        print(f"{lab:<6} " + "  ".join(f"{c:>14}" for c in cells))
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path, YAML value)")
    p.add_argument("--output-dir", help="results directory (DEMONER_OUTPUT_DIR wins over this)")
    p.add_argument("--jobs", type=int, help="cells to run concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demoner", description="Demonstration-based few-shot NER experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic train/dev/test corpus")
    p.add_argument("--config", "-c")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ambiguity", type=float)
    p.add_argument("--gazetteer-size", type=int)
    p.add_argument("--template-pool", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--dev-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--labels", help="comma-separated label set")
    p.set_defaults(func=cmd_synth)

    for name, func, text in (
        ("run", cmd_run, "run the subsample x seed x variant matrix"),
        ("search", cmd_search, "grid search over top-k entity combinations"),
        ("ablate", cmd_ablate, "demonstration at train/inference ablation"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("adapt", help="train on source data, transfer the embedder, fine-tune on target")
    _common(p)
    p.add_argument("--source-weights", help="weight file of an already trained source model")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("perturb", help="evaluate with perturbed demonstrations")
    _common(p)
    p.add_argument("--mode", choices=("test_only", "train_and_test"))
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("report", help="aggregate a results file into a table")
    p.add_argument("results")
    p.add_argument("--baseline", help="strategy/template row to diff against (default none/none, else the first row)")
    p.add_argument("--split-by", help="extra field appended to the strategy when grouping (e.g. ablation)")
    p.add_argument("--perturbation", action="store_true", help="original minus perturbed deltas")
    p.add_argument("--out")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("stats", help="entities per label over subsamples")
    _common(p)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
