"""Experiment configuration and the matrix runner behind the CLI subcommands.

A config is a YAML mapping. Recognised keys (all optional except data)::

    dataset: synth                 # id written into every result row
    data:
      train: path/train.txt        # CoNLL files ...
      dev: path/dev.txt
      test: path/test.txt
      token_col: 0
      tag_col: -1
      synth: {seed: 0, ambiguity: 0.2, ...}   # ... or a generated corpus
    source:                        # adapt only; same shape as ``data``
      synth: {seed: 1}
    n_train: [25]
    subsamples: [0, 1, 2, 3, 4]
    seeds: [0, 1, 2]
    dev: carve                     # carve: hold out every 5th sampled train sentence
                                   # file: draw dev_size sentences from data.dev
    dev_size: null                 # file mode only; null = n_train
    variants: [none/none, popular/context]
    label_order: null
    search_k: 3
    train: {max_epochs: 50, early_stop_patience: 20, ...}   # TrainConfig fields
    model: {d_model: 64, n_heads: 4, n_layers: 2, max_len: 256, dropout: 0.1, constrained: false}
    perturbation: {entities: true, labels: true, contexts: true, mode: test_only, seed: 0}
    output_dir: runs/default
    jobs: 1
"""

from __future__ import annotations

import copy
import dataclasses
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import yaml

from .corpus import BIOES, Dataset, build_entity_index, convert_scheme, read_conll, subsample
from .demonstration import DemoBuilder, PerturbationSpec, derive_seed, enumerate_candidates
from .synth import SynthSpec, generate
from .training import (
    TEST,
    ModelSpec,
    RunResult,
    TrainConfig,
    adapt,
    carve_dev,
    evaluate,
    grid_search,
    run_cell,
    token_embedder,
    train,
)

OUTPUT_ENV = "DEMONER_OUTPUT_DIR"
BASELINE = ("none", "none")


@dataclass
class ExperimentConfig:
    data: dict
    dataset: str = "data"
    source: dict | None = None
    n_train: list[int] = field(default_factory=lambda: [25])
    subsamples: list[int] = field(default_factory=lambda: [0])
    seeds: list[int] = field(default_factory=lambda: [0])
    dev: str = "carve"
    dev_size: int | None = None
    variants: list[str] = field(default_factory=lambda: ["none/none"])
    label_order: list[str] | None = None
    search_k: int = 3
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    perturbation: dict | None = None
    output_dir: str = "runs/default"
    jobs: int = 1

    def __post_init__(self):
        for name in ("n_train", "subsamples", "seeds", "variants"):
            value = getattr(self, name)
            if not isinstance(value, list) or not value:
                raise ValueError(f"config key {name!r} must be a non-empty list")
        for v in self.variants:
            self.variant(v)
        if self.dev not in ("carve", "file"):
            raise ValueError(f"dev must be 'carve' or 'file', got {self.dev!r}")
        TrainConfig(**self.train)
        for split in ("train", "dev", "test"):
            path = self.data.get(split)
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f"data.{split}: {path} does not exist")
        if "synth" not in self.data and ("train" not in self.data or "test" not in self.data):
            raise ValueError("data needs train and test paths or a synth spec")

    @staticmethod
    def variant(text: str) -> tuple[str, str]:
        strategy, sep, template = str(text).partition("/")
        if not sep:
            raise ValueError(f"variant {text!r} must look like strategy/template")
        return strategy, template

    def train_config(self, seed: int, **kw) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed, **kw})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def out(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _coerce(value: str) -> Any:
    return yaml.safe_load(value)


def apply_override(raw: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ValueError(f"override {assignment!r} must be key=value")
    node = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = _coerce(value)


def load_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    raw = copy.deepcopy(raw)
    for item in overrides:
        apply_override(raw, item)
    return ExperimentConfig(**raw)


def load_splits(spec: dict) -> dict[str, Dataset | None]:
    if "synth" in spec:
        synth = dict(spec["synth"] or {})
        if "labels" in synth:
            synth["labels"] = tuple(synth["labels"])
        splits = generate(SynthSpec(**synth))
    else:
        cols = dict(token_col=spec.get("token_col", 0), tag_col=spec.get("tag_col", -1))
        splits = {name: read_conll(spec[name], **cols) if spec.get(name) else None for name in ("train", "dev", "test")}
    return {k: convert_scheme(v, BIOES) if v is not None else None for k, v in splits.items()}


@dataclass(frozen=True)
class Cell:
    n_train: int
    subsample: int
    seed: int
    strategy: str
    template: str


def cells(cfg: ExperimentConfig) -> list[Cell]:
    return [
        Cell(n, sub, seed, *cfg.variant(v))
        for n in cfg.n_train
        for sub in cfg.subsamples
        for seed in cfg.seeds
        for v in cfg.variants
    ]


def cell_data(cfg: ExperimentConfig, splits: dict, n: int, sub: int) -> tuple[Dataset, Dataset]:
    """Train sample and dev set of one cell."""
    sample = subsample(splits["train"], min(n, len(splits["train"])), sub)
    dev_full = splits.get("dev")
    if cfg.dev == "carve" or dev_full is None or len(dev_full) == 0:
        return carve_dev(sample)
    size = min(cfg.dev_size or n, len(dev_full))
    rng = np.random.default_rng([sub, 7919])
    return sample, dev_full.subset(np.sort(rng.choice(len(dev_full), size=size, replace=False)).tolist())


def model_spec(cfg: ExperimentConfig, *datasets: Dataset, labels=None) -> ModelSpec:
    model = dict(cfg.model)
    constrained = bool(model.pop("constrained", False))
    return ModelSpec.for_data(*datasets, labels=labels, encoder=model, constrained=constrained)


def make_builder(
    cfg: ExperimentConfig,
    strategy: str,
    template: str,
    train_set: Dataset,
    dev_set: Dataset,
    factory: ModelSpec,
    seed: int,
    perturbation: PerturbationSpec | None = None,
    perturb_splits=(),
) -> tuple[DemoBuilder | None, dict]:
    """Demonstration builder for one cell plus provenance for the result row."""
    if (strategy, template) == BASELINE:
        return None, {}
    info: dict = {}
    kw: dict = dict(seed=seed, label_order=cfg.label_order, perturbation=perturbation, perturb_splits=perturb_splits)
    if strategy in ("retrieve_sentence", "retrieve_token"):
        kw["embed"] = token_embedder(factory(seed))
    if strategy == "search":
        index = build_entity_index(train_set)
        order = cfg.label_order or train_set.label_set
        found = grid_search(
            enumerate_candidates(index, cfg.search_k, order),
            template,
            factory,
            train_set,
            dev_set,
            cfg.train_config(seed),
            jobs=1,
        )
        kw["selection"] = found.best
        info["search"] = {"best_dev_f1": found.best_f1, "candidates": len(found.table)}
    builder = DemoBuilder(strategy, template, train_set, **kw)
    if builder.fixed and perturbation is None:
        info["demonstration"] = " ".join(builder(train_set[0], 0, 0).tokens)
    return builder, info


def _failure(cfg: ExperimentConfig, cell: Cell, exc: BaseException, **extra) -> RunResult:
    return RunResult(
        dataset=cfg.dataset,
        strategy=cell.strategy,
        template=cell.template,
        n_train=cell.n_train,
        subsample=cell.subsample,
        seed=cell.seed,
        config=cfg.to_dict(),
        extra=extra,
        error="".join(traceback.format_exception_only(type(exc), exc)).strip(),
    )


def _meta(cfg: ExperimentConfig, cell: Cell) -> dict:
    return dict(
        dataset=cfg.dataset,
        strategy=cell.strategy,
        template=cell.template,
        n_train=cell.n_train,
        subsample=cell.subsample,
        seed=cell.seed,
    )


def _with_snapshot(cfg: ExperimentConfig, r: RunResult) -> RunResult:
    # Every row carries the whole experiment config next to its TrainConfig.
    return dataclasses.replace(r, config={**r.config, "experiment": cfg.to_dict()})


def run_one(cfg: ExperimentConfig, splits: dict, cell: Cell) -> list[RunResult]:
    try:
        train_set, dev_set = cell_data(cfg, splits, cell.n_train, cell.subsample)
        factory = model_spec(cfg, train_set)
        builder, info = make_builder(cfg, cell.strategy, cell.template, train_set, dev_set, factory, cell.seed)
        use = builder is not None
        tc = cfg.train_config(cell.seed, use_dem_train=use, use_dem_infer=use)
        row = run_cell(factory, train_set, dev_set, splits["test"], builder, tc, extra=info, **_meta(cfg, cell))
        return [_with_snapshot(cfg, row)]
    except Exception as exc:  # noqa: BLE001 - a failed cell becomes a failure row
        return [_failure(cfg, cell, exc)]


def run_ablate(cfg: ExperimentConfig, splits: dict, cell: Cell) -> list[RunResult]:
    try:
        train_set, dev_set = cell_data(cfg, splits, cell.n_train, cell.subsample)
        factory = model_spec(cfg, train_set)
        builder, info = make_builder(cfg, cell.strategy, cell.template, train_set, dev_set, factory, cell.seed)
        if builder is None:
            raise ValueError("ablation needs a demonstration variant")
        rows = []
        for use_train in (False, True):
            for use_infer in (False, True):
                tc = cfg.train_config(cell.seed, use_dem_train=use_train, use_dem_infer=use_infer)
                tag = ("O" if use_train else "X") + ("O" if use_infer else "X")
                extra = {**info, "ablation": tag}
                row = run_cell(factory, train_set, dev_set, splits["test"], builder, tc, extra=extra, **_meta(cfg, cell))
                rows.append(_with_snapshot(cfg, row))
        return rows
    except Exception as exc:  # noqa: BLE001
        return [_failure(cfg, cell, exc)]


def run_perturb(cfg: ExperimentConfig, splits: dict, cell: Cell) -> list[RunResult]:
    """Original and perturbed evaluations of one cell.

    ``test_only`` trains once with correct demonstrations and evaluates the
    same model with correct and perturbed test demonstrations.
    ``train_and_test`` additionally trains a second model on perturbed
    demonstrations and evaluates it on perturbed test demonstrations.
    """
    try:
        pcfg = dict(cfg.perturbation or {"entities": True, "labels": True, "contexts": True})
        spec = PerturbationSpec(**{**pcfg, "seed": derive_seed(pcfg.get("seed", 0), cell.subsample, cell.seed)})
        train_set, dev_set = cell_data(cfg, splits, cell.n_train, cell.subsample)
        factory = model_spec(cfg, train_set)
        tc = cfg.train_config(cell.seed)
        meta = _meta(cfg, cell)
        provenance = {"flags": spec.flags(), "mode": spec.mode}
        t0 = time.perf_counter()
        clean, info = make_builder(cfg, cell.strategy, cell.template, train_set, dev_set, factory, cell.seed)
        if clean is None:
            raise ValueError("perturbation needs a demonstration variant")
        rows = []
        model = factory(cell.seed)
        outcome = train(model, train_set, dev_set, clean, tc)
        original = evaluate(outcome.model, splits["test"], clean, True, TEST)
        rows.append(dataclasses.replace(
            original, config=tc.to_dict(), extra={**info, "demo": "original", "perturbation": provenance},
            wall_clock=time.perf_counter() - t0, **meta,
        ))
        splits_to_perturb = (TEST,) if spec.mode == "test_only" else (0, 1, TEST)
        noisy, _ = make_builder(
            cfg, cell.strategy, cell.template, train_set, dev_set, factory, cell.seed,
            perturbation=spec, perturb_splits=splits_to_perturb,
        )
        if spec.mode == "train_and_test":
            t0 = time.perf_counter()
            outcome = train(factory(cell.seed), train_set, dev_set, noisy, tc)
        perturbed = evaluate(outcome.model, splits["test"], noisy, True, TEST)
        rows.append(dataclasses.replace(
            perturbed, config=tc.to_dict(), extra={**info, "demo": "perturbed", "perturbation": provenance},
            wall_clock=time.perf_counter() - t0, **meta,
        ))
        return [_with_snapshot(cfg, r) for r in rows]
    except Exception as exc:  # noqa: BLE001
        return [_failure(cfg, cell, exc)]


def run_adapt(cfg: ExperimentConfig, splits: dict, cell: Cell, source_model) -> list[RunResult]:
    try:
        train_set, dev_set = cell_data(cfg, splits, cell.n_train, cell.subsample)
        enc = {k: v for k, v in source_model.config.to_dict().items() if k != "vocab_size"}
        factory = ModelSpec(tuple(source_model.vocab.tokens), tuple(train_set.label_set), enc, source_model.constrained)
        builder, info = make_builder(cfg, cell.strategy, cell.template, train_set, dev_set, factory, cell.seed)
        use = builder is not None
        tc = cfg.train_config(cell.seed, use_dem_train=use, use_dem_infer=use)
        t0 = time.perf_counter()
        outcome = adapt(source_model, train_set, dev_set, builder, tc)
        res = evaluate(outcome.model, splits["test"], builder, use)
        extra = {**info, "adapted": True, "best_dev_f1": outcome.best_dev_f1, "epochs_run": outcome.epochs_run}
        row = dataclasses.replace(res, config=tc.to_dict(), extra=extra, wall_clock=time.perf_counter() - t0, **_meta(cfg, cell))
        return [_with_snapshot(cfg, row)]
    except Exception as exc:  # noqa: BLE001
        return [_failure(cfg, cell, exc)]


def train_source(cfg: ExperimentConfig, source: dict, target: dict, seed: int = 0):
    """Plain fine-tuning on the full source training set, vocabulary shared with the target."""
    labels = source["train"].label_set
    model = model_spec(cfg, source["train"], target["train"], labels=labels)(seed)
    dev = source.get("dev") or carve_dev(source["train"])[1]
    tc = cfg.train_config(seed, use_dem_train=False, use_dem_infer=False)
    return train(model, source["train"], dev, None, tc).model


def _job(args):
    fn, cfg, splits, cell, extra = args
    return fn(cfg, splits, cell, *extra)


def run_matrix(cfg: ExperimentConfig, fn, splits: dict, sink, extra: tuple = ()) -> list[RunResult]:
    """Run ``fn`` over every cell, appending rows to ``sink`` as cells finish."""
    work = [(fn, cfg, splits, c, extra) for c in cells(cfg)]
    rows: list[RunResult] = []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for out in pool.map(_job, work):
                for r in out:
                    sink(r)
                rows.extend(out)
    else:
        for item in work:
            out = _job(item)
            for r in out:
                sink(r)
            rows.extend(out)
    return rows


def jsonl_sink(path: Path):
    """Row writer for ``path``; the file is truncated when the sink is created."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("", encoding="utf-8")

    def write(row: RunResult) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(row.to_json() + "\n")

    return write
