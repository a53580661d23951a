"""Training on demonstration-augmented inputs, evaluation, adaptation and search."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import BIOES, Dataset, convert_scheme, tags_to_spans
from .demonstration import TEMPLATE_TOKENS, DemoBuilder, Selection, derive_seed, render_selection
from .encoder import Vocab, transfer_embedder
from .model import NerModel

log = logging.getLogger(__name__)

TRAIN, DEV, TEST = 0, 1, 2
BASE_LEARNING_RATE = 2e-5


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    base_learning_rate: float = BASE_LEARNING_RATE
    lr_multiplier: float = 50.0  # from-scratch toy model needs a larger step than BERT fine-tuning
    max_epochs: int = 50
    early_stop_patience: int = 20
    seed: int = 0
    use_dem_train: bool = True
    use_dem_infer: bool = True
    max_grad_norm: float | None = 5.0
    word_dropout: float = 0.0  # fraction of input tokens replaced by UNK while training
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError("early_stop_patience must lie in [0, max_epochs]")

    @property
    def learning_rate(self) -> float:
        return self.base_learning_rate * self.lr_multiplier

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunResult:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    dataset: str = ""
    strategy: str = "none"
    template: str = "none"
    n_train: int = 0
    subsample: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    error: str | None = None
    wall_clock: float = 0.0

    def to_json(self, include_wall_clock: bool = True) -> str:
        data = dataclasses.asdict(self)
        if not include_wall_clock:
            data.pop("wall_clock")
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunResult":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def span_prf(gold: Sequence[Iterable], pred: Sequence[Iterable]) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over exact ``(label, start, end)`` matches, per sentence."""
    tp = n_pred = n_gold = 0
    for g, p in zip(gold, pred, strict=True):
        g, p = set(g), set(p)
        tp += len(g & p)
        n_pred += len(p)
        n_gold += len(g)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    return precision, recall, f1_score(precision, recall)


def build_vocab(*datasets: Dataset, labels: Sequence[str] = ()) -> Vocab:
    extra = list(TEMPLATE_TOKENS)
    for d in datasets:
        extra.extend(d.label_set)
    extra.extend(labels)
    return Vocab.build((s for d in datasets for s in d), extra)


def token_embedder(model: NerModel) -> Callable[[Sequence[str]], np.ndarray]:
    """Static token-embedding lookup used as the retrieval similarity space."""
    table = model.encoder["tok_emb"].copy()
    vocab = model.vocab
    return lambda tokens: table[vocab.encode(tokens)]


@dataclass
class Encoded:
    ids: np.ndarray
    boundary: int
    tags: np.ndarray
    gold: set


def encode_split(model: NerModel, data: Dataset, builder: DemoBuilder | None, split: int, use_dem: bool) -> list[Encoded]:
    data = convert_scheme(data, BIOES)
    items = []
    for i, s in enumerate(data):
        demo = builder(s, split, i).tokens if (use_dem and builder is not None) else ()
        ids, boundary = model.encode_input(s.tokens, demo)
        gold = {sp.key() for sp in tags_to_spans(s.tags, BIOES)}
        items.append(Encoded(ids, boundary, model.tagset.encode(s.tags), gold))
    return items


def score_items(model: NerModel, items: Sequence[Encoded]) -> tuple[float, float, float]:
    pred = []
    for it in items:
        tags = model.tagset.decode(model.predict_ids(it.ids, it.boundary))
        pred.append({sp.key() for sp in tags_to_spans(tags, BIOES)})
    return span_prf([it.gold for it in items], pred)


def evaluate(
    model: NerModel, data: Dataset, dem_builder: DemoBuilder | None, use_dem: bool, split: int = TEST
) -> RunResult:
    """Viterbi-decode ``data`` and score span-level micro P/R/F1."""
    p, r, f = score_items(model, encode_split(model, data, dem_builder, split, use_dem))
    return RunResult(precision=p, recall=r, f1=f)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, model: NerModel, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        lr = c.learning_rate * np.sqrt(1 - c.beta2**self.t) / (1 - c.beta1**self.t)
        for name, param in model.parameters().items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            param -= lr * m / (np.sqrt(v) + c.eps)


@dataclass
class TrainOutcome:
    model: NerModel
    best_dev_f1: float
    best_epoch: int
    epochs_run: int
    history: list[float]


def train(
    model: NerModel,
    train_set: Dataset,
    dev_set: Dataset,
    dem_builder: DemoBuilder | None,
    cfg: TrainConfig,
) -> TrainOutcome:
    """Mini-batch Adam on the CRF negative log-likelihood with dev-F1 early stopping.

    ``model`` is updated in place; the returned outcome carries a copy of
    the best-dev snapshot.
    """
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ValueError("train and dev sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    train_items = encode_split(model, train_set, dem_builder, TRAIN, cfg.use_dem_train)
    dev_items = encode_split(model, dev_set, dem_builder, DEV, cfg.use_dem_infer)
    opt = Adam(model.parameters(), cfg)
    best, best_epoch, snapshot, stale = -1.0, 0, model.copy(), 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_items))
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_items[i] for i in order[start : start + cfg.batch_size]]
            total, acc = 0.0, None
            for it in batch:
                ids = it.ids
                if cfg.word_dropout > 0:
                    ids = ids.copy()
                    drop = rng.random(it.boundary) < cfg.word_dropout
                    ids[: it.boundary][drop] = model.vocab.unk_id
                nll, grads = model.loss_and_grads(ids, it.boundary, it.tags, train=True, rng=rng)
                total += nll
                if acc is None:
                    acc = grads
                else:
                    for k, g in grads.items():
                        acc[k] += g
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss {total} at epoch {epoch}, batch {b} (learning rate {cfg.learning_rate})"
                )
            scale = 1.0 / len(batch)
            for g in acc.values():
                g *= scale
            if cfg.max_grad_norm is not None:
                norm = np.sqrt(sum(float((g * g).sum()) for g in acc.values()))
                if norm > cfg.max_grad_norm:
                    for g in acc.values():
                        g *= cfg.max_grad_norm / norm
            opt.step(model, acc)
        f1 = score_items(model, dev_items)[2]
        history.append(f1)
        if f1 > best:
            best, best_epoch, snapshot, stale = f1, epoch, model.copy(), 0
        else:
            stale += 1
        log.debug("epoch %d dev_f1=%.4f best=%.4f", epoch, f1, best)
        if stale >= cfg.early_stop_patience:
            break
    return TrainOutcome(snapshot, best, best_epoch, epoch, history)


ModelFactory = Callable[[int], NerModel]


@dataclass(frozen=True)
class ModelSpec:
    """Picklable model factory: same vocabulary and architecture, seed varies."""

    vocab_tokens: tuple[str, ...]
    labels: tuple[str, ...]
    encoder: dict = field(default_factory=dict)
    constrained: bool = False

    def __call__(self, seed: int) -> NerModel:
        return NerModel.create(Vocab(list(self.vocab_tokens)), self.labels, seed, self.constrained, **self.encoder)

    @classmethod
    def for_data(cls, *datasets: Dataset, labels: Sequence[str] | None = None, **kw) -> "ModelSpec":
        vocab = build_vocab(*datasets, labels=labels or ())
        labels = tuple(labels or datasets[0].label_set)
        return cls(tuple(vocab.tokens), labels, **kw)


def run_cell(
    factory: ModelFactory,
    train_set: Dataset,
    dev_set: Dataset,
    test_set: Dataset,
    builder: DemoBuilder | None,
    cfg: TrainConfig,
    **meta,
) -> RunResult:
    t0 = time.perf_counter()
    model = factory(cfg.seed)
    out = train(model, train_set, dev_set, builder, cfg)
    res = evaluate(out.model, test_set, builder, cfg.use_dem_infer, TEST)
    extra = dict(meta.pop("extra", {}))
    extra.update(
        best_dev_f1=out.best_dev_f1,
        best_epoch=out.best_epoch,
        epochs_run=out.epochs_run,
        use_dem_train=cfg.use_dem_train,
        use_dem_infer=cfg.use_dem_infer,
    )
    return dataclasses.replace(
        res, config=cfg.to_dict(), extra=extra, wall_clock=time.perf_counter() - t0, **meta
    )


def run_ablation_matrix(
    factory: ModelFactory,
    train_set: Dataset,
    dev_set: Dataset,
    test_set: Dataset,
    builder: DemoBuilder,
    cfg: TrainConfig,
    **meta,
) -> list[RunResult]:
    """Train/evaluate the four (demo at train, demo at inference) combinations."""
    rows = []
    for use_train in (False, True):
        for use_infer in (False, True):
            c = dataclasses.replace(cfg, use_dem_train=use_train, use_dem_infer=use_infer)
            rows.append(run_cell(factory, train_set, dev_set, test_set, builder, c, **meta))
    return rows


def adapt(
    source: NerModel,
    target_train: Dataset,
    target_dev: Dataset,
    dem_builder: DemoBuilder | None,
    cfg: TrainConfig,
    target_labels: Sequence[str] | None = None,
) -> TrainOutcome:
    """Fresh target model with the source embedder copied in, then fine-tuned on target data."""
    labels = tuple(target_labels or target_train.label_set)
    target = NerModel.create(
        source.vocab, labels, cfg.seed, source.constrained, **{k: v for k, v in source.config.to_dict().items() if k != "vocab_size"}
    )
    transfer_embedder(source.encoder, target)
    return train(target, target_train, target_dev, dem_builder, cfg)


@dataclass
class GridResult:
    best: Selection
    best_f1: float
    table: list[dict]


def _grid_job(args):
    idx, sel, template, factory, train_set, dev_set, cfg = args
    c = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, idx))
    builder = DemoBuilder("search", template, train_set, sel.label_order, selection=sel)
    out = train(factory(c.seed), train_set, dev_set, builder, c)
    return idx, out.best_dev_f1


def grid_search(
    candidates: Iterable[Selection],
    template: str,
    factory: ModelFactory,
    train_set: Dataset,
    dev_set: Dataset,
    cfg: TrainConfig,
    jobs: int = 1,
) -> GridResult:
    """Train one model per candidate selection and keep the best by dev F1.

    Each candidate's seed is derived from its stream position, so the table
    does not depend on ``jobs``. Ties go to the earliest candidate.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("grid_search needs at least one candidate")
    work = [(i, sel, template, factory, train_set, dev_set, cfg) for i, sel in enumerate(cands)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = dict(pool.map(_grid_job, work))
    else:
        scores = dict(map(_grid_job, work))
    table = [
        {
            "index": i,
            "entities": [[e.label, e.surface] for e in sel.entries],
            "dev_f1": scores[i],
            "demonstration": " ".join(render_selection(template, sel, "search").tokens),
        }
        for i, sel in enumerate(cands)
    ]
    best_i = 0
    for row in table:
        if row["dev_f1"] > table[best_i]["dev_f1"]:
            best_i = row["index"]
    return GridResult(cands[best_i], table[best_i]["dev_f1"], table)


def carve_dev(train_set: Dataset, min_size: int = 10, fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Deterministic dev split from the train sample: every fifth sentence is held out.

    Below ``min_size`` sentences the train split doubles as dev.
    """
    n = len(train_set)
    if n < min_size:
        return train_set, train_set
    step = max(2, round(1 / fraction))
    dev_idx = list(range(step - 1, n, step))
    keep = [i for i in range(n) if i not in set(dev_idx)]
    return train_set.subset(keep), train_set.subset(dev_idx)
