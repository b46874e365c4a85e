"""Adam, mini-batch training with early stopping, and every training mode."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DOMAINS, Dataset, Encoded, Schema, StratifiedBatchSampler, fit_norm_stats, upsample_indices
from .embedding import INIT_SCALE, EmbeddingTable, build_domain_vocabs, observed_values, vocab_from_values
from .hen import HENModel
from .metrics import MetricReport, report, spauc
from .transfer import ALIGN_MODES, TransferModel, lambda_schedule, normalize_mode

log = logging.getLogger(__name__)

SUPERVISED = "supervised"
# independent random streams derived from the run seed
STREAM_INIT, STREAM_SAMPLER, STREAM_DROPOUT, STREAM_UPSAMPLE = 1, 2, 3, 4


@dataclass
class TrainConfig:
    lr: float = 0.005
    k: int = 16
    t_max: int = 10
    keep_prob: float = 0.8
    upsample: int = 5
    batch_size: int = 256
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    mode: str = SUPERVISED
    align: str = "ced"
    maxfpr: float = 0.01
    extractor: str = "hen"
    hidden: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode != SUPERVISED:
            self.mode = normalize_mode(self.mode)
        if self.align not in ALIGN_MODES:
            raise ValueError(f"unknown alignment {self.align!r}; choose from {list(ALIGN_MODES)}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        for name in ("lr", "k", "t_max", "upsample", "batch_size", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if not 0.0 < self.maxfpr <= 1.0:
            raise ValueError("maxfpr must lie in (0, 1]")

    def rng(self, stream):
        return np.random.default_rng([self.seed, stream])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def adam_step(params: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every parameter from its gradient buffer."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    for name, p in params.items():
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    model: object
    params: ParamStore
    config: TrainConfig
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float | None = None
    step_losses: list = field(default_factory=list)

    def meta(self):
        return {"config": self.config.to_dict(), "model": self.model.to_dict(), "epoch": self.best_epoch,
                "best_val_spauc": self.best_val, "history": self.history}

    def save(self, path):
        save_checkpoint(path, self.params, self.meta())

    def write_history(self, path):
        write_history(self.history, path)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_spauc"], extrasaction="ignore")
        w.writeheader()
        w.writerows(history)


def model_from_dict(d):
    if d["model"] == "transfer":
        return TransferModel.from_dict(d)
    if d["model"] == "single":
        return HENModel.from_dict(d)
    raise ValueError(f"unknown model type {d['model']!r}")


def load_run(path) -> TrainResult:
    params, meta = load_checkpoint(path)
    model = model_from_dict(meta["model"])
    return TrainResult(model, params, TrainConfig.from_dict(meta["config"]), meta.get("history", []),
                       meta.get("epoch", 0), meta.get("best_val_spauc"))


# -- scoring ------------------------------------------------------------------------


def score_samples(model, params: ParamStore, samples) -> np.ndarray:
    """ŷ for each sample with dropout off, preserving input order."""
    samples = list(samples)
    if isinstance(model, HENModel):
        return model.scores(params, model.encode(samples))
    out = np.zeros(len(samples))
    doms = np.array([s.domain for s in samples])
    for d in DOMAINS:
        idx = np.flatnonzero(doms == d)
        if len(idx):
            out[idx] = model.scores(params, [samples[i] for i in idx], d)
    return out


def evaluate(model, params: ParamStore, dataset: Dataset, maxfpr=0.01) -> MetricReport:
    if len(dataset) == 0:
        raise ValueError("evaluate on an empty dataset")
    return report(score_samples(model, params, dataset.samples), dataset.labels, maxfpr)


# -- model construction -------------------------------------------------------------


def _field_values(schema: Schema, samples):
    seen = observed_values(schema, samples)
    return {f.name: list(f.vocab) if f.vocab else seen[f.name] for f in schema.categorical}


def _norms(schema, by_domain):
    return {d: fit_norm_stats(schema, s) for d, s in by_domain.items() if s}


def single_model(config: TrainConfig, schema: Schema, train_samples) -> HENModel:
    """Supervised model whose vocabulary and numerical statistics come from ``train_samples``."""
    vocabs = vocab_from_values(schema, _field_values(schema, train_samples))
    table = EmbeddingTable("emb", schema, vocabs, config.k)
    domains = {s.domain for s in train_samples}
    norms = _norms(schema, {d: [s for s in train_samples if s.domain == d] for d in sorted(domains)})
    return HENModel(schema, table, config.extractor, config.t_max, config.hidden, norms)


def shared_layout_model(config: TrainConfig, schema: Schema, src_samples, tgt_samples) -> HENModel:
    """Single-path model over the shared (union) vocabulary of both domains."""
    vm = build_domain_vocabs(schema, _field_values(schema, src_samples), _field_values(schema, tgt_samples))
    table = EmbeddingTable("emb", schema, vm.shared, config.k)
    norms = _norms(schema, {"source": src_samples, "target": tgt_samples})
    return HENModel(schema, table, config.extractor, config.t_max, config.hidden, norms)


def transfer_model(config: TrainConfig, schema: Schema, src_samples, tgt_samples) -> TransferModel:
    vm = build_domain_vocabs(schema, _field_values(schema, src_samples), _field_values(schema, tgt_samples))
    norms = _norms(schema, {"source": src_samples, "target": tgt_samples})
    return TransferModel(schema, vm, config.extractor, config.k, config.t_max, config.hidden, norms)


# -- optimisation loop --------------------------------------------------------------


def _optimize(params: ParamStore, config: TrainConfig, epoch_batches, validate, steps=None):
    """Run epochs of ``epoch_batches()`` (callables ``build(tape) -> loss``),
    keep the parameters with the best ``validate()`` and stop after
    ``patience`` epochs without improvement.  Restores the best parameters.

    Each batch loss is appended to ``steps`` when given.
    """
    history = []
    drop_rng = config.rng(STREAM_DROPOUT)
    best_vals, best, best_epoch, bad = params.values(), None, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for build in epoch_batches():
            params.zero_grad()
            tape = Tape(params, train=True, rng=drop_rng)
            loss = build(tape)
            tape.backward(loss)
            adam_step(params, config.lr, config.beta1, config.beta2, config.eps)
            losses.append(float(loss.value))
            if steps is not None:
                steps.append(losses[-1])
        val = float(validate())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"), "val_spauc": val}
        history.append(row)
        log.info("epoch %d loss %.5f val_spauc %.5f", epoch, row["train_loss"], val)
        if best is None or val > best:
            best, best_epoch, bad = val, epoch, 0
            best_vals = params.values()
        else:
            bad += 1
            if bad >= config.patience:
                break
    params.load_values(best_vals)
    return history, best_epoch, best


def _check_two_classes(dataset, what):
    y = dataset.labels
    if len(y) == 0 or y.min() == y.max():
        raise ValueError(f"{what} needs both classes for SPAUC")


def train_supervised(config: TrainConfig, train: Dataset, val: Dataset, model: HENModel | None = None,
                     params: ParamStore | None = None) -> TrainResult:
    """Train a single-path model on one labelled set with early stopping on ``val``.

    When ``model``/``params`` are given, training continues from them.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    _check_two_classes(val, "validation set")
    if model is None:
        model = single_model(config, train.schema, train.samples)
    if params is None:
        params = ParamStore()
        model.init(params, config.rng(STREAM_INIT))
    enc = model.encode(train.samples)
    enc_val = model.encode(val.samples)
    order = upsample_indices(enc.labels, config.upsample, config.rng(STREAM_UPSAMPLE))
    shuffle_rng = config.rng(STREAM_SAMPLER)

    def epoch_batches():
        perm = order[shuffle_rng.permutation(len(order))]
        for lo in range(0, len(perm), config.batch_size):
            batch = enc.take(perm[lo:lo + config.batch_size])
            yield lambda tape, b=batch: model.loss(tape, b, config.keep_prob)[0]

    def validate():
        return spauc(model.scores(params, enc_val), enc_val.labels, config.maxfpr)

    steps = []
    history, best_epoch, best = _optimize(params, config, epoch_batches, validate, steps)
    return TrainResult(model, params, config, history, best_epoch, best, steps)


def _pooled_sampler(config, src_labels, tgt_labels):
    up = config.rng(STREAM_UPSAMPLE)
    src_order = upsample_indices(src_labels, config.upsample, up)
    tgt_order = upsample_indices(tgt_labels, config.upsample, up)
    sampler = StratifiedBatchSampler(src_labels[src_order], tgt_labels[tgt_order], config.batch_size,
                                     config.rng(STREAM_SAMPLER))
    return sampler, src_order, tgt_order


def train_domain_shared(config: TrainConfig, src_train: Dataset, tgt_train: Dataset, tgt_val: Dataset) -> TrainResult:
    """One shared path over the union vocabulary, trained on pooled joint batches."""
    _check_two_classes(tgt_val, "target validation set")
    model = shared_layout_model(config, src_train.schema, src_train.samples, tgt_train.samples)
    params = ParamStore()
    model.init(params, config.rng(STREAM_INIT))
    enc_s, enc_t = model.encode(src_train.samples), model.encode(tgt_train.samples)
    enc_val = model.encode(tgt_val.samples)
    sampler, so, to = _pooled_sampler(config, enc_s.labels, enc_t.labels)

    def epoch_batches():
        for si, ti in sampler:
            batch = Encoded.join([enc_s.take(so[si]), enc_t.take(to[ti])])
            yield lambda tape, b=batch: model.loss(tape, b, config.keep_prob)[0]

    def validate():
        return spauc(model.scores(params, enc_val), enc_val.labels, config.maxfpr)

    steps = []
    history, best_epoch, best = _optimize(params, config, epoch_batches, validate, steps)
    return TrainResult(model, params, config, history, best_epoch, best, steps)


def train_pretrain(config: TrainConfig, src_train, src_val, tgt_train, tgt_val) -> TrainResult:
    """Train on source, then fine-tune every parameter on target.

    Vocabulary rows never seen in source training are re-drawn before
    fine-tuning and the Adam state is reset.
    """
    model = shared_layout_model(config, src_train.schema, src_train.samples, tgt_train.samples)
    first = train_supervised(config, src_train, src_val, model=model)
    params = first.params
    seen = model.encode(src_train.samples)
    rng = config.rng(STREAM_INIT + 100)
    table = model.table
    rows = table.rows(seen.cat[seen.mask])
    unseen = np.setdiff1d(np.arange(table.n_rows), np.unique(rows))
    phi = params.value(table.name("phi_cat"))
    phi[unseen] = rng.uniform(-INIT_SCALE, INIT_SCALE, (len(unseen), table.k))
    for part in ("att_cat", "wide_cat"):
        if table.name(part) in params:
            params.value(table.name(part))[unseen] = 0.0
    params.reset_optimizer()
    second = train_supervised(config, tgt_train, tgt_val, model=model, params=params)
    history = [dict(r, phase="source") for r in first.history] + [dict(r, phase="target") for r in second.history]
    return TrainResult(model, params, config, history, second.best_epoch, second.best_val,
                       first.step_losses + second.step_losses)


def train_structure(config: TrainConfig, src_train: Dataset, tgt_train: Dataset, tgt_val: Dataset,
                    align: str | None = None) -> TrainResult:
    """Shared and specific branches with domain attention, plus optional alignment."""
    _check_two_classes(tgt_val, "target validation set")
    align = config.align if align is None else align
    model = transfer_model(config, src_train.schema, src_train.samples, tgt_train.samples)
    params = ParamStore()
    model.init(params, config.rng(STREAM_INIT))
    views_s = model.encode_views(src_train.samples, "source")
    views_t = model.encode_views(tgt_train.samples, "target")
    views_val = model.encode_views(tgt_val.samples, "target")
    sampler, so, to = _pooled_sampler(config, views_s[0].labels, views_t[0].labels)
    total_steps = max(1, config.max_epochs * len(sampler))
    step = [0]

    def epoch_batches():
        for si, ti in sampler:
            batch = model.make_batch(views_s, views_t, so[si], to[ti])
            lam = lambda_schedule(step[0] / total_steps)
            step[0] += 1
            yield lambda tape, b=batch, lam=lam: model.loss(tape, b, lam, align, config.keep_prob)[0]

    def validate():
        return spauc(model.scores_encoded(params, views_val, "target"), views_val[0].labels, config.maxfpr)

    steps = []
    history, best_epoch, best = _optimize(params, config, epoch_batches, validate, steps)
    return TrainResult(model, params, config, history, best_epoch, best, steps)


def train_transfer(config: TrainConfig, src_train: Dataset, src_val: Dataset | None, tgt_train: Dataset,
                   tgt_val: Dataset) -> TrainResult:
    """Dispatch on ``config.mode``.

    ``source_only`` stops early on source validation; every other mode on
    target validation.
    """
    mode = normalize_mode(config.mode)
    if mode == "target_only":
        return train_supervised(config, tgt_train, tgt_val)
    if mode == "source_only":
        if src_val is None:
            raise ValueError("source_only needs a source validation set")
        return train_supervised(config, src_train, src_val)
    if mode == "pretrain":
        if src_val is None:
            raise ValueError("pretrain needs a source validation set")
        return train_pretrain(config, src_train, src_val, tgt_train, tgt_val)
    if mode == "domain_shared":
        return train_domain_shared(config, src_train, tgt_train, tgt_val)
    if mode == "structure_only":
        return train_structure(config, src_train, tgt_train, tgt_val, align="none")
    return train_structure(config, src_train, tgt_train, tgt_val)
