"""Ready-made synthetic tasks and multi-seed comparisons."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, time_split
from .metrics import MetricReport, aggregate
from .synthetic import GeneratorConfig, synthesize
from .trainer import TrainConfig, evaluate, train_supervised, train_transfer


@dataclass
class SupervisedTask:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class TransferTask:
    src_train: Dataset
    src_val: Dataset
    tgt_train: Dataset
    tgt_val: Dataset
    tgt_test: Dataset


def supervised_task(seed=0, n_train=20000, n_val=5000, n_test=10000, **knobs) -> SupervisedTask:
    """One source-domain draw split by time into train/validation/test."""
    config = GeneratorConfig(seed=seed, n_samples=n_train + n_val + n_test, **knobs)
    train, val, test = time_split(synthesize(config, "source"), (n_train, n_val, n_test))
    return SupervisedTask(train, val, test)


def transfer_config(seed=0, **knobs) -> GeneratorConfig:
    defaults = dict(vocab_overlap=0.5, shift=0.5, risk_share=0.5)
    defaults.update(knobs)
    return GeneratorConfig(seed=seed, **defaults)


def transfer_task(seed=0, n_source=50000, n_source_val=10000, n_target=1000, n_target_val=5000,
                  n_target_test=10000, **knobs) -> TransferTask:
    """A large labelled source domain and a small labelled target domain.

    The target's validation and test sets come later in time than its
    training samples.
    """
    config = transfer_config(seed, **knobs)
    src = synthesize(config, "source", n_source + n_source_val)
    src_train, src_val, _ = time_split(src, (n_source, n_source_val, 0))
    tgt = synthesize(config, "target", n_target + n_target_val + n_target_test)
    tgt_train, tgt_val, tgt_test = time_split(tgt, (n_target, n_target_val, n_target_test))
    return TransferTask(src_train, src_val, tgt_train, tgt_val, tgt_test)


def compare_extractors(seeds, extractors=("hen", "dense"), train_config: TrainConfig | None = None,
                       **task_kw) -> dict[str, MetricReport]:
    """Test SPAUC per extractor over seeds on the supervised task."""
    base = train_config or TrainConfig()
    per = {e: [] for e in extractors}
    for seed in seeds:
        task = supervised_task(seed, **task_kw)
        for ext in extractors:
            cfg = replace(base, seed=seed, extractor=ext, mode="supervised")
            res = train_supervised(cfg, task.train, task.val)
            per[ext].append(evaluate(res.model, res.params, task.test, cfg.maxfpr))
    return {e: _summarize(r) for e, r in per.items()}


def compare_modes(seeds, runs, train_config: TrainConfig | None = None, **task_kw) -> dict[str, MetricReport]:
    """Target-test SPAUC for each named ``(mode, align)`` run over seeds.

    ``runs`` maps a label to ``(mode, align)``.
    """
    base = train_config or TrainConfig()
    per = {name: [] for name in runs}
    for seed in seeds:
        task = transfer_task(seed, **task_kw)
        for name, (mode, align) in runs.items():
            cfg = replace(base, seed=seed, mode=mode, align=align)
            res = train_transfer(cfg, task.src_train, task.src_val, task.tgt_train, task.tgt_val)
            per[name].append(evaluate(res.model, res.params, task.tgt_test, cfg.maxfpr))
    return {name: _summarize(r) for name, r in per.items()}


def _summarize(reports):
    if len(reports) >= 2:
        return aggregate(reports)
    r = reports[0]
    return MetricReport(r.spauc, r.auc, r.maxfpr, [{"trial": 0, "spauc": r.spauc, "auc": r.auc}], r.spauc, None)


def means(summary: dict[str, MetricReport]) -> dict[str, float]:
    return {k: float(np.round(v.spauc, 6)) for k, v in summary.items()}
