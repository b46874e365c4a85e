"""Attention explanations for single samples and wide-layer risk lists."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .data import DataError, Dataset, Sample
from .hen import HENModel
from .transfer import TransferModel


@dataclass
class ExplanationRecord:
    """What the model attended to when scoring one sample.

    ``field_attention`` has one row per valid event (history first, target
    last); ``event_attention`` one entry per valid history event, aligned
    with ``history_index`` (positions in the sample's own history list).
    """

    prediction: float
    fields: list
    field_attention: list | None = None
    event_attention: list | None = None
    history_index: list = field(default_factory=list)
    top_events: list = field(default_factory=list)
    top_fields: list = field(default_factory=list)
    domain_attention: dict | None = None
    shared_branch: dict | None = None
    user_id: str = ""

    def to_dict(self):
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


def _check_sample(sample: Sample, names):
    known = set(names)
    for e in (*sample.history, sample.target):
        extra = set(e) - known
        if extra:
            raise DataError(f"sample {sample.user_id!r} has fields unknown to the checkpoint: {sorted(extra)}")


def _attention(trace, mask, fields, t_max, n_hist):
    """Valid rows of a branch trace as plain lists."""
    if "field_attention" not in trace:
        return None
    w = trace["field_attention"].value[0]
    u = trace["event_attention"].value[0]
    valid = np.flatnonzero(mask)
    hist = valid[valid < t_max - 1]
    first = n_hist - len(hist)  # index in the sample history of the first kept event
    out = {
        "field_attention": w[valid].tolist(),
        "event_attention": u[hist].tolist(),
        "history_index": [int(first + i) for i in range(len(hist))],
    }
    order = np.argsort(-u[hist], kind="stable")
    out["top_events"] = [out["history_index"][i] for i in order]
    out["top_fields"] = [[fields[j] for j in np.argsort(-row, kind="stable")] for row in w[valid]]
    return out


def explain_sample(sample: Sample, model, params) -> ExplanationRecord:
    """Score one sample with dropout off and copy out its attention weights."""
    _check_sample(sample, model.schema.names)
    n_hist = len(sample.history)
    if isinstance(model, HENModel):
        fields = model.table.field_names
        enc = model.encode([sample])
        tape = Tape(params, train=False)
        y, trace = model.forward(tape, enc)
        rec = ExplanationRecord(float(y.value[0]), fields, user_id=sample.user_id)
        att = _attention(trace, enc.mask[0], fields, model.t_max, n_hist)
        if att:
            for k, v in att.items():
                setattr(rec, k, v)
        return rec
    if isinstance(model, TransferModel):
        fields = model.shared.field_names
        y, traces, batch = model.predict(sample, params)
        rec = ExplanationRecord(y, fields, user_id=sample.user_id)
        spec = _attention(traces[sample.domain], batch.shared.mask[0], fields, model.t_max, n_hist)
        if spec:
            for k, v in spec.items():
                setattr(rec, k, v)
        rec.shared_branch = _attention(traces["share"], batch.shared.mask[0], fields, model.t_max, n_hist)
        b = traces["domain_attention"].value[0]
        rec.domain_attention = {"share": float(b[0]), "specific": float(b[1])}
        return rec
    raise TypeError(f"cannot explain model of type {type(model).__name__}")


@dataclass
class RiskEntry:
    value: str
    weight: float
    positives: int
    total: int


@dataclass
class RiskList:
    """Per field: the ``q`` highest- and lowest-weighted values of the wide layer."""

    q: int
    high: dict
    low: dict

    def to_dict(self):
        return asdict(self)

    def top_values(self, field_name):
        return [e.value for e in self.high[field_name]]


def _wide_table(model, domain):
    if isinstance(model, HENModel):
        return model.table
    if isinstance(model, TransferModel):
        return model.specific[domain]
    raise TypeError(f"no wide layer on model of type {type(model).__name__}")


def risk_list(model, params, dataset: Dataset, field_names, q=3, domain="target") -> RiskList:
    """Rank each categorical field's values by their wide-layer weight.

    Ties keep vocabulary order.  Counts are (positives, total) over target
    events of ``dataset``.  For a transfer model, ``domain`` picks which
    domain's wide layer is read.
    """
    if q < 1:
        raise ValueError("q must be at least 1")
    table = _wide_table(model, domain)
    if not table.has_wide:
        raise ValueError("this table has no wide layer")
    high, low = {}, {}
    for name in field_names:
        if name in table.num_fields:
            raise ValueError(f"{name!r} is numerical; a single wide weight cannot be ranked")
        if name not in table.cat_fields:
            raise ValueError(f"unknown field {name!r}")
        vocab = table.vocabs[name]
        c = table.field_rows(params, name, "wide_cat")[1:]  # drop the OOV row
        labels = [vocab.label(r) for r in range(1, vocab.size)]
        counts = {}
        for s in dataset.samples:
            v = s.target.get(name)
            key = f"{s.domain}:{v}" if vocab.per_domain else v
            pos, tot = counts.get(key, (0, 0))
            counts[key] = (pos + s.label, tot + 1)
        idx = np.arange(len(c))
        desc = np.lexsort((idx, -c))
        asc = np.lexsort((idx, c))

        def entries(order):
            return [RiskEntry(str(labels[i]), float(c[i]), *counts.get(labels[i], (0, 0))) for i in order[:q]]

        high[name], low[name] = entries(desc), entries(asc)
    return RiskList(q, high, low)


def export_report(records, out_dir):
    """Write ``report.json`` and one ``heatmap_<i>.csv`` (events × fields) per record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = [r.to_dict() for r in records]
    (out / "report.json").write_text(json.dumps(payload, indent=2))
    paths = [out / "report.json"]
    for i, r in enumerate(records):
        if r.field_attention is None:
            continue
        path = out / f"heatmap_{i}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(r.fields)
            w.writerows([[repr(float(x)) for x in row] for row in r.field_attention])
        paths.append(path)
    return paths


def load_report(path):
    return [ExplanationRecord(**d) for d in json.loads(Path(path).read_text())]
