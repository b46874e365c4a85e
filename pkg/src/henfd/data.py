"""Event-sequence datasets: schema, JSONL IO, splits, resampling and encoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CATEGORICAL = "categorical"
NUMERICAL = "numerical"
DOMAINS = ("source", "target")


class DataError(ValueError):
    pass


@dataclass
class FieldSpec:
    name: str
    kind: str
    shared: bool = True
    vocab: list[str] | None = None
    mean: float | None = None
    std: float | None = None

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NUMERICAL):
            raise DataError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.vocab is not None:
            self.vocab = [str(v) for v in self.vocab]
            if len(set(self.vocab)) != len(self.vocab):
                raise DataError(f"field {self.name!r}: duplicate vocab entries")
        if self.std is not None and not self.std > 0:
            self.std = 1.0

    @property
    def categorical(self):
        return self.kind == CATEGORICAL

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "shared": self.shared}
        if self.vocab is not None:
            d["vocab"] = list(self.vocab)
        if self.mean is not None:
            d["mean"] = self.mean
            d["std"] = self.std
        return d


@dataclass
class Schema:
    fields: list[FieldSpec]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DataError("duplicate field names in schema")
        if not self.fields:
            raise DataError("schema has no fields")

    @property
    def names(self):
        return [f.name for f in self.fields]

    @property
    def categorical(self):
        return [f for f in self.fields if f.categorical]

    @property
    def numerical(self):
        return [f for f in self.fields if not f.categorical]

    @property
    def model_order(self):
        """Field names in the order the models lay them out (categorical first)."""
        return [f.name for f in self.categorical] + [f.name for f in self.numerical]

    def field(self, name) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_dict(self):
        return {"fields": [f.to_dict() for f in self.fields]}

    @classmethod
    def from_dict(cls, d):
        return cls([FieldSpec(**f) for f in d["fields"]])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed schema ({exc})") from None


@dataclass
class Sample:
    history: list[dict]
    target: dict
    label: int
    domain: str = "source"
    timestamp: int = 0
    user_id: str = ""
    flags: dict | None = None

    def to_dict(self):
        d = {
            "user_id": self.user_id,
            "domain": self.domain,
            "timestamp": self.timestamp,
            "label": self.label,
            "target": self.target,
            "history": self.history,
        }
        if self.flags is not None:
            d["flags"] = self.flags
        return d


@dataclass
class Dataset:
    schema: Schema
    samples: list[Sample]
    split: str = "train"

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices, split=None):
        return Dataset(self.schema, [self.samples[i] for i in indices], split or self.split)

    def with_split(self, split):
        return Dataset(self.schema, self.samples, split)


def _check_event(schema: Schema, event, where):
    if not isinstance(event, dict):
        raise DataError(f"{where}: event must be an object")
    known = set(schema.names)
    for name in event:
        if name not in known:
            raise DataError(f"{where}: unknown field {name!r}")
    out = {}
    for f in schema.fields:
        v = event.get(f.name)
        if v is None:
            out[f.name] = None
        elif f.categorical:
            out[f.name] = str(v)
        else:
            try:
                out[f.name] = float(v)
            except (TypeError, ValueError):
                raise DataError(f"{where}: field {f.name!r} expects a number, got {v!r}") from None
    return out


def parse_sample(schema: Schema, obj, where="sample") -> Sample:
    try:
        label = int(obj["label"])
        target = _check_event(schema, obj["target"], f"{where} target")
        history = [_check_event(schema, e, f"{where} history[{i}]")
                   for i, e in enumerate(obj.get("history", []))]
    except KeyError as exc:
        raise DataError(f"{where}: missing key {exc}") from None
    if label not in (0, 1):
        raise DataError(f"{where}: label must be 0 or 1")
    domain = obj.get("domain", "source")
    if domain not in DOMAINS:
        raise DataError(f"{where}: domain must be one of {DOMAINS}")
    return Sample(
        history=history,
        target=target,
        label=label,
        domain=domain,
        timestamp=int(obj.get("timestamp", 0)),
        user_id=str(obj.get("user_id", "")),
        flags=obj.get("flags"),
    )


def load_dataset(schema_path, data_path, split="train") -> Dataset:
    schema = schema_path if isinstance(schema_path, Schema) else Schema.load(schema_path)
    samples = []
    with open(data_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{data_path}:{lineno}: malformed JSON ({exc.msg})") from None
            samples.append(parse_sample(schema, obj, f"{data_path}:{lineno}"))
    return Dataset(schema, samples, split)


def save_dataset(dataset: Dataset, path):
    with open(path, "w") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


# -- splitting and resampling ---------------------------------------------------


def time_split(dataset: Dataset, fractions=(5, 2, 3)):
    """Contiguous train/validation/test split in timestamp order.

    Ties keep input order (stable sort).
    """
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    order = np.argsort([s.timestamp for s in dataset.samples], kind="stable")
    total = float(sum(fractions))
    b1 = int(round(n * fractions[0] / total))
    b2 = int(round(n * (fractions[0] + fractions[1]) / total))
    return (
        dataset.subset(order[:b1], "train"),
        dataset.subset(order[b1:b2], "validation"),
        dataset.subset(order[b2:], "test"),
    )


def upsample_indices(labels, factor: int, rng) -> np.ndarray:
    """Indices in which every positive occurs ``factor`` times, shuffled."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    idx = np.concatenate([np.arange(len(labels))] + [pos] * (factor - 1))
    return rng.permutation(idx)


def upsample_positives(dataset: Dataset, factor: int = 5, seed: int = 0) -> Dataset:
    idx = upsample_indices(dataset.labels, factor, np.random.default_rng(seed))
    return dataset.subset(idx)


def fit_norm_stats(schema: Schema, samples) -> Schema:
    """Copy of ``schema`` with numerical mean/std fitted on ``samples``."""
    fields = []
    for f in schema.fields:
        if f.categorical:
            fields.append(replace(f))
            continue
        vals = [e[f.name] for s in samples for e in (*s.history, s.target) if e.get(f.name) is not None]
        mean = float(np.mean(vals)) if vals else 0.0
        std = float(np.std(vals)) if vals else 1.0
        fields.append(replace(f, mean=mean, std=std if std > 0 else 1.0))
    return Schema(fields)


def fit_vocab(schema: Schema, samples) -> Schema:
    """Copy of ``schema`` whose categorical vocabs list the observed values (first-seen order)."""
    fields = []
    for f in schema.fields:
        if not f.categorical:
            fields.append(replace(f))
            continue
        seen = {}
        for s in samples:
            for e in (*s.history, s.target):
                v = e.get(f.name)
                if v is not None and v not in seen:
                    seen[v] = None
        fields.append(replace(f, vocab=list(seen)))
    return Schema(fields)


class StratifiedBatchSampler:
    """Joint source/target batches with every (domain, class) cell represented.

    Each batch carries a fixed quota per cell, proportional to the cell's share
    of the pooled epoch and never below ``min_per_cell``.  An epoch has
    ``ceil(pool / batch_size)`` batches.  A cell whose quota outlasts it is
    walked once without replacement and then resampled with replacement; a
    larger cell keeps a cursor into a rolling permutation, so samples not
    reached in one epoch come first in the next.
    """

    def __init__(self, src_labels, tgt_labels, batch_size: int, rng, min_per_cell: int = 2):
        self.rng = rng
        self.batch_size = int(batch_size)
        src_labels = np.asarray(src_labels)
        tgt_labels = np.asarray(tgt_labels)
        self.cells = [
            np.flatnonzero(src_labels == 0),
            np.flatnonzero(src_labels == 1),
            np.flatnonzero(tgt_labels == 0),
            np.flatnonzero(tgt_labels == 1),
        ]
        names = ["source/0", "source/1", "target/0", "target/1"]
        for name, cell in zip(names, self.cells):
            if len(cell) == 0:
                raise DataError(
                    f"stratified batching needs every (domain, class) cell; {name} is empty "
                    "- train in supervised (single-domain) mode instead"
                )
        if self.batch_size < min_per_cell * 4:
            raise DataError(f"batch_size must be at least {4 * min_per_cell}")
        self.quotas = self._apportion(min_per_cell)
        self.total = sum(len(c) for c in self.cells)
        self.n_batches = math.ceil(self.total / self.batch_size)
        self._perm = [rng.permutation(c) for c in self.cells]
        self._cursor = [0] * 4

    def _apportion(self, floor):
        sizes = np.array([len(c) for c in self.cells], dtype=float)
        quotas = np.full(4, floor)
        free = self.batch_size - quotas.sum()
        # largest remainder on what is left after the floor, by share of the pool
        want = sizes / sizes.sum() * self.batch_size - floor
        want = np.clip(want, 0, None)
        if want.sum() > 0:
            share = want / want.sum() * free
            base = np.floor(share).astype(int)
            rem = free - base.sum()
            order = np.argsort(-(share - base), kind="stable")
            base[order[:rem]] += 1
            quotas += base
        else:
            quotas[np.argmax(sizes)] += free
        return quotas

    def __len__(self):
        return self.n_batches

    def _epoch_draws(self, c):
        need = self.quotas[c] * self.n_batches
        cell = self.cells[c]
        if need >= len(cell):
            walk = self.rng.permutation(cell)
            extra = self.rng.choice(cell, need - len(cell), replace=True)
            return np.concatenate([walk, extra])
        out = []
        while need > 0:
            perm, cur = self._perm[c], self._cursor[c]
            take = min(need, len(perm) - cur)
            out.append(perm[cur:cur + take])
            need -= take
            cur += take
            if cur == len(perm):
                self._perm[c] = self.rng.permutation(cell)
                cur = 0
            self._cursor[c] = cur
        return np.concatenate(out)

    def __iter__(self):
        draws = [self._epoch_draws(c) for c in range(4)]
        for b in range(self.n_batches):
            parts = [d[b * q:(b + 1) * q] for d, q in zip(draws, self.quotas)]
            yield np.concatenate(parts[:2]), np.concatenate(parts[2:])


def stratified_batches(src_labels, tgt_labels, batch_size, rng):
    """One epoch of ``(source_indices, target_indices)`` joint batches."""
    yield from StratifiedBatchSampler(src_labels, tgt_labels, batch_size, rng)


# -- encoding -----------------------------------------------------------------


class FieldVocab:
    """Raw value -> row index within one field's table; 0 is the OOV row.

    Keys are either plain values or ``(domain, value)`` pairs when the table
    keeps per-domain rows for a field.
    """

    def __init__(self, keys=(), per_domain=False):
        self.per_domain = per_domain
        self.keys = []
        self.index = {}
        for k in keys:
            self.add(k)

    def add(self, key):
        key = tuple(key) if isinstance(key, list) else key
        if key not in self.index:
            self.index[key] = len(self.keys) + 1
            self.keys.append(key)
        return self.index[key]

    def lookup(self, value, domain=None):
        if value is None:
            return 0
        key = (domain, value) if self.per_domain else value
        return self.index.get(key, 0)

    @property
    def size(self):
        return len(self.keys) + 1

    def label(self, row):
        if row == 0:
            return "<OOV>"
        key = self.keys[row - 1]
        return f"{key[0]}:{key[1]}" if self.per_domain else key

    def to_dict(self):
        return {"per_domain": self.per_domain, "keys": [list(k) if self.per_domain else k for k in self.keys]}

    @classmethod
    def from_dict(cls, d):
        keys = [tuple(k) for k in d["keys"]] if d["per_domain"] else d["keys"]
        return cls(keys, d["per_domain"])


@dataclass
class Encoded:
    """Array view of a list of samples for one embedding table.

    Position ``t_max - 1`` along axis 1 is the target event; earlier positions
    hold the most recent history events, left-padded.
    """

    cat: np.ndarray  # (N, T, n_cat) int64 row indices per field
    num: np.ndarray  # (N, T, n_num) z-scored
    mask: np.ndarray  # (N, T) bool, True for real events
    labels: np.ndarray
    domains: np.ndarray  # (N,) 0 = source, 1 = target

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Encoded":
        return Encoded(self.cat[idx], self.num[idx], self.mask[idx], self.labels[idx], self.domains[idx])

    @staticmethod
    def join(parts) -> "Encoded":
        return Encoded(*(np.concatenate([getattr(p, a) for p in parts]) for a in
                         ("cat", "num", "mask", "labels", "domains")))


def encode(samples, schema: Schema, vocabs: dict[str, FieldVocab], t_max: int, norms=None) -> Encoded:
    """Encode samples against per-field vocabularies.

    Numerical fields are z-scored with the mean/std carried by ``norms``: a
    schema, or a dict of per-domain schemas (falling back to ``schema``).
    Histories longer than ``t_max - 1`` keep the latest events.
    """
    if not isinstance(norms, dict):
        norms = {d: norms or schema for d in DOMAINS}
    cats = schema.categorical
    num_names = [f.name for f in schema.numerical]
    stats = {}
    for d in DOMAINS:
        src = norms.get(d) or next(iter(norms.values()), None) or schema
        fs = [src.field(name) for name in num_names]
        stats[d] = (np.array([f.mean if f.mean is not None else 0.0 for f in fs]),
                    np.array([f.std if f.std else 1.0 for f in fs]))
    n = len(samples)
    L = t_max - 1
    cat = np.zeros((n, t_max, len(cats)), dtype=np.int64)
    num = np.full((n, t_max, len(num_names)), np.nan)
    mask = np.zeros((n, t_max), dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    domains = np.zeros(n, dtype=np.int64)
    lookups = [(f.name, vocabs[f.name]) for f in cats]
    for i, s in enumerate(samples):
        hist = s.history[-L:] if L > 0 else []
        events = hist + [s.target]
        start = t_max - len(events)
        dom = s.domain
        mean, std = stats[dom]
        for t, e in enumerate(events, start):
            mask[i, t] = True
            cat[i, t] = [voc.lookup(e.get(name), dom) for name, voc in lookups]
            if num_names:
                raw = np.array([e[name] if e.get(name) is not None else np.nan for name in num_names])
                num[i, t] = (raw - mean) / std
        labels[i] = s.label
        domains[i] = DOMAINS.index(dom)
    num = np.nan_to_num(num, nan=0.0)
    return Encoded(cat, num, mask, labels, domains)
