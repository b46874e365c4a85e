"""Hierarchical explainable network: field-level and event-level extractors,
wide layer, MLP head and the log-likelihood loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape
from .data import Encoded, Sample, Schema, encode
from .embedding import INIT_SCALE, EmbeddingTable
from .extractors import DenseExtractor, FMExtractor

PROB_EPS = 1e-12


def field_extract(tape: Tape, v, a):
    """Event embeddings from field vectors ``v (..., n, k)`` and attention logits ``a (..., n)``.

    Returns ``(e, w)``: ``e = Σ w_i v_i + ½[(Σ v_i)² − Σ v_i²]`` with
    ``w = softmax(a)`` over fields.
    """
    w = tape.masked_softmax(a, axis=-1)
    first = tape.sum(tape.mul(tape.reshape(w, w.shape + (1,)), v), axis=-2)
    total = tape.sum(v, axis=-2)
    sq = tape.sum(tape.square(v), axis=-2)
    second = tape.scale(tape.sub(tape.square(total), sq), 0.5)
    return tape.add(first, second), w


def event_extract(tape: Tape, e, mask, f1_w, f1_b, f2_w, f3_w, k=None):
    """Attention pooling of history event embeddings ``e (B, L, k)``.

    Scores are <f2(e_t), f3(e_t)>/√k, normalized over valid events only.  A
    history with no valid event yields ``s = 0`` and all-zero weights.
    """
    k = k or e.shape[-1]
    f1 = tape.add(tape.matmul(e, f1_w), f1_b)
    scores = tape.scale(tape.inner(tape.matmul(e, f2_w), tape.matmul(e, f3_w)), 1.0 / math.sqrt(k))
    u = tape.masked_softmax(scores, mask, axis=-1)
    s = tape.sum(tape.mul(tape.reshape(u, u.shape + (1,)), f1), axis=-2)
    return s, u


def nll_loss(tape: Tape, y_hat, labels):
    """Mean negative log-likelihood with ŷ clamped to [1e-12, 1 − 1e-12]."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("nll_loss on an empty batch")
    p = tape.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    pos = tape.mul(tape.log(p), labels)
    neg = tape.mul(tape.log(tape.sub(1.0, p)), 1.0 - labels)
    return tape.scale(tape.sum(tape.add(pos, neg)), -1.0 / labels.size)


class HENExtractor:
    kind = "hen"

    def __init__(self, prefix, k, n_fields, t_max):
        self.prefix, self.k = prefix, k
        self.out_dim = 2 * k

    def init(self, params: ParamStore, rng):
        k = self.k
        for f in ("f1", "f2", "f3"):
            params.add(f"{self.prefix}.{f}.w", rng.uniform(-INIT_SCALE, INIT_SCALE, (k, k)))
        params.add(f"{self.prefix}.f1.b", np.zeros(k))

    def __call__(self, tape: Tape, table: EmbeddingTable, enc: Encoded):
        v, a = table.embed(tape, enc.cat, enc.num, enc.mask)
        e, w = field_extract(tape, v, a)
        T = enc.mask.shape[1]
        hist = tape.getitem(e, (slice(None), slice(0, T - 1)))
        e_target = tape.getitem(e, (slice(None), T - 1))
        p = self.prefix
        s, u = event_extract(tape, hist, enc.mask[:, :T - 1], tape.param(f"{p}.f1.w"), tape.param(f"{p}.f1.b"),
                             tape.param(f"{p}.f2.w"), tape.param(f"{p}.f3.w"), self.k)
        z = tape.concat([s, e_target], axis=-1)
        return z, {"field_attention": w, "event_attention": u, "s": s, "e_target": e_target}


EXTRACTORS = {"hen": HENExtractor, "dense": DenseExtractor, "fm": FMExtractor}


def make_extractor(kind, prefix, k, n_fields, t_max):
    try:
        return EXTRACTORS[kind](prefix, k, n_fields, t_max)
    except KeyError:
        raise ValueError(f"unknown extractor kind {kind!r}; choose from {sorted(EXTRACTORS)}") from None


class MLPHead:
    """Two rectifier layers of ``hidden`` units and a scalar output."""

    def __init__(self, prefix, d_in, hidden=64):
        self.prefix, self.d_in, self.hidden = prefix, d_in, hidden

    def init(self, params: ParamStore, rng):
        dims = [self.d_in, self.hidden, self.hidden, 1]
        for i in range(3):
            params.add(f"{self.prefix}.w{i + 1}", rng.uniform(-INIT_SCALE, INIT_SCALE, (dims[i], dims[i + 1])))
            params.add(f"{self.prefix}.b{i + 1}", np.zeros(dims[i + 1]))

    def __call__(self, tape: Tape, x, keep_prob=1.0):
        p = self.prefix
        for i in (1, 2):
            x = tape.relu(tape.add(tape.matmul(x, tape.param(f"{p}.w{i}")), tape.param(f"{p}.b{i}")))
            x = tape.dropout(x, keep_prob)
        out = tape.add(tape.matmul(x, tape.param(f"{p}.w3")), tape.param(f"{p}.b3"))
        return tape.reshape(out, out.shape[:-1])


@dataclass
class ForwardTrace:
    """Attention and intermediate values for one sample."""

    prediction: float
    field_attention: np.ndarray | None = None  # (T, n); last row is the target event
    event_attention: np.ndarray | None = None  # (T - 1,)
    mask: np.ndarray | None = None
    sequence_embedding: np.ndarray | None = None
    wide: float | None = None


class HENModel:
    """Single-domain Embedding & MLP model with a wide term.

    With ``extractor="hen"`` this is the hierarchical explainable network;
    ``"dense"`` and ``"fm"`` swap in the non-hierarchical extractors.
    """

    def __init__(self, schema: Schema, table: EmbeddingTable, extractor="hen", t_max=10, hidden=64,
                 norms: dict | None = None):
        self.schema = schema
        self.table = table
        self.k = table.k
        self.t_max = t_max
        self.hidden = hidden
        self.extractor_kind = extractor
        self.extractor = make_extractor(extractor, "ext", table.k, table.n_fields, t_max)
        self.head = MLPHead("mlp", self.extractor.out_dim, hidden)
        # per-domain schemas carrying numerical norm stats
        self.norms = norms or {}

    def init(self, params: ParamStore, rng):
        self.table.init(params, rng)
        self.extractor.init(params, rng)
        self.head.init(params, rng)

    def encode(self, samples) -> Encoded:
        return encode(list(samples), self.schema, self.table.vocabs, self.t_max, self.norms or None)

    def forward(self, tape: Tape, enc: Encoded, keep_prob=1.0):
        z, trace = self.extractor(tape, self.table, enc)
        wide = self.table.wide(tape, enc.cat[:, -1], enc.num[:, -1])
        logit = tape.add(self.head(tape, z, keep_prob), wide)
        y = tape.sigmoid(logit)
        trace.update(z=z, logit=logit, wide=wide)
        return y, trace

    def loss(self, tape: Tape, enc: Encoded, keep_prob=1.0):
        y, trace = self.forward(tape, enc, keep_prob)
        return nll_loss(tape, y, enc.labels), y

    def scores(self, params: ParamStore, enc: Encoded, chunk=4096) -> np.ndarray:
        out = []
        for lo in range(0, len(enc), chunk):
            tape = Tape(params, train=False)
            y, _ = self.forward(tape, enc.take(slice(lo, lo + chunk)))
            out.append(y.value)
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, sample: Sample, params: ParamStore, train_mode=False, rng=None, keep_prob=0.8):
        """ŷ for one sample plus its :class:`ForwardTrace`."""
        enc = self.encode([sample])
        tape = Tape(params, train=train_mode, rng=rng)
        y, tr = self.forward(tape, enc, keep_prob if train_mode else 1.0)
        trace = ForwardTrace(prediction=float(y.value[0]), mask=enc.mask[0])
        if "field_attention" in tr:
            trace.field_attention = tr["field_attention"].value[0]
            trace.event_attention = tr["event_attention"].value[0]
            trace.sequence_embedding = tr["s"].value[0]
        trace.wide = float(tr["wide"].value[0])
        return trace.prediction, trace

    def to_dict(self):
        return {
            "model": "single",
            "extractor": self.extractor_kind,
            "t_max": self.t_max,
            "hidden": self.hidden,
            "schema": self.schema.to_dict(),
            "table": self.table.to_dict(),
            "norms": {d: s.to_dict() for d, s in self.norms.items()},
        }

    @classmethod
    def from_dict(cls, d):
        schema = Schema.from_dict(d["schema"])
        table = EmbeddingTable.from_dict(d["table"], schema)
        norms = {dom: Schema.from_dict(s) for dom, s in d["norms"].items()}
        return cls(schema, table, d["extractor"], d["t_max"], d["hidden"], norms)
