"""Cross-domain transfer: shared and domain-specific branches, domain
attention, class-aware alignment losses and the progressive λ schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape
from .data import DOMAINS, Encoded, FieldVocab, Sample, Schema, encode
from .embedding import INIT_SCALE, DomainVocabMap, EmbeddingTable
from .hen import MLPHead, make_extractor, nll_loss

TRAIN_MODES = ("target_only", "source_only", "pretrain", "domain_shared", "structure_only", "full")
ALIGN_MODES = ("none", "ed", "ced")
DEN_FLOOR = 1e-12
CELLS = (("source", 0), ("source", 1), ("target", 0), ("target", 1))


def normalize_mode(mode):
    """Accept ``pretrain_finetune`` as an alias of ``pretrain``."""
    mode = "pretrain" if mode == "pretrain_finetune" else mode
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown train mode {mode!r}; choose from {list(TRAIN_MODES)}")
    return mode


def lambda_schedule(theta: float) -> float:
    """λ = 2/(1 + exp(−10θ)) − 1 with θ clamped to [0, 1]."""
    theta = min(max(float(theta), 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-10.0 * theta)) - 1.0


# -- alignment ------------------------------------------------------------------


@dataclass
class BatchClassStats:
    """Per (domain, class) counts and a ``(4, d)`` node of cell means.

    Cells are ordered source/0, source/1, target/0, target/1.
    """

    counts: np.ndarray
    means: object

    def cell(self, domain, label):
        return CELLS.index((domain, int(label)))


def batch_class_stats(tape: Tape, z, domains, labels) -> BatchClassStats:
    domains = np.asarray(domains)
    labels = np.asarray(labels)
    if domains.dtype.kind in "iu":
        domains = np.array(DOMAINS)[domains]
    sel = np.zeros((4, len(labels)))
    counts = np.zeros(4, dtype=np.int64)
    for c, (d, y) in enumerate(CELLS):
        hit = (domains == d) & (labels == y)
        counts[c] = hit.sum()
        if counts[c]:
            sel[c, hit] = 1.0 / counts[c]
    return BatchClassStats(counts, tape.matmul(tape.const(sel), z))


def class_distance(tape: Tape, stats: BatchClassStats, o1, c1, o2, c2):
    """Squared Euclidean distance between two cell means."""
    i, j = stats.cell(o1, c1), stats.cell(o2, c2)
    for c in (i, j):
        if stats.counts[c] == 0:
            raise ValueError(f"class_distance: cell {CELLS[c][0]}/{CELLS[c][1]} is empty")
    diff = tape.sub(tape.getitem(stats.means, i), tape.getitem(stats.means, j))
    return tape.sum(tape.square(diff))


def ced(tape: Tape, stats: BatchClassStats):
    """Cross-domain same-class distances over all cross-class distances."""
    if np.any(stats.counts == 0):
        empty = [f"{d}/{y}" for (d, y), n in zip(CELLS, stats.counts) if n == 0]
        raise ValueError(f"ced needs all four (domain, class) cells; empty: {', '.join(empty)}")
    d = lambda a, b: class_distance(tape, stats, *a, *b)  # noqa: E731
    s0, s1, t0, t1 = CELLS
    num = tape.add(d(s0, t0), d(s1, t1))
    den = tape.add(tape.add(d(s0, s1), d(s0, t1)), tape.add(d(t0, s1), d(t0, t1)))
    return tape.div(num, tape.clip(den, DEN_FLOOR, np.inf))


def euclidean_alignment(tape: Tape, z, domains):
    """Squared distance between the overall source and target means of ``z``."""
    domains = np.asarray(domains)
    if domains.dtype.kind in "iu":
        domains = np.array(DOMAINS)[domains]
    sel = np.zeros((2, len(domains)))
    for r, d in enumerate(DOMAINS):
        hit = domains == d
        if not hit.any():
            raise ValueError(f"euclidean_alignment: no {d} samples in the batch")
        sel[r, hit] = 1.0 / hit.sum()
    means = tape.matmul(tape.const(sel), z)
    return tape.sum(tape.square(tape.sub(tape.getitem(means, 0), tape.getitem(means, 1))))


def alignment_loss(tape: Tape, z, domains, labels, align):
    if align == "ced":
        return ced(tape, batch_class_stats(tape, z, domains, labels))
    if align == "ed":
        return euclidean_alignment(tape, z, domains)
    if align == "none":
        return tape.const(0.0)
    raise ValueError(f"unknown alignment {align!r}; choose from {list(ALIGN_MODES)}")


# -- domain attention -------------------------------------------------------------


def domain_attention(tape: Tape, z_share, z_spe, g1_w, g1_b, g2_w, g3_w, k):
    """Mix the two branch representations with per-sample softmax weights.

    Returns ``(z, b)`` with ``b`` of shape ``(N, 2)`` ordered (share, specific).
    """
    scores = []
    for zp in (z_share, z_spe):
        s = tape.inner(tape.matmul(zp, g2_w), tape.matmul(zp, g3_w))
        scores.append(tape.reshape(tape.scale(s, 1.0 / math.sqrt(k)), s.shape + (1,)))
    b = tape.masked_softmax(tape.concat(scores, axis=-1), axis=-1)
    proj = [tape.add(tape.matmul(zp, g1_w), g1_b) for zp in (z_share, z_spe)]
    mixed = tape.add(tape.mul(tape.getitem(b, (slice(None), slice(0, 1))), proj[0]),
                     tape.mul(tape.getitem(b, (slice(None), slice(1, 2))), proj[1]))
    return mixed, b


# -- model ----------------------------------------------------------------------------


@dataclass
class TransferBatch:
    """Encoded views of a joint batch ordered [source..., target...]."""

    shared: Encoded
    source: Encoded
    target: Encoded

    def __len__(self):
        return len(self.shared)

    @property
    def labels(self):
        return self.shared.labels

    @property
    def domains(self):
        return self.shared.domains


class TransferModel:
    """Shared plus domain-specific branches joined by domain attention.

    The shared table embeds both domains (see
    :func:`henfd.embedding.build_domain_vocabs`); each specific table embeds
    only its own domain and carries that domain's wide layer.  With
    ``shared_wide`` the shared table adds a wide term of its own, so
    first-order value risks learnt on the source reach the target too.  The
    mixing layers g1, g2, g3 and the MLP head are common to both domains.
    """

    def __init__(self, schema: Schema, vocabs: DomainVocabMap, extractor="hen", k=16, t_max=10, hidden=64,
                 norms: dict | None = None, shared_wide: bool = True):
        self.schema = schema
        self.vocab_map = vocabs
        self.k, self.t_max, self.hidden = k, t_max, hidden
        self.extractor_kind = extractor
        self.shared_wide = shared_wide
        self.shared = EmbeddingTable("shared", schema, vocabs.shared, k, wide=shared_wide)
        self.specific = {
            "source": EmbeddingTable("src", schema, vocabs.source, k, wide=True),
            "target": EmbeddingTable("tgt", schema, vocabs.target, k, wide=True),
        }
        n = self.shared.n_fields
        self.ext_shared = make_extractor(extractor, "ext_shared", k, n, t_max)
        self.ext_specific = {
            "source": make_extractor(extractor, "ext_src", k, n, t_max),
            "target": make_extractor(extractor, "ext_tgt", k, n, t_max),
        }
        self.d_z = self.ext_shared.out_dim
        self.head = MLPHead("mlp", self.d_z, hidden)
        self.norms = norms or {}

    def init(self, params: ParamStore, rng):
        self.shared.init(params, rng)
        for d in DOMAINS:
            self.specific[d].init(params, rng)
        self.ext_shared.init(params, rng)
        for d in DOMAINS:
            self.ext_specific[d].init(params, rng)
        for g in ("g1", "g2", "g3"):
            params.add(f"dom.{g}.w", rng.uniform(-INIT_SCALE, INIT_SCALE, (self.d_z, self.d_z)))
        params.add("dom.g1.b", np.zeros(self.d_z))
        self.head.init(params, rng)

    def encode_views(self, samples, domain) -> tuple[Encoded, Encoded]:
        """(shared view, specific view) of samples from one domain."""
        samples = list(samples)
        for s in samples:
            if s.domain != domain:
                raise ValueError(f"sample {s.user_id!r} is from {s.domain!r}, expected {domain!r}")
        norms = self.norms or None
        shared = encode(samples, self.schema, self.shared.vocabs, self.t_max, norms)
        spec = encode(samples, self.schema, self.specific[domain].vocabs, self.t_max, norms)
        return shared, spec

    def make_batch(self, src_views, tgt_views, src_idx=None, tgt_idx=None) -> TransferBatch:
        (src_sh, src_sp), (tgt_sh, tgt_sp) = src_views, tgt_views
        if src_idx is not None:
            src_sh, src_sp = src_sh.take(src_idx), src_sp.take(src_idx)
        if tgt_idx is not None:
            tgt_sh, tgt_sp = tgt_sh.take(tgt_idx), tgt_sp.take(tgt_idx)
        return TransferBatch(Encoded.join([src_sh, tgt_sh]), src_sp, tgt_sp)

    def batch_for(self, samples, domain) -> TransferBatch:
        shared, spec = self.encode_views(samples, domain)
        empty = spec.take(slice(0, 0))
        if domain == "source":
            return TransferBatch(shared, spec, empty)
        return TransferBatch(shared, empty, spec)

    def branch_forward(self, tape: Tape, batch: TransferBatch):
        """``(z_share, z_spe, traces)`` for a joint batch.

        Each sample's specific representation comes from its own domain's
        table and extractor only.
        """
        z_share, tr_share = self.ext_shared(tape, self.shared, batch.shared)
        parts, traces, wides = [], {"share": tr_share}, []
        for d, enc in (("source", batch.source), ("target", batch.target)):
            if len(enc) == 0:
                continue
            z, tr = self.ext_specific[d](tape, self.specific[d], enc)
            parts.append(z)
            traces[d] = tr
            wides.append(self.specific[d].wide(tape, enc.cat[:, -1], enc.num[:, -1]))
        if not parts:
            raise ValueError("empty transfer batch")
        z_spe = parts[0] if len(parts) == 1 else tape.concat(parts, axis=0)
        wide = wides[0] if len(wides) == 1 else tape.concat(wides, axis=0)
        if self.shared_wide:
            enc = batch.shared
            wide = tape.add(wide, self.shared.wide(tape, enc.cat[:, -1], enc.num[:, -1]))
        traces["wide"] = wide
        return z_share, z_spe, traces

    def forward(self, tape: Tape, batch: TransferBatch, keep_prob=1.0):
        z_share, z_spe, traces = self.branch_forward(tape, batch)
        z, b = domain_attention(tape, z_share, z_spe, tape.param("dom.g1.w"), tape.param("dom.g1.b"),
                                tape.param("dom.g2.w"), tape.param("dom.g3.w"), self.k)
        logit = tape.add(self.head(tape, z, keep_prob), traces["wide"])
        y = tape.sigmoid(logit)
        traces.update(z=z, z_share=z_share, z_spe=z_spe, domain_attention=b, logit=logit)
        return y, traces

    def loss(self, tape: Tape, batch: TransferBatch, lam=0.0, align="ced", keep_prob=1.0):
        """``(L, y, components)`` with ``L = L_cls + λ·L_da``."""
        y, traces = self.forward(tape, batch, keep_prob)
        cls = nll_loss(tape, y, batch.labels)
        if align == "none":
            da, total = tape.const(0.0), cls
        else:
            da = alignment_loss(tape, traces["z"], batch.domains, batch.labels, align)
            total = cls if lam == 0.0 else tape.add(cls, tape.scale(da, lam))
        comps = {"cls": float(cls.value), "da": float(da.value), "lambda": float(lam), "loss": float(total.value)}
        return total, y, comps

    def scores(self, params: ParamStore, samples, domain="target", chunk=4096) -> np.ndarray:
        samples = list(samples)
        out = []
        for lo in range(0, len(samples), chunk):
            tape = Tape(params, train=False)
            y, _ = self.forward(tape, self.batch_for(samples[lo:lo + chunk], domain))
            out.append(y.value)
        return np.concatenate(out) if out else np.zeros(0)

    def scores_encoded(self, params: ParamStore, views, domain, chunk=4096) -> np.ndarray:
        shared, spec = views
        out = []
        empty = spec.take(slice(0, 0))
        for lo in range(0, len(shared), chunk):
            sl = slice(lo, lo + chunk)
            part = (spec.take(sl), empty) if domain == "source" else (empty, spec.take(sl))
            tape = Tape(params, train=False)
            y, _ = self.forward(tape, TransferBatch(shared.take(sl), *part))
            out.append(y.value)
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, sample: Sample, params: ParamStore):
        """ŷ and the raw trace dict for one sample (dropout off)."""
        batch = self.batch_for([sample], sample.domain)
        tape = Tape(params, train=False)
        y, traces = self.forward(tape, batch)
        return float(y.value[0]), traces, batch

    def to_dict(self):
        vm = self.vocab_map
        return {
            "model": "transfer",
            "extractor": self.extractor_kind,
            "k": self.k,
            "t_max": self.t_max,
            "hidden": self.hidden,
            "shared_wide": self.shared_wide,
            "schema": self.schema.to_dict(),
            "vocabs": {part: {name: v.to_dict() for name, v in getattr(vm, part).items()}
                       for part in ("shared", "source", "target")},
            "norms": {d: s.to_dict() for d, s in self.norms.items()},
        }

    @classmethod
    def from_dict(cls, d):
        schema = Schema.from_dict(d["schema"])
        parts = {part: {name: FieldVocab.from_dict(v) for name, v in d["vocabs"][part].items()}
                 for part in ("shared", "source", "target")}
        norms = {dom: Schema.from_dict(s) for dom, s in d["norms"].items()}
        return cls(schema, DomainVocabMap(**parts), d["extractor"], d["k"], d["t_max"], d["hidden"], norms,
                   d.get("shared_wide", True))
