"""Look-up embeddings for categorical and numerical fields.

All categorical fields of a table share one stacked parameter matrix; field
``i`` owns the rows ``offsets[i] .. offsets[i] + vocab_i.size``.  Row 0 of each
field block is its OOV row.  Each numerical field owns a single ``k``-vector
that is scaled by the (z-scored) value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape
from .data import FieldVocab, Schema

INIT_SCALE = 0.05


@dataclass
class DomainVocabMap:
    shared: dict[str, FieldVocab]
    source: dict[str, FieldVocab]
    target: dict[str, FieldVocab]

    def for_domain(self, domain):
        return self.source if domain == "source" else self.target


def vocab_from_values(schema: Schema, values_by_field: dict) -> dict[str, FieldVocab]:
    return {f.name: FieldVocab(values_by_field.get(f.name, f.vocab or [])) for f in schema.categorical}


def build_domain_vocabs(schema: Schema, src_values: dict, tgt_values: dict) -> DomainVocabMap:
    """Vocabularies for the shared table and both domain-specific tables.

    ``src_values``/``tgt_values`` map each categorical field to its list of
    observed values.  For fields flagged ``shared`` the shared table holds the
    union of both domains (a value present in both gets one row); for other
    fields it keeps separate, disjoint row ranges per domain.
    """
    shared, src, tgt = {}, {}, {}
    for f in schema.categorical:
        sv = list(src_values.get(f.name, []))
        tv = list(tgt_values.get(f.name, []))
        if f.shared:
            shared[f.name] = FieldVocab(sv + tv)
        else:
            shared[f.name] = FieldVocab([("source", v) for v in sv] + [("target", v) for v in tv],
                                        per_domain=True)
        src[f.name] = FieldVocab(sv)
        tgt[f.name] = FieldVocab(tv)
    return DomainVocabMap(shared, src, tgt)


def observed_values(schema: Schema, samples) -> dict[str, list]:
    out = {}
    for f in schema.categorical:
        seen = {}
        for s in samples:
            for e in (*s.history, s.target):
                v = e.get(f.name)
                if v is not None:
                    seen.setdefault(v, None)
        out[f.name] = list(seen)
    return out


class EmbeddingTable:
    """Field embeddings Φ, field-attention scalars a and (optionally) wide scalars c."""

    def __init__(self, prefix: str, schema: Schema, vocabs: dict[str, FieldVocab], k: int = 16,
                 wide: bool = True):
        self.prefix = prefix
        self.schema = schema
        self.vocabs = vocabs
        self.k = k
        self.has_wide = wide
        self.cat_fields = [f.name for f in schema.categorical]
        self.num_fields = [f.name for f in schema.numerical]
        sizes = [vocabs[name].size for name in self.cat_fields]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else np.zeros(0, np.int64)
        self.n_rows = int(sum(sizes))

    @property
    def n_fields(self):
        return len(self.cat_fields) + len(self.num_fields)

    @property
    def field_names(self):
        return self.cat_fields + self.num_fields

    def name(self, part):
        return f"{self.prefix}.{part}"

    def init(self, params: ParamStore, rng):
        k = self.k
        params.add(self.name("phi_cat"), rng.uniform(-INIT_SCALE, INIT_SCALE, (self.n_rows, k)))
        params.add(self.name("phi_num"), rng.uniform(-INIT_SCALE, INIT_SCALE, (len(self.num_fields), k)))
        params.add(self.name("att_cat"), np.zeros(self.n_rows))
        params.add(self.name("att_num"), np.zeros(len(self.num_fields)))
        if self.has_wide:
            params.add(self.name("wide_cat"), np.zeros(self.n_rows))
            params.add(self.name("wide_num"), np.zeros(len(self.num_fields)))
            params.add(self.name("wide_bias"), np.zeros(1))

    def field_rows(self, params: ParamStore, field: str, part="phi_cat"):
        i = self.cat_fields.index(field)
        lo = self.offsets[i]
        return params.value(self.name(part))[lo:lo + self.vocabs[field].size]

    def rows(self, cat):
        """Field-local indices -> rows of the stacked table."""
        cat = np.asarray(cat)
        sizes = np.array([self.vocabs[n].size for n in self.cat_fields])
        if cat.size and (cat.min() < 0 or np.any(cat >= sizes)):
            raise IndexError(f"{self.prefix}: encoded index out of range for its field vocabulary")
        return cat + self.offsets

    def embed(self, tape: Tape, cat, num, mask=None):
        """Field vectors ``(..., n, k)`` and attention logits ``(..., n)``.

        Categorical field -> row Φ_i[x]; numerical field -> x · Φ_i.  Masked
        (padded) events get all-zero vectors.
        """
        rows = self.rows(cat)
        lead = rows.shape[:-1]
        parts_v, parts_a = [], []
        if self.cat_fields:
            parts_v.append(tape.gather(tape.param(self.name("phi_cat")), rows))
            parts_a.append(tape.gather(tape.param(self.name("att_cat")), rows))
        if self.num_fields:
            x = np.asarray(num, dtype=np.float64)[..., None]
            parts_v.append(tape.mul(tape.const(x), tape.param(self.name("phi_num"))))
            ones = np.ones(lead + (1,))
            parts_a.append(tape.mul(tape.const(ones), tape.param(self.name("att_num"))))
        v = parts_v[0] if len(parts_v) == 1 else tape.concat(parts_v, axis=-2)
        a = parts_a[0] if len(parts_a) == 1 else tape.concat(parts_a, axis=-1)
        if mask is not None:
            v = tape.mul(v, tape.const(np.asarray(mask, dtype=np.float64)[..., None, None]))
        return v, a

    def wide(self, tape: Tape, cat_t, num_t):
        """First-order logit term Σ_i c_i(x_i) + c_0 for target events ``(B,)``."""
        terms = []
        if self.cat_fields:
            rows = self.rows(cat_t)
            terms.append(tape.sum(tape.gather(tape.param(self.name("wide_cat")), rows), axis=-1))
        if self.num_fields:
            w = tape.reshape(tape.param(self.name("wide_num")), (len(self.num_fields), 1))
            lin = tape.matmul(tape.const(np.asarray(num_t, dtype=np.float64)), w)
            terms.append(tape.reshape(lin, lin.shape[:-1]))
        out = tape.add(terms[0], terms[1]) if len(terms) == 2 else terms[0]
        return tape.add(out, tape.param(self.name("wide_bias")))

    def to_dict(self):
        return {
            "prefix": self.prefix,
            "k": self.k,
            "wide": self.has_wide,
            "vocabs": {name: v.to_dict() for name, v in self.vocabs.items()},
        }

    @classmethod
    def from_dict(cls, d, schema: Schema):
        vocabs = {name: FieldVocab.from_dict(v) for name, v in d["vocabs"].items()}
        return cls(d["prefix"], schema, vocabs, d["k"], d["wide"])
