"""Non-hierarchical behavior-sequence extractors.

Both consume every field vector of every event (history and target) at once,
in the fixed ``(T, n)`` layout produced by :func:`henfd.data.encode`.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore, Tape
from .embedding import INIT_SCALE, EmbeddingTable


def dense_extract(tape: Tape, v, w, b):
    """relu(W · concat(field vectors) + b) for ``v`` of shape ``(B, T, n, k)``."""
    batch = v.shape[0]
    flat = tape.reshape(v, (batch, -1))
    if flat.shape[1] != w.shape[0]:
        raise ValueError(f"dense extractor expects {w.shape[0]} inputs per sample, got {flat.shape[1]}")
    return tape.relu(tape.add(tape.matmul(flat, w), b))


def fm_extract(tape: Tape, v):
    """Pairwise-interaction pooling ½[(Σv)² − Σv²] over all events and fields.

    Padded events must already be zero vectors.
    """
    axes = tuple(range(1, v.value.ndim - 1))
    total = tape.sum(v, axis=axes)
    sq = tape.sum(tape.square(v), axis=axes)
    return tape.scale(tape.sub(tape.square(total), sq), 0.5)


class DenseExtractor:
    kind = "dense"

    def __init__(self, prefix, k, n_fields, t_max):
        self.prefix, self.k, self.n_fields, self.t_max = prefix, k, n_fields, t_max
        self.out_dim = k

    def init(self, params: ParamStore, rng):
        d_in = self.t_max * self.n_fields * self.k
        params.add(f"{self.prefix}.dense.w", rng.uniform(-INIT_SCALE, INIT_SCALE, (d_in, self.k)))
        params.add(f"{self.prefix}.dense.b", np.zeros(self.k))

    def __call__(self, tape: Tape, table: EmbeddingTable, enc):
        v, _ = table.embed(tape, enc.cat, enc.num, enc.mask)
        z = dense_extract(tape, v, tape.param(f"{self.prefix}.dense.w"), tape.param(f"{self.prefix}.dense.b"))
        return z, {}


class FMExtractor:
    kind = "fm"

    def __init__(self, prefix, k, n_fields, t_max):
        self.prefix, self.k = prefix, k
        self.out_dim = k

    def init(self, params: ParamStore, rng):
        pass

    def __call__(self, tape: Tape, table: EmbeddingTable, enc):
        v, _ = table.embed(tape, enc.cat, enc.num, enc.mask)
        return fm_extract(tape, v), {}
