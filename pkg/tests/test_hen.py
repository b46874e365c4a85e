import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from henfd.autodiff import ParamStore, Tape, grad_check
from henfd.data import Sample, encode
from henfd.embedding import EmbeddingTable, vocab_from_values
from henfd.hen import HENModel, event_extract, field_extract, make_extractor, nll_loss
from henfd.selftest import fm_equivalence, naive_event_embedding

from conftest import make_samples, small_schema

VALUES = {"card": [f"c{i}" for i in range(4)], "ip": [f"i{i}" for i in range(3)]}


def build_model(extractor="hen", k=4, t_max=4, hidden=6, seed=0, scale=None):
    schema = small_schema()
    table = EmbeddingTable("emb", schema, vocab_from_values(schema, VALUES), k)
    model = HENModel(schema, table, extractor, t_max, hidden)
    params = ParamStore()
    model.init(params, np.random.default_rng(seed))
    if scale is not None:
        r = np.random.default_rng(seed + 1)
        for _, p in params.items():
            p.value[...] = r.normal(scale=scale, size=p.value.shape)
    return model, params


def softmax(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max())
    return e / e.sum()


def reference_prediction(model, params, sample):
    """Straight-line evaluation of the network for one sample, written without the tape."""
    P = {n: p.value for n, p in params.items()}
    table, k = model.table, model.k

    def field_vectors(event):
        vs, att = [], []
        for i, name in enumerate(table.cat_fields):
            row = table.offsets[i] + table.vocabs[name].lookup(event.get(name))
            vs.append(P["emb.phi_cat"][row])
            att.append(P["emb.att_cat"][row])
        for j, name in enumerate(table.num_fields):
            x = event.get(name)
            x = 0.0 if x is None else x
            vs.append(x * P["emb.phi_num"][j])
            att.append(P["emb.att_num"][j])
        return np.array(vs), np.array(att)

    def event_embedding(event):
        v, a = field_vectors(event)
        w = softmax(a)
        e = sum(w[i] * v[i] for i in range(len(v)))
        for i in range(len(v)):
            for j in range(i + 1, len(v)):
                e = e + v[i] * v[j]
        return e

    hist = sample.history[-(model.t_max - 1):]
    e_t = event_embedding(sample.target)
    if hist:
        E = np.array([event_embedding(ev) for ev in hist])
        scores = [(E[t] @ P["ext.f2.w"]) @ (E[t] @ P["ext.f3.w"]) / math.sqrt(k) for t in range(len(E))]
        u = softmax(scores)
        s = sum(u[t] * (E[t] @ P["ext.f1.w"] + P["ext.f1.b"]) for t in range(len(E)))
    else:
        s = np.zeros(k)
    h = np.concatenate([s, e_t])
    h = np.maximum(h @ P["mlp.w1"] + P["mlp.b1"], 0)
    h = np.maximum(h @ P["mlp.w2"] + P["mlp.b2"], 0)
    out = float(h @ P["mlp.w3"][:, 0] + P["mlp.b3"][0])
    wide = P["emb.wide_bias"][0]
    for i, name in enumerate(table.cat_fields):
        wide += P["emb.wide_cat"][table.offsets[i] + table.vocabs[name].lookup(sample.target.get(name))]
    for j, name in enumerate(table.num_fields):
        wide += (sample.target.get(name) or 0.0) * P["emb.wide_num"][j]
    return 1.0 / (1.0 + math.exp(-(out + wide)))


class TestFieldExtract:
    def run(self, v, a):
        t = Tape()
        e, w = field_extract(t, t.const(v), t.const(a))
        return e.value, w.value

    def test_single_field(self):
        v = np.array([[0.3, -1.0, 2.0]])
        e, w = self.run(v, np.array([0.7]))
        np.testing.assert_array_equal(w, [1.0])
        np.testing.assert_array_equal(e, v[0])

    def test_two_scalar_fields(self):
        e, _ = self.run(np.array([[2.0], [3.0]]), np.zeros(2))
        assert e[0] == pytest.approx(8.5, abs=1e-14)

    def test_linear_form_matches_pairwise(self):
        rng = np.random.default_rng(8)
        v, a = rng.normal(size=(8, 16)), rng.normal(size=8)
        e, _ = self.run(v, a)
        ref = naive_event_embedding(v, a)
        assert np.abs(e - ref).max() <= 1e-9 * np.abs(ref).max()

    def test_thousand_instances_relative_error(self):
        assert fm_equivalence(1000) <= 1e-9

    @given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)), arrays(np.float64, 6, elements=st.floats(-3, 3)),
           st.permutations(range(6)))
    def test_permutation_invariant(self, v, a, perm):
        e1, w1 = self.run(v, a)
        e2, w2 = self.run(v[list(perm)], a[list(perm)])
        np.testing.assert_allclose(e1, e2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(w1[list(perm)], w2, rtol=1e-12, atol=1e-15)
        assert abs(w1.sum() - 1) <= 1e-12


class TestEventExtract:
    def run(self, e, mask, k, w1=None, b1=None, w2=None, w3=None):
        eye = np.eye(k)
        t = Tape()
        s, u = event_extract(t, t.const(e), mask, t.const(eye if w1 is None else w1),
                             t.const(np.zeros(k) if b1 is None else b1), t.const(eye if w2 is None else w2),
                             t.const(eye if w3 is None else w3), k)
        return s.value, u.value

    def test_single_valid_event(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(1, 3, 4))
        w1, b1 = rng.normal(size=(4, 4)), rng.normal(size=4)
        s, u = self.run(e, np.array([[False, False, True]]), 4, w1, b1, rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(u, [[0, 0, 1]])
        np.testing.assert_allclose(s[0], e[0, 2] @ w1 + b1, rtol=1e-14)

    def test_identical_events_split_evenly(self):
        e = np.tile(np.random.default_rng(1).normal(size=4), (1, 2, 1))
        _, u = self.run(e, np.ones((1, 2), bool), 4)
        np.testing.assert_allclose(u, [[0.5, 0.5]], rtol=1e-15)

    def test_hand_case_identity_maps(self):
        e = np.zeros((1, 2, 16))
        e[0, 0, 0], e[0, 1, 0] = 1.0, 2.0
        s, u = self.run(e, np.ones((1, 2), bool), 16)
        expected = np.exp([0.25, 1.0]) / np.exp([0.25, 1.0]).sum()
        np.testing.assert_allclose(u[0], expected, rtol=1e-14)
        assert u[0, 0] == pytest.approx(0.3208, abs=1e-4)
        np.testing.assert_allclose(s[0], expected[0] * e[0, 0] + expected[1] * e[0, 1], rtol=1e-14)

    def test_no_history_gives_zero(self):
        s, u = self.run(np.ones((1, 3, 4)), np.zeros((1, 3), bool), 4)
        assert np.all(s == 0) and np.all(u == 0)

    @given(arrays(np.float64, (2, 5, 3), elements=st.floats(-2, 2)), arrays(bool, (2, 5)))
    def test_weights_are_simplex(self, e, mask):
        _, u = self.run(e, mask, 3)
        assert np.all(u >= 0) and np.all(u[~mask] == 0)
        for row, m in zip(u, mask):
            assert abs(row.sum() - (1.0 if m.any() else 0.0)) <= 1e-12


class TestNLL:
    def loss(self, y, labels):
        t = Tape()
        return float(nll_loss(t, t.const(y), labels).value)

    def test_half_is_ln2(self):
        assert self.loss([0.5] * 4, [1, 0, 0, 1]) == pytest.approx(math.log(2), abs=1e-15)

    def test_exact_predictions_clamped(self):
        assert self.loss([1.0, 0.0], [1, 0]) <= 1e-11

    def test_hand_case(self):
        assert self.loss([0.9, 0.2], [1, 0]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)
        assert self.loss([0.9, 0.2], [1, 0]) == pytest.approx(0.1643, abs=1e-4)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            self.loss([], [])


class TestModel:
    def test_zero_head_and_wide_predicts_half(self, rng):
        model, params = build_model()
        for name in ("emb.att_cat", "emb.att_num", "emb.wide_cat", "emb.wide_num", "emb.wide_bias"):
            params.value(name)[...] = 0.0
        for name in params.names():
            if name.startswith(("mlp.", "ext.")):
                params.value(name)[...] = 0.0
        scores = model.scores(params, model.encode(make_samples(rng, 20)))
        assert np.all(scores == 0.5)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_straight_line_reference(self, seed):
        model, params = build_model(seed=seed, scale=0.4)
        samples = make_samples(np.random.default_rng(seed), 12, t_max=6)
        samples.append(Sample([], {"card": "unseen", "ip": "i1", "amount": None}, 0))
        got = model.scores(params, model.encode(samples))
        want = [reference_prediction(model, params, s) for s in samples]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_padding_event_changes_nothing(self):
        model, params = build_model(scale=0.4)
        s = make_samples(np.random.default_rng(2), 1, t_max=3)[0]
        s.history = s.history[:1] or [dict(s.target)]
        enc = model.encode([s])
        tape = Tape(params)
        y1, tr1 = model.forward(tape, enc)
        # same sample under a longer window: one extra padded slot
        wider = HENModel(model.schema, model.table, "hen", model.t_max + 1, model.hidden)
        enc2 = wider.encode([s])
        y2, tr2 = wider.forward(Tape(params), enc2)
        assert y1.value[0] == pytest.approx(y2.value[0], rel=1e-14)
        u1 = tr1["event_attention"].value[0][enc.mask[0, :-1]]
        u2 = tr2["event_attention"].value[0][enc2.mask[0, :-1]]
        np.testing.assert_allclose(u1, u2, rtol=1e-14)

    def test_predict_deterministic_without_dropout(self):
        model, params = build_model(scale=0.4)
        s = make_samples(np.random.default_rng(0), 1)[0]
        before = params.checksum()
        a, _ = model.predict(s, params)
        b, trace = model.predict(s, params)
        assert a == b and params.checksum() == before
        assert abs(trace.field_attention.sum(axis=-1)[trace.mask] - 1).max() <= 1e-12

    def test_dropout_in_training_mode_varies(self):
        model, params = build_model(scale=0.4)
        s = make_samples(np.random.default_rng(0), 1)[0]
        outs = {model.predict(s, params, train_mode=True, rng=np.random.default_rng(i))[0] for i in range(6)}
        assert len(outs) > 1

    @pytest.mark.parametrize("extractor", ["hen", "dense", "fm"])
    def test_full_loss_gradient(self, extractor):
        model, params = build_model(extractor, scale=0.5)
        enc = model.encode(make_samples(np.random.default_rng(3), 3, t_max=4))
        err = grad_check(lambda t: model.loss(t, enc)[0], params)
        assert err <= 1e-4

    def test_roundtrip_dict(self):
        model, params = build_model("fm")
        back = HENModel.from_dict(model.to_dict())
        enc = model.encode(make_samples(np.random.default_rng(0), 5))
        np.testing.assert_array_equal(model.scores(params, enc), back.scores(params, back.encode(
            make_samples(np.random.default_rng(0), 5))))

    def test_unknown_extractor(self):
        with pytest.raises(ValueError, match="unknown extractor"):
            make_extractor("lstm", "x", 4, 3, 4)

    def test_oov_row_used_for_unseen_values(self):
        model, _ = build_model()
        enc = encode([Sample([], {"card": "zzz", "ip": "i0", "amount": 0.0}, 0)], model.schema, model.table.vocabs, 2)
        assert enc.cat[0, -1, 0] == 0 and enc.cat[0, -1, 1] == 1
