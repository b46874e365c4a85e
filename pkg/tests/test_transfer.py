import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import special_ortho_group

from henfd.autodiff import ParamStore, Tape
from henfd.data import Dataset
from henfd.embedding import build_domain_vocabs
from henfd.trainer import TrainConfig, train_supervised, train_transfer
from henfd.transfer import (TransferModel, alignment_loss, batch_class_stats, ced, class_distance,
                            domain_attention, euclidean_alignment, lambda_schedule, normalize_mode)

from conftest import make_samples, small_schema

SRC = {"card": ["c0", "c1", "c2", "c3"], "ip": ["i0", "i1", "i2"]}
TGT = {"card": ["c1", "c2", "c3", "c9"], "ip": ["i0", "i1"]}


def build(seed=0, extractor="hen", scale=0.3):
    schema = small_schema()
    model = TransferModel(schema, build_domain_vocabs(schema, SRC, TGT), extractor, k=4, t_max=4, hidden=6)
    params = ParamStore()
    model.init(params, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 100)
    for _, p in params.items():
        p.value[...] = r.normal(scale=scale, size=p.value.shape)
    return model, params


def joint_batch(model, seed=0, n_src=6, n_tgt=5):
    rng = np.random.default_rng(seed)
    src = make_samples(rng, n_src, "source")
    tgt = make_samples(rng, n_tgt, "target", n_card=4)
    for i, s in enumerate(src + tgt):
        s.label = i % 2
    return model.make_batch(model.encode_views(src, "source"), model.encode_views(tgt, "target")), src, tgt


def stats_1d(s0, s1, t0, t1, d=1):
    """Two points per cell placed symmetrically around the requested means."""
    z, dom, lab = [], [], []
    for (domain, label), m in zip((("source", 0), ("source", 1), ("target", 0), ("target", 1)), (s0, s1, t0, t1)):
        m = np.atleast_1d(np.asarray(m, dtype=float)) * np.ones(d)
        z += [m + 0.3, m - 0.3]
        dom += [domain] * 2
        lab += [label] * 2
    return np.array(z), np.array(dom), np.array(lab)


def ced_value(z, dom, lab):
    t = Tape()
    return float(ced(t, batch_class_stats(t, t.const(z), dom, lab)).value)


class TestBranches:
    def test_routing_by_domain(self):
        model, params = build()
        _, src, tgt = joint_batch(model)
        tape = Tape(params)
        _, _, traces = model.branch_forward(tape, model.batch_for(tgt, "target"))
        assert "target" in traces and "source" not in traces
        used = {n.param_name for n in tape.nodes if n.op == "param"}
        assert not any(name.startswith(("ext_src.", "src.")) for name in used)

    def test_branches_match_standalone_extractors(self):
        model, params = build(seed=3)
        batch, src, tgt = joint_batch(model, seed=3)
        z_share, z_spe, _ = model.branch_forward(Tape(params), batch)
        t = Tape(params)
        want_share = model.ext_shared(t, model.shared, batch.shared)[0].value
        want_src = model.ext_specific["source"](t, model.specific["source"], batch.source)[0].value
        want_tgt = model.ext_specific["target"](t, model.specific["target"], batch.target)[0].value
        np.testing.assert_array_equal(z_share.value, want_share)
        np.testing.assert_array_equal(z_spe.value, np.vstack([want_src, want_tgt]))

    def test_identical_parameters_identical_output(self):
        model, params = build(seed=5)
        for name in params.names():
            if name.startswith("ext_shared."):
                params.value(name.replace("ext_shared.", "ext_tgt."))[...] = params.value(name)
        _, _, tgt = joint_batch(model, seed=5)
        view = model.encode_views(tgt, "target")[0]
        t = Tape(params)
        a = model.ext_shared(t, model.shared, view)[0].value
        b = model.ext_specific["target"](t, model.shared, view)[0].value
        np.testing.assert_array_equal(a, b)

    def test_hen_representation_is_history_and_target(self):
        model, _ = build()
        assert model.d_z == 2 * model.k

    def test_foreign_domain_rejected(self):
        model, _ = build()
        src = make_samples(np.random.default_rng(0), 2, "source")
        with pytest.raises(ValueError, match="expected 'target'"):
            model.encode_views(src, "target")


class TestDomainAttention:
    def run(self, zs, zp, g1, b1, g2, g3, k):
        t = Tape()
        z, b = domain_attention(t, t.const(zs), t.const(zp), t.const(g1), t.const(b1), t.const(g2), t.const(g3), k)
        return z.value, b.value

    def test_equal_scores_mean_projection(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 4))
        g1, b1 = rng.normal(size=(4, 4)), rng.normal(size=4)
        out, b = self.run(z, -z, g1, b1, np.eye(4), np.eye(4), 4)
        np.testing.assert_allclose(b, 0.5, rtol=1e-15)
        np.testing.assert_allclose(out, 0.5 * ((z @ g1 + b1) + (-z @ g1 + b1)), rtol=1e-12, atol=1e-14)

    def test_zero_specific_representation(self):
        rng = np.random.default_rng(1)
        zs = rng.normal(size=(2, 4))
        g2, g3 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        _, b = self.run(zs, np.zeros((2, 4)), np.eye(4), np.zeros(4), g2, g3, 4)
        score = np.einsum("ij,ij->i", zs @ g2, zs @ g3) / 2.0
        np.testing.assert_allclose(b[:, 0], 1 / (1 + np.exp(-score)), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_hand_composition(self, seed):
        rng = np.random.default_rng(seed)
        zs, zp = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        g1, b1, g2, g3 = (rng.normal(size=s) for s in ((6, 6), 6, (6, 6), (6, 6)))
        out, b = self.run(zs, zp, g1, b1, g2, g3, 6)
        for i in range(5):
            bs = (zs[i] @ g2) @ (zs[i] @ g3) / math.sqrt(6)
            bp = (zp[i] @ g2) @ (zp[i] @ g3) / math.sqrt(6)
            ws = math.exp(bs) / (math.exp(bs) + math.exp(bp))
            np.testing.assert_allclose(b[i], [ws, 1 - ws], rtol=1e-12)
            np.testing.assert_allclose(out[i], ws * (zs[i] @ g1 + b1) + (1 - ws) * (zp[i] @ g1 + b1),
                                       rtol=1e-11, atol=1e-12)

    @given(arrays(np.float64, (4, 3), elements=st.floats(-4, 4)), arrays(np.float64, (4, 3), elements=st.floats(-4, 4)))
    def test_weights_are_simplex(self, zs, zp):
        _, b = self.run(zs, zp, np.eye(3), np.zeros(3), np.eye(3), 2 * np.eye(3), 3)
        assert np.all(b >= 0)
        np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-12)


class TestClassDistance:
    def dist(self, z, dom, lab, a, b):
        t = Tape()
        return float(class_distance(t, batch_class_stats(t, t.const(z), dom, lab), *a, *b).value)

    def test_identical_means(self):
        z, dom, lab = stats_1d(0.7, 0.7, 0, 0)
        assert self.dist(z, dom, lab, ("source", 0), ("source", 1)) == 0.0

    def test_unit_gap(self):
        z, dom, lab = stats_1d(0, 1, 0, 0)
        assert self.dist(z, dom, lab, ("source", 0), ("source", 1)) == pytest.approx(1.0, abs=1e-15)

    def test_three_four_five(self):
        z = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0], [1.0, 1.0]])
        dom = np.array(["source", "source", "target", "target"])
        lab = np.array([0, 1, 0, 1])
        assert self.dist(z, dom, lab, ("source", 0), ("source", 1)) == 25.0

    def test_empty_cell_rejected(self):
        z = np.zeros((2, 2))
        with pytest.raises(ValueError, match="empty"):
            self.dist(z, np.array(["source", "source"]), np.array([0, 1]), ("source", 0), ("target", 1))


class TestCED:
    def test_aligned_classes_zero(self):
        assert ced_value(*stats_1d(0, 1, 0, 1)) == 0.0

    def test_hand_case(self):
        assert ced_value(*stats_1d(0, 1, 0.5, 1.5)) == pytest.approx(1 / 9, abs=1e-12)

    @pytest.mark.parametrize("alpha", [0.1, 3.0, 10.0])
    def test_scale_invariant(self, alpha):
        z, dom, lab = stats_1d([0, 1], [1, 2], [0.5, -1], [1.5, 0.3], d=2)
        assert ced_value(alpha * z, dom, lab) == pytest.approx(ced_value(z, dom, lab), rel=1e-9)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(16, 5))
        dom = np.repeat(["source", "target"], 8)
        lab = np.tile([0, 1], 8)
        q = special_ortho_group.rvs(5, random_state=3)
        assert ced_value(z @ q, dom, lab) == pytest.approx(ced_value(z, dom, lab), rel=1e-10)

    def test_collapsed_batch_uses_floor(self):
        z, dom, lab = stats_1d(1, 1, 1, 1)
        assert ced_value(z, dom, lab) == 0.0

    def test_missing_cell_rejected(self):
        z, dom, lab = stats_1d(0, 1, 0, 1)
        with pytest.raises(ValueError, match="target/1"):
            ced_value(z[:6], dom[:6], lab[:6])

    @given(arrays(np.float64, (8, 3), elements=st.floats(-10, 10)))
    def test_non_negative(self, z):
        dom = np.repeat(["source", "target"], 4)
        lab = np.tile([0, 1], 4)
        assert ced_value(z, dom, lab) >= 0.0


class TestEuclidean:
    def ed(self, z, dom):
        t = Tape()
        return float(euclidean_alignment(t, t.const(z), dom).value)

    def test_equal_means(self):
        assert self.ed(np.array([[1.0], [3.0], [2.0]]), np.array(["source", "source", "target"])) == 0.0

    def test_means_zero_and_two(self):
        assert self.ed(np.array([[-1.0], [1.0], [2.0]]), np.array(["source", "source", "target"])) == 4.0

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(11, 4))
        dom = np.array(["source"] * 6 + ["target"] * 5)
        mu_s = [sum(z[i, j] for i in range(6)) / 6 for j in range(4)]
        mu_t = [sum(z[i, j] for i in range(6, 11)) / 5 for j in range(4)]
        want = sum((a - b) ** 2 for a, b in zip(mu_s, mu_t))
        assert self.ed(z, dom) == pytest.approx(want, rel=1e-12)

    def test_integer_domain_codes(self):
        assert self.ed(np.array([[0.0], [2.0]]), np.array([0, 1])) == 4.0

    def test_single_domain_rejected(self):
        with pytest.raises(ValueError, match="no target"):
            self.ed(np.zeros((2, 1)), np.array(["source", "source"]))

    def test_unknown_alignment(self):
        t = Tape()
        with pytest.raises(ValueError, match="unknown alignment"):
            alignment_loss(t, t.const(np.zeros((2, 1))), ["source", "target"], [0, 1], "mmd")


class TestLoss:
    def test_lambda_zero_is_classification_loss(self):
        model, params = build(seed=1)
        batch, _, _ = joint_batch(model, seed=1)
        loss, _, comps = model.loss(Tape(params), batch, lam=0.0)
        assert float(loss.value) == comps["cls"] and comps["da"] > 0

    def test_components_sum(self):
        model, params = build(seed=2)
        batch, _, _ = joint_batch(model, seed=2)
        loss, y, comps = model.loss(Tape(params), batch, lam=0.37)
        t = Tape(params)
        z = model.forward(t, batch)[1]["z"]
        da = float(ced(t, batch_class_stats(t, z, batch.domains, batch.labels)).value)
        labels = batch.labels
        p = np.clip(y.value, 1e-12, 1 - 1e-12)
        cls = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
        assert comps["da"] == pytest.approx(da, rel=1e-12)
        assert comps["cls"] == pytest.approx(cls, rel=1e-12)
        assert float(loss.value) == pytest.approx(cls + 0.37 * da, rel=1e-12)

    def test_aligned_class_means_add_nothing(self):
        model, params = build(seed=4)
        batch, _, _ = joint_batch(model, seed=4)
        # zero every weight feeding z so all representations collapse to g1.b
        for name in params.names():
            if name.startswith(("ext_", "dom.g1.w")):
                params.value(name)[...] = 0.0
        _, _, comps = model.loss(Tape(params), batch, lam=0.9)
        assert comps["da"] <= 1e-15
        assert comps["loss"] == pytest.approx(comps["cls"], abs=1e-14)

    def test_gradient_routing(self):
        model, params = build(seed=6)
        _, src, tgt = joint_batch(model, seed=6)

        def touched(samples, domain):
            params.zero_grad()
            t = Tape(params)
            loss, _, _ = model.loss(t, model.batch_for(samples, domain), align="none")
            t.backward(loss)
            return {n for n, p in params.items() if np.any(p.grad != 0)}

        on_tgt, on_src = touched(tgt, "target"), touched(src, "source")
        for hit, own, other in ((on_tgt, "ext_tgt.", "ext_src."), (on_src, "ext_src.", "ext_tgt.")):
            assert any(n.startswith("ext_shared.") for n in hit)
            assert any(n.startswith(own) for n in hit)
            assert not any(n.startswith(other) for n in hit)

    def test_joint_gradient_reaches_both_specific_branches(self):
        model, params = build(seed=7)
        batch, _, _ = joint_batch(model, seed=7)
        params.zero_grad()
        t = Tape(params)
        t.backward(model.loss(t, batch, lam=0.5)[0])
        for prefix in ("ext_src.", "ext_tgt.", "ext_shared."):
            assert any(np.any(p.grad != 0) for n, p in params.items() if n.startswith(prefix))


class TestLambda:
    def test_anchors(self):
        assert lambda_schedule(0.0) == 0.0
        assert lambda_schedule(1.0) == pytest.approx(0.99991, abs=1e-5)
        assert lambda_schedule(0.5) == pytest.approx(0.9866, abs=1e-4)

    def test_clamped(self):
        assert lambda_schedule(-3) == 0.0 and lambda_schedule(7) == lambda_schedule(1)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert lambda_schedule(lo) <= lambda_schedule(hi)


def test_mode_names():
    assert normalize_mode("pretrain_finetune") == "pretrain"
    with pytest.raises(ValueError):
        normalize_mode("adversarial")


def test_target_only_equals_plain_supervised():
    rng = np.random.default_rng(0)
    schema = small_schema()
    train = Dataset(schema, make_samples(rng, 60, "target"))
    val = Dataset(schema, make_samples(rng, 30, "target"))
    src = Dataset(schema, make_samples(rng, 30, "source"))
    cfg = TrainConfig(k=4, hidden=8, batch_size=16, max_epochs=2, t_max=4, seed=3)
    a = train_supervised(cfg, train, val)
    b = train_transfer(cfg.override(mode="target_only"), src, src, train, val)
    assert a.step_losses == b.step_losses
    assert a.params.checksum() == b.params.checksum()


def test_roundtrip_dict():
    model, params = build(extractor="fm")
    back = TransferModel.from_dict(model.to_dict())
    _, _, tgt = joint_batch(model)
    np.testing.assert_array_equal(model.scores(params, tgt), back.scores(params, tgt))
    assert back.shared_wide == model.shared_wide
