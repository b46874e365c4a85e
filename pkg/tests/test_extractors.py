import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from henfd.autodiff import Tape
from henfd.extractors import DenseExtractor, FMExtractor, dense_extract, fm_extract
from henfd.hen import make_extractor


def dense(v, w, b):
    t = Tape()
    return dense_extract(t, t.const(v), t.const(w), t.const(b)).value


def fm(v):
    t = Tape()
    return fm_extract(t, t.const(v)).value


class TestDense:
    def test_zero_weights_zero_bias(self):
        v = np.random.default_rng(0).normal(size=(2, 3, 2, 4))
        assert np.all(dense(v, np.zeros((24, 5)), np.zeros(5)) == 0.0)

    def test_two_unit_inputs(self):
        v = np.ones((1, 1, 2, 1))
        assert dense(v, np.ones((2, 1)), np.array([1.0]))[0, 0] == 3.0

    def test_negative_preactivation_clipped(self):
        v = np.ones((1, 1, 2, 1))
        assert dense(v, -np.ones((2, 1)), np.zeros(1))[0, 0] == 0.0

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=(3, 4, 2, 5))
        w, b = rng.normal(size=(40, 6)), rng.normal(size=6)
        want = np.zeros((3, 6))
        for i in range(3):
            x = [v[i, t, f, j] for t in range(4) for f in range(2) for j in range(5)]
            for o in range(6):
                want[i, o] = max(0.0, sum(x[q] * w[q, o] for q in range(40)) + b[o])
        np.testing.assert_allclose(dense(v, w, b), want, rtol=1e-12, atol=1e-12)

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError, match="expects"):
            dense(np.ones((1, 2, 2, 2)), np.ones((7, 2)), np.zeros(2))


class TestFM:
    def test_single_vector_has_no_pairs(self):
        v = np.zeros((1, 1, 1, 3))
        v[0, 0, 0] = [1.5, -2.0, 4.0]
        assert np.all(fm(v) == 0.0)

    def test_two_scalars(self):
        v = np.array([2.0, 3.0]).reshape(1, 2, 1, 1)
        assert fm(v)[0, 0] == 6.0

    def test_matches_pairwise_sum(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(2, 3, 4, 5))
        for i in range(2):
            flat = v[i].reshape(-1, 5)
            want = sum(flat[a] * flat[b] for a in range(len(flat)) for b in range(a + 1, len(flat)))
            np.testing.assert_allclose(fm(v)[i], want, rtol=1e-12, atol=1e-12)

    @given(arrays(np.float64, (1, 3, 2, 4), elements=st.floats(-3, 3)), st.integers(1, 4))
    def test_zero_padding_invariant(self, v, pad):
        padded = np.concatenate([np.zeros((1, pad, 2, 4)), v], axis=1)
        np.testing.assert_allclose(fm(padded), fm(v), rtol=1e-12, atol=1e-12)

    @given(arrays(np.float64, (1, 4, 2, 3), elements=st.floats(-3, 3)), st.permutations(range(4)))
    def test_event_order_invariant(self, v, perm):
        np.testing.assert_allclose(fm(v[:, list(perm)]), fm(v), rtol=1e-12, atol=1e-11)


@pytest.mark.parametrize("kind, cls", [("dense", DenseExtractor), ("fm", FMExtractor)])
def test_factory_and_output_width(kind, cls):
    ext = make_extractor(kind, "x", 16, 3, 10)
    assert isinstance(ext, cls) and ext.out_dim == 16
