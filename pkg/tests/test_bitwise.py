import numpy as np
import pytest

from edgewise.bitwise import (
    IncompatibleGroupingError,
    LengthMismatchError,
    PackedVector,
    QuantizedActivation,
    multibit_dot,
    multibit_matvec,
    pm1_dot,
)
from edgewise.mbq import GroupedLayer, GroupingStructure, QuantGroup, reconstruct, sketch_layer
from edgewise.numerics import make_rng


def random_pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8)


def random_activation(rng, n, bits):
    return QuantizedActivation(float(rng.uniform(0, 1)), random_pm1(rng, (n, bits)), rng.uniform(0.1, 1, bits))


class TestPm1Dot:
    def test_equal(self):
        a = PackedVector.pack([1, -1, 1, 1, -1])
        assert pm1_dot(a, a) == 5

    def test_opposite(self):
        v = np.array([1, -1, 1, 1, -1])
        assert pm1_dot(PackedVector.pack(v), PackedVector.pack(-v)) == -5

    def test_balanced(self):
        assert pm1_dot(PackedVector.pack([1, -1, 1, -1]), PackedVector.pack([1, 1, -1, -1])) == 0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            pm1_dot(PackedVector.pack([1, 1]), PackedVector.pack([1, 1, 1]))

    @pytest.mark.parametrize("word_bits", [32, 64])
    def test_matches_naive_all_lengths(self, word_bits):
        rng = make_rng(word_bits)
        for n in range(1, 131):
            for _ in range(5):
                a, b = random_pm1(rng, n), random_pm1(rng, n)
                got = pm1_dot(PackedVector.pack(a, word_bits), PackedVector.pack(b, word_bits))
                assert got == int(a.astype(int) @ b.astype(int))

    def test_unpack(self):
        v = random_pm1(make_rng(0), 77)
        assert np.array_equal(PackedVector.pack(v).unpack(), v)


class TestMultibitDot:
    def test_empty_group(self):
        g = QuantGroup(np.zeros((4, 0), np.int8), np.zeros(0))
        assert multibit_dot(g, random_activation(make_rng(0), 4, 2)) == 0.0

    def test_constant_activation(self):
        rng = make_rng(1)
        g = QuantGroup(random_pm1(rng, (8, 2)), np.array([0.7, 0.2]))
        act = QuantizedActivation(0.5, random_pm1(rng, (8, 2)), np.zeros(2))
        expected = 0.5 * sum(a * g.basis[:, i].sum() for i, a in enumerate(g.alpha))
        assert multibit_dot(g, act) == pytest.approx(expected, abs=1e-12)

    def test_dense_oracle(self):
        rng = make_rng(2)
        g = QuantGroup(random_pm1(rng, (64, 2)), rng.uniform(0.1, 1, 2))
        act = random_activation(rng, 64, 2)
        assert multibit_dot(g, act) == pytest.approx(float(reconstruct(g) @ act.values()), abs=1e-9)

    def test_length_mismatch(self):
        rng = make_rng(3)
        with pytest.raises(LengthMismatchError):
            multibit_dot(QuantGroup(random_pm1(rng, (4, 1)), np.ones(1)), random_activation(rng, 5, 1))


class TestMatvec:
    def test_exact_rows(self):
        rng = make_rng(4)
        basis = random_pm1(rng, (3, 16, 2))
        alpha = np.array([[1.0, 0.5], [0.25, 0.125], [2.0, 1.0]])
        layer = GroupedLayer((3, 16), GroupingStructure("channelwise"), basis, alpha, np.ones((3, 2), bool))
        act = random_activation(rng, 16, 2)
        out, _ = multibit_matvec(layer, act)
        assert np.allclose(out, layer.dense() @ act.values(), atol=1e-12)

    def test_zero_activation(self):
        rng = make_rng(5)
        layer = sketch_layer(rng.standard_normal((4, 32)), GroupingStructure("channelwise"), 3)
        act = QuantizedActivation(0.0, random_pm1(rng, (32, 2)), np.zeros(2))
        out, _ = multibit_matvec(layer, act)
        assert np.array_equal(out, np.zeros(4))

    def test_mnist_shaped_layer(self):
        rng = make_rng(6)
        layer = sketch_layer(rng.standard_normal((128, 784)) * 0.05, GroupingStructure("subchannelwise", 4), 4)
        act = random_activation(rng, 784, 2)
        out, ops = multibit_matvec(layer, act)
        ref = layer.dense() @ act.values()
        assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-12)) <= 1e-6
        assert ops == int(layer.bits().sum()) * 3 * -(-196 // 64)

    @pytest.mark.parametrize("word_bits", [32, 64])
    def test_word_sizes_agree(self, word_bits):
        rng = make_rng(7)
        layer = sketch_layer(rng.standard_normal((5, 100)), GroupingStructure("rowchunk", 50), 3)
        act = random_activation(rng, 100, 3)
        out, _ = multibit_matvec(layer, act, word_bits)
        assert np.allclose(out, layer.dense() @ act.values(), atol=1e-9)

    def test_pruned_slots_ignored(self):
        rng = make_rng(8)
        layer = sketch_layer(rng.standard_normal((4, 16)), GroupingStructure("channelwise"), 4)
        layer.active[0, 1:] = False
        layer.alpha[0, 1:] = 0.0
        act = random_activation(rng, 16, 1)
        out, _ = multibit_matvec(layer, act)
        assert np.allclose(out, layer.dense() @ act.values(), atol=1e-12)

    def test_requires_row_alignment(self):
        layer = sketch_layer(make_rng(9).standard_normal((2, 3, 2, 2)), GroupingStructure("pointwise"), 2)
        with pytest.raises(IncompatibleGroupingError):
            multibit_matvec(layer, random_activation(make_rng(0), 12, 1))

    def test_input_length(self):
        layer = sketch_layer(make_rng(10).standard_normal((2, 8)), GroupingStructure("channelwise"), 2)
        with pytest.raises(LengthMismatchError):
            multibit_matvec(layer, random_activation(make_rng(0), 9, 1))
