import itertools

import numpy as np
import pytest

from edgewise.alq import (
    ActQuantizer,
    AlqConfig,
    PruneSchedule,
    QuantModel,
    SteState,
    TargetInfeasibleError,
    act_quantize,
    alpha_cost,
    alq_pipeline,
    flip_negative,
    modeled_increase,
    optimize_bases,
    optimize_coords,
    project_layer_rows,
    prune_alpha_round,
    refresh_alpha,
    row_project,
    select_prune,
    sign_patterns,
    sketch_model,
    ste_loss_aware_step,
)
from edgewise.bitwise import multibit_matvec
from edgewise.mbq import GroupedLayer, GroupingStructure, QuantGroup
from edgewise.model import LabeledBatch, MlpModel, OptimConfig, loss_and_grads, synth_blobs, train
from edgewise.numerics import finite_diff_grad, make_rng

CW = GroupingStructure("channelwise")


def repeat(batch):
    while True:
        yield batch


def trained_blob_model(seed=0, sizes=(6, 8, 3)):
    data = synth_blobs(seed, 300, sizes[0], sizes[-1], separation=3.0)
    model, _ = train(MlpModel.init(list(sizes), seed), data, OptimConfig(lr=1e-2, batch_size=32), 200, seed)
    return model, data


class TestAlphaCost:
    def test_examples(self):
        assert alpha_cost(0.0, 2.0, 1.0) == 1.0
        assert alpha_cost(1.0, 0.0, 1.0) == -1.0
        assert alpha_cost(0.5, 1.0, 2.0) == 1.0

    def test_select_ascending_head(self):
        assert select_prune([np.array([0.5, -0.2, 0.1])], 1, 100.0) == [(0, 1)]

    def test_select_across_layers(self):
        costs = [np.array([0.3, 0.0]), np.array([-1.0, 0.2, 0.1])]
        assert select_prune(costs, 3, 100.0) == [(1, 0), (0, 1), (1, 2)]

    def test_select_widens_small_pool(self):
        # 1% of each layer is a single candidate, too few for three removals
        costs = [np.array([0.1, 0.2, 0.3]), np.array([5.0, 6.0])]
        assert select_prune(costs, 3, 1.0) == [(0, 0), (0, 1), (0, 2)]

    def test_select_nothing(self):
        assert select_prune([np.array([1.0])], 0) == []


class TestSchedule:
    def test_geometric(self):
        s = PruneSchedule.geometric(1000, 0.3, 3, 10)
        assert s.targets == [700, 490, 343]

    def test_must_decrease(self):
        with pytest.raises(ValueError):
            PruneSchedule([5, 5], 1)


class TestPrune:
    def test_single_basis_group_becomes_zero(self):
        group = QuantGroup(np.array([[1], [-1]], np.int8), np.array([0.5]))
        layer = GroupedLayer.from_groups((1, 2), CW, [group], 1)
        qm = QuantModel([layer], [np.zeros(1)])
        batch = LabeledBatch(np.ones((1, 2)), [0])
        qm, _, removed = prune_alpha_round(qm, repeat(batch), 0, 1)
        assert removed == [1] and qm.layers[0].bits().tolist() == [0]
        assert np.array_equal(qm.layers[0].dense(), np.zeros((1, 2)))

    def test_infeasible_target(self):
        model, data = trained_blob_model()
        qm = sketch_model(model, [CW, CW], 2)
        with pytest.raises(TargetInfeasibleError):
            prune_alpha_round(qm, repeat(data), -1, 1)

    def test_exact_count_and_dense_groups(self):
        model, data = trained_blob_model()
        qm = sketch_model(model, [CW, CW], 4)
        m0 = qm.total_alphas()
        qm, _, removed = prune_alpha_round(qm, repeat(data), m0 - 12, 4)
        assert removed == [3, 3, 3, 3] and qm.total_alphas() == m0 - 12
        for layer in qm.layers:
            vals = layer.group_values()[layer.bits() > 0]
            assert np.all(vals != 0)

    def test_exhaustive_subset_oracle(self):
        # 12 coordinates; costs recomputed from finite-difference gradients in the coordinate domain
        rng = make_rng(5)
        w = rng.standard_normal((2, 6)) * 0.5
        model = MlpModel([w], [np.zeros(2)])
        qm = sketch_model(model, [GroupingStructure("rowchunk", 3)], 3)
        assert qm.total_alphas() == 12
        batch = LabeledBatch(rng.standard_normal((7, 6)), rng.integers(0, 2, 7))
        layer = qm.layers[0]
        idx = layer.structure.group_index(layer.shape)
        before = layer.copy()

        def loss_of(alpha):
            trial = layer.copy()
            trial.alpha = alpha.reshape(trial.alpha.shape)
            return loss_and_grads(MlpModel([trial.dense()], [np.zeros(2)]), batch)[0]

        g_alpha = finite_diff_grad(loss_of, layer.alpha.ravel().copy())
        lr = 1e-3
        costs = alpha_cost(lr * g_alpha, np.abs(g_alpha) + 1e-8, layer.alpha.ravel())
        for count in (1, 2, 3):
            trial = QuantModel([before.copy()], [np.zeros(2)])
            trial, _, _ = prune_alpha_round(trial, repeat(batch), 12 - count, 1, k_percent=100.0, lr=lr)
            removed = np.flatnonzero(~trial.layers[0].active.ravel())
            best = min(costs[list(s)].sum() for s in itertools.combinations(range(12), count))
            assert costs[removed].sum() == pytest.approx(best, abs=1e-9)
        assert idx.shape == (4, 3)


class TestProjection:
    def test_single_basis(self):
        assert row_project([1.0], [0.3]).tolist() == [[1]]

    def test_two_bases(self):
        assert row_project([0.5, 0.4], [-0.2]).tolist() == [[-1, 1]]

    def test_tie_prefers_plus(self):
        assert row_project([1.0], [0.0]).tolist() == [[1]]

    def test_pattern_order(self):
        assert sign_patterns(2).tolist() == [[1, 1], [1, -1], [-1, 1], [-1, -1]]

    def test_layer_projection_matches_enumeration(self):
        rng = make_rng(1)
        layer = GroupedLayer((4, 5), CW, np.ones((4, 5, 3), np.int8), rng.uniform(0.1, 1, (4, 3)),
                             np.ones((4, 3), bool))
        layer.active[1, 0] = False
        targets = rng.standard_normal((4, 5))
        project_layer_rows(layer, targets)
        for g in range(4):
            grp = layer.group(g)
            for j in range(5):
                assert grp.basis[j].tolist() == row_project(grp.alpha, [targets[g, j]])[0].tolist()

    def test_refresh_fixed_point(self):
        # zero gradient, identity curvature, tiny ridge: coordinates stay where they are
        rng = make_rng(2)
        basis = np.where(rng.random((3, 8, 2)) < 0.5, -1, 1).astype(np.int8)
        basis[:, 0, :] = [1, 1]
        basis[:, 1, :] = [1, -1]
        alpha = rng.uniform(0.2, 1.0, (3, 2))
        layer = GroupedLayer((3, 8), CW, basis, alpha.copy(), np.ones((3, 2), bool))
        refresh_alpha(layer, np.zeros((3, 8)), np.ones((3, 8)), layer.group_values(), lam=1e-12)
        assert np.allclose(layer.alpha, alpha, atol=1e-9)

    def test_flip_negative(self):
        layer = GroupedLayer((1, 2), CW, np.array([[[1], [-1]]], np.int8), np.array([[-0.3]]), np.ones((1, 1), bool))
        before = layer.dense().copy()
        flip_negative(layer)
        assert layer.alpha[0, 0] == 0.3 and layer.basis[0, :, 0].tolist() == [-1, 1]
        assert np.array_equal(layer.dense(), before)

    def test_modeled_objective_never_increases(self):
        model, data = trained_blob_model(1)
        qm = sketch_model(model, [CW, CW], 3)
        seen = []

        def check(l, before, projected, after, g, H, w_ref):
            old = modeled_increase(before, g, H, w_ref).sum()
            assert modeled_increase(projected, g, H, w_ref, alpha=before.alpha).sum() <= old + 1e-15
            assert modeled_increase(after, g, H, w_ref).sum() <= old + 1e-15
            seen.append(l)

        optimize_bases(qm, repeat(data.take(np.arange(64))), 20, check=check)
        assert len(seen) == 40


class TestCoords:
    def _zero_grad_setup(self, seed=0):
        model = MlpModel.init([4, 5, 3], seed)
        qm = sketch_model(model, [CW, CW], 2)
        batch = LabeledBatch(np.zeros((4, 4)), [0, 1, 2, 0])
        return qm, batch

    def test_zero_gradient_no_change(self):
        qm, batch = self._zero_grad_setup()
        before = [layer.alpha.copy() for layer in qm.layers]
        optimize_coords(qm, repeat(batch), 5, l2=0.0)
        assert all(np.array_equal(a, layer.alpha) for a, layer in zip(before, qm.layers))

    def test_l2_shrinks_every_step(self):
        qm, batch = self._zero_grad_setup(1)
        for layer in qm.layers:
            layer.alpha[layer.active] = np.maximum(layer.alpha[layer.active], 0.5)
        prev = [layer.alpha.copy() for layer in qm.layers]
        states = bias_states = None
        for _ in range(10):
            qm, states, bias_states = optimize_coords(qm, repeat(batch), 1, lr=1e-3, l2=0.1,
                                                      states=states, bias_states=bias_states)
            for p, layer in zip(prev, qm.layers):
                assert np.all(layer.alpha[layer.active] < p[layer.active])
            prev = [layer.alpha.copy() for layer in qm.layers]

    def test_positive_after_steps(self):
        model, data = trained_blob_model(2)
        qm = sketch_model(model, [CW, CW], 3)
        optimize_coords(qm, repeat(data), 30, lr=0.05)
        assert all(np.all(layer.alpha[layer.active] > 0) for layer in qm.layers)

    def test_needs_iterations(self):
        qm, batch = self._zero_grad_setup()
        with pytest.raises(ValueError):
            optimize_coords(qm, repeat(batch), 0)


class TestSte:
    def test_zero_gradient_keeps_state(self):
        # exactly representable weights and a batch with zero weight gradients
        basis = np.array([[[1, 1], [1, -1], [-1, 1], [1, 1]]] * 2, np.int8)
        alpha = np.array([[0.5, 0.25], [0.75, 0.5]])
        layer = GroupedLayer((2, 4), CW, basis, alpha, np.ones((2, 2), bool))
        qm = QuantModel([layer], [np.zeros(2)])
        ste = SteState.start(qm)
        before = (layer.basis.copy(), layer.alpha.copy(), ste.shadow[0].copy())
        ste_loss_aware_step(ste, qm, LabeledBatch(np.zeros((2, 4)), [0, 1]))
        assert np.array_equal(layer.basis, before[0])
        assert np.allclose(layer.alpha, before[1], atol=1e-9)
        assert np.array_equal(ste.shadow[0], before[2])

    def test_single_weight_sign(self):
        layer = GroupedLayer((2, 1), CW, np.ones((2, 1, 1), np.int8), np.ones((2, 1)), np.ones((2, 1), bool))
        qm = QuantModel([layer], [np.zeros(2)])
        ste = SteState.start(qm, [np.array([[0.3], [0.3]])])
        # a large positive gradient on the first output pushes its target below zero
        batch = LabeledBatch(np.array([[1.0]]), [1])
        ste_loss_aware_step(ste, qm, batch, lr=1.0)
        assert layer.basis[:, 0, 0].tolist() == [-1, 1]

    def test_companion_to_projection(self):
        rng = make_rng(3)
        data = synth_blobs(3, 200, 8, 3, separation=3.0)
        model = MlpModel([rng.standard_normal((3, 8)) * 0.3], [np.zeros(3)])
        batch = data
        q_proj = sketch_model(model, [GroupingStructure("rowchunk", 4)], 2)
        q_ste = q_proj.copy()
        optimize_bases(q_proj, repeat(batch), 400, lr=1e-2)
        ste = SteState.start(q_ste, model.weights)
        for _ in range(400):
            ste_loss_aware_step(ste, q_ste, batch, lr=1e-2)
        assert q_ste.loss(batch) <= 1.05 * q_proj.loss(batch)


class TestActivation:
    def test_exact_levels(self):
        q = ActQuantizer(1, [2.0, 1.0])
        x = np.array([3.0, 1.0, 1.0, 3.0])
        x_hat, q2 = act_quantize(x, q)
        assert np.array_equal(x_hat, x) and np.allclose(q2.coeffs, [2.0, 1.0])

    def test_normal_equations(self):
        q = ActQuantizer(1, [1.5, 0.2], momentum=0.0)
        _, q2 = act_quantize(np.array([3.0, 1.0]), q)
        assert np.allclose(q2.coeffs, [2.0, 1.0])

    def test_running_average(self):
        _, q2 = act_quantize(np.array([3.0, 1.0]), ActQuantizer(1, [1.5, 0.2]))
        assert np.allclose(q2.coeffs, 0.9 * np.array([1.5, 0.2]) + 0.1 * np.array([2.0, 1.0]))

    def test_levels_sorted(self):
        q = ActQuantizer(2, [0.5, 0.4, 0.1])
        assert np.all(np.diff(q.levels()) > 0)

    def test_degenerate_assignment_keeps_coeffs(self):
        q = ActQuantizer(1, [0.0, 1.0])
        _, q2 = act_quantize(np.array([1.0, 1.0]), q)
        assert np.array_equal(q2.coeffs, q.coeffs)

    def test_init_fits_sample(self):
        x = np.maximum(make_rng(0).standard_normal(5000), 0)
        q = ActQuantizer.init(x, 2)
        first = ActQuantizer.init(x, 2, iters=0)
        err = np.mean((q.quantize(x) - x) ** 2)
        assert err < np.mean((first.quantize(x) - x) ** 2) and err < 0.2 * np.var(x)


class TestPipeline:
    def test_zero_rounds_is_sketch(self):
        model, data = trained_blob_model(4)
        cfg = AlqConfig([CW, CW], i_max=3, rounds=0, init_iters=0, final_iters=0)
        qm, trace = alq_pipeline(model, data, cfg)
        ref = sketch_model(model, [CW, CW], 3)
        assert all(np.array_equal(a, b) for a, b in zip(qm.weights(), ref.weights()))
        assert [r["stage"] for r in trace] == ["sketch"]

    def test_rounds_follow_schedule_and_bitwidth_falls(self):
        model, data = trained_blob_model(5, sizes=(6, 16, 3))
        cfg = AlqConfig([CW, CW], i_max=4, rounds=3, prune_iters=5, bases_iters=5, coords_iters=5,
                        init_iters=5, final_iters=5, batch_size=32)
        qm, trace = alq_pipeline(model, data, cfg, val=data)
        m0 = trace[0]["total_alphas"]
        prunes = [r["total_alphas"] for r in trace if r["stage"] == "prune"]
        assert prunes == [int(np.floor(m0 * 0.7**r + 0.5)) for r in (1, 2, 3)]
        bits = [r["model_bitwidth"] for r in trace]
        assert all(b <= a for a, b in zip(bits, bits[1:]))

    def test_deterministic(self):
        model, data = trained_blob_model(6)
        cfg = AlqConfig([CW, CW], i_max=3, rounds=1, prune_iters=3, bases_iters=3, coords_iters=3,
                        init_iters=3, final_iters=3, batch_size=32, act_bits=2)
        a, _ = alq_pipeline(model, data, cfg)
        b, _ = alq_pipeline(model, data, cfg)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.weights(), b.weights()))

    def test_bitwise_execution_of_pipeline_output(self):
        model, data = trained_blob_model(7, sizes=(8, 16, 3))
        cfg = AlqConfig([CW, CW], i_max=3, rounds=2, prune_iters=3, bases_iters=3, coords_iters=3,
                        init_iters=3, final_iters=3, batch_size=32, act_bits=2)
        qm, _ = alq_pipeline(model, data, cfg)
        x = np.maximum(data.inputs[:5], 0)
        for layer in qm.layers:
            q = ActQuantizer.init(x, 2)
            for row in x:
                act = q.encode(row)
                out, _ = multibit_matvec(layer, act)
                ref = layer.dense() @ act.values()
                assert np.allclose(out, ref, rtol=1e-6, atol=1e-9)
            x = np.maximum(x @ layer.dense().T, 0)
