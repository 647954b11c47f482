"""Privatizer tests: clipping modes, ghost norms, noisy aggregation."""

import math

import numpy as np
import pytest

from dpicd import clipping as cl


def _spec(shapes):
    return cl.ParamGroupSpec.one_group_per_param(shapes)


def _random_grad(rng, shapes):
    return {p: rng.standard_normal(s) for p, s in shapes.items()}


SHAPES = {"w": (3, 4), "b": (5,), "e": (6, 2)}


class TestClipFlat:
    def test_three_four_five(self):
        grad = {"g": np.array([3.0, 4.0])}
        out = cl.clip_flat(grad, 1.0)
        np.testing.assert_allclose(out["g"], [0.6, 0.8], atol=1e-15)

    def test_inside_ball_unchanged_exactly(self):
        grad = {"g": np.array([0.3, 0.4])}  # norm 0.5
        out = cl.clip_flat(grad, 1.0)
        assert np.array_equal(out["g"], grad["g"])

    def test_zero_gradient(self):
        grad = {"g": np.zeros(4)}
        out = cl.clip_flat(grad, 1.0)
        assert np.array_equal(out["g"], np.zeros(4))

    def test_norm_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            grad = _random_grad(rng, SHAPES)
            out = cl.clip_flat(grad, 0.1)
            raw = math.sqrt(sum(float(np.sum(g * g)) for g in grad.values()))
            clipped = math.sqrt(sum(float(np.sum(g * g)) for g in out.values()))
            assert clipped == pytest.approx(min(raw, 0.1), abs=1e-12)
            # direction preserved
            for p in grad:
                np.testing.assert_allclose(
                    out[p] * raw, grad[p] * clipped, atol=1e-10
                )

    def test_rejects_bad_clip_norm(self):
        with pytest.raises(ValueError):
            cl.clip_flat({"g": np.ones(2)}, 0.0)


class TestClipGrouped:
    def test_four_unit_groups(self):
        shapes = {f"g{i}": (2,) for i in range(4)}
        spec = _spec(shapes)
        grad = {p: np.array([1.0, 0.0]) for p in shapes}  # each group norm 1
        out = cl.clip_grouped(grad, 1.0, spec)
        for p in shapes:
            assert np.linalg.norm(out[p]) == pytest.approx(0.5, abs=1e-12)
        total = math.sqrt(sum(float(np.sum(g * g)) for g in out.values()))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_subthreshold_unchanged_exactly(self):
        shapes = {"a": (2,), "b": (2,)}
        spec = _spec(shapes)
        grad = {"a": np.array([0.1, 0.0]), "b": np.array([0.0, 0.2])}
        out = cl.clip_grouped(grad, 1.0, spec)
        for p in shapes:
            assert np.array_equal(out[p], grad[p])

    def test_uneven_groups(self):
        shapes = {"big": (2,), "zero": (2,)}
        spec = _spec(shapes)
        grad = {"big": np.array([10.0, 0.0]), "zero": np.zeros(2)}
        out = cl.clip_grouped(grad, 1.0, spec)
        assert np.linalg.norm(out["big"]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert np.array_equal(out["zero"], np.zeros(2))
        total = math.sqrt(sum(float(np.sum(g * g)) for g in out.values()))
        assert total == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert total < 1.0

    def test_total_norm_bound_random(self):
        rng = np.random.default_rng(1)
        spec = _spec(SHAPES)
        c = 0.7
        for _ in range(200):
            grad = _random_grad(rng, SHAPES)
            out = cl.clip_grouped(grad, c, spec)
            total_sq = sum(float(np.sum(g * g)) for g in out.values())
            assert total_sq <= c * c * (1 + 1e-12)


class TestGhostNormLinear:
    def test_identity(self):
        eye = np.eye(2)
        norms = cl.ghost_norm_linear([eye], [eye])
        assert norms[0] == pytest.approx(2.0, abs=1e-12)

    def test_rank_one(self):
        a = np.array([[1.0, 2.0, 3.0]])
        s = np.array([[4.0, 5.0]])
        norms = cl.ghost_norm_linear([a], [s])
        assert norms[0] == pytest.approx(
            float(np.sum(a * a)) * float(np.sum(s * s)), rel=1e-12
        )

    def test_matches_materialized(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((7, 5))
        s = rng.standard_normal((7, 3))
        w = s.T @ a
        assert cl.ghost_norm_linear([a], [s])[0] == pytest.approx(
            float(np.sum(w * w)), rel=1e-10
        )

    def test_both_routes_agree_over_random_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            seq = int(rng.integers(1, 20))
            d_in = int(rng.integers(1, 20))
            d_out = int(rng.integers(1, 20))
            a = rng.standard_normal((seq, d_in))
            s = rng.standard_normal((seq, d_out))
            w = s.T @ a
            naive = float(np.sum(w * w))
            assert cl.ghost_norm_linear([a], [s])[0] == pytest.approx(
                naive, rel=1e-10, abs=1e-12
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cl.ghost_norm_linear([np.ones((3, 2))], [np.ones((4, 2))])


class TestGhostNormEmbedding:
    def test_all_distinct(self):
        ids = np.array([0, 1, 2])
        grads = np.arange(6.0).reshape(3, 2)
        assert cl.ghost_norm_embedding([ids], [grads])[0] == pytest.approx(
            float(np.sum(grads * grads)), rel=1e-12
        )

    def test_cancellation(self):
        ids = np.array([5, 5])
        g = np.array([[1.0, -2.0], [-1.0, 2.0]])
        assert cl.ghost_norm_embedding([ids], [g])[0] == pytest.approx(0.0, abs=1e-15)

    def test_matches_dense_scatter_add(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            vocab = 30
            n = int(rng.integers(1, 25))
            ids = rng.integers(0, vocab, size=n)
            grads = rng.standard_normal((n, 4))
            dense = np.zeros((vocab, 4))
            np.add.at(dense, ids, grads)
            assert cl.ghost_norm_embedding([ids], [grads])[0] == pytest.approx(
                float(np.sum(dense * dense)), rel=1e-12, abs=1e-12
            )

    def test_negative_id_rejected(self):
        with pytest.raises(ValueError):
            cl.ghost_norm_embedding([np.array([-1])], [np.ones((1, 2))])


class TestPrivatizeBatch:
    def test_inert_clip_and_noise_is_mean(self):
        rng = np.random.default_rng(5)
        spec = _spec(SHAPES)
        examples = [_random_grad(rng, SHAPES) for _ in range(6)]
        grads = cl.PerExampleGrads.from_examples(examples, spec)
        cfg = cl.ClipConfig(clip_norm=1e9, noise_multiplier=0.0)
        out, diag = cl.privatize_batch(grads, cfg, spec, nominal_batch_size=6)
        for p in SHAPES:
            mean = sum(ex[p] for ex in examples) / 6
            np.testing.assert_array_equal(out[p], mean)
        assert diag["clipped_fraction"] == 0.0

    def test_single_example_three_four(self):
        spec = _spec({"g": (2,)})
        grads = cl.PerExampleGrads.from_examples([{"g": np.array([3.0, 4.0])}], spec)
        cfg = cl.ClipConfig(clip_norm=1.0, noise_multiplier=0.0)
        out, _ = cl.privatize_batch(grads, cfg, spec, nominal_batch_size=1)
        np.testing.assert_allclose(out["g"], [0.6, 0.8], atol=1e-15)

    def test_fixed_seed_bitwise_reproducible(self):
        rng = np.random.default_rng(6)
        spec = _spec(SHAPES)
        examples = [_random_grad(rng, SHAPES) for _ in range(4)]
        grads = cl.PerExampleGrads.from_examples(examples, spec)
        cfg = cl.ClipConfig(clip_norm=1.0, noise_multiplier=1.0, rng_seed=123)
        out1, _ = cl.privatize_batch(grads, cfg, spec, nominal_batch_size=4)
        out2, _ = cl.privatize_batch(grads, cfg, spec, nominal_batch_size=4)
        for p in SHAPES:
            assert np.array_equal(out1[p], out2[p])

    def test_empty_poisson_batch_is_pure_noise(self):
        spec = _spec(SHAPES)
        grads = cl.PerExampleGrads.empty(spec)
        cfg = cl.ClipConfig(clip_norm=1.0, noise_multiplier=1.0, rng_seed=7)
        out, diag = cl.privatize_batch(grads, cfg, spec, nominal_batch_size=32)
        assert diag["empty_batch"]
        ref = np.random.default_rng(7)
        for p, s in spec.param_shapes.items():
            np.testing.assert_array_equal(out[p], ref.standard_normal(s) / 32)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        spec = _spec(SHAPES)
        examples = [_random_grad(rng, SHAPES) for _ in range(3)]
        grads = cl.PerExampleGrads.from_examples(examples, spec)
        lam = 3.7
        scaled = cl.PerExampleGrads.from_examples(
            [{p: lam * g for p, g in ex.items()} for ex in examples], spec
        )
        for mode in ("flat", "grouped"):
            out, _ = cl.privatize_batch(
                grads, cl.ClipConfig(0.5, mode=mode), spec, nominal_batch_size=3
            )
            out_scaled, _ = cl.privatize_batch(
                scaled, cl.ClipConfig(lam * 0.5, mode=mode), spec, nominal_batch_size=3
            )
            for p in SHAPES:
                np.testing.assert_allclose(out_scaled[p], lam * out[p], rtol=1e-12)

    def test_contribution_norm_bound_both_modes(self):
        rng = np.random.default_rng(9)
        spec = _spec(SHAPES)
        c = 0.3
        for mode in ("flat", "grouped"):
            for _ in range(200):
                grad = _random_grad(rng, SHAPES)
                clipped = (
                    cl.clip_flat(grad, c)
                    if mode == "flat"
                    else cl.clip_grouped(grad, c, spec)
                )
                assert cl.flat_norm(clipped) <= c * (1 + 1e-12)

    def test_two_pass_ghost_equivalence(self):
        # Clipping with precomputed ghost norms then rescaling the recomputed
        # gradient matches direct clip-then-sum.
        rng = np.random.default_rng(10)
        n, seq, d_in, d_out = 8, 6, 5, 4
        activations = [rng.standard_normal((seq, d_in)) for _ in range(n)]
        out_grads = [rng.standard_normal((seq, d_out)) for _ in range(n)]
        weight_grads = [s.T @ a for a, s in zip(activations, out_grads)]
        spec = _spec({"w": (d_out, d_in)})
        grads = cl.PerExampleGrads.from_examples(
            [{"w": g} for g in weight_grads], spec
        )
        cfg = cl.ClipConfig(clip_norm=1.0, noise_multiplier=0.0)
        direct, _ = cl.privatize_batch(grads, cfg, spec, nominal_batch_size=n)
        ghost = np.sqrt(cl.ghost_norm_linear(activations, out_grads))
        two_pass, _ = cl.privatize_batch(
            grads, cfg, spec, nominal_batch_size=n, precomputed_norms=ghost
        )
        np.testing.assert_allclose(two_pass["w"], direct["w"], rtol=1e-8)

    def test_validation(self):
        spec = _spec(SHAPES)
        with pytest.raises(ValueError):
            cl.ClipConfig(clip_norm=0.0)
        with pytest.raises(ValueError):
            cl.ClipConfig(clip_norm=1.0, mode="banana")
        with pytest.raises(ValueError):
            cl.PerExampleGrads({"w": np.zeros((2, 3, 4))}, spec)
        bad = {p: np.zeros((2, *s)) for p, s in SHAPES.items()}
        bad["w"][0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            cl.PerExampleGrads(bad, spec)
