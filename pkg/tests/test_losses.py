import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defencekit.losses import (
    FeaturePyramid,
    LossWeights,
    StructureSmoother,
    bce_loss,
    d_structure_loss,
    d_texture_loss,
    g_adversarial_loss,
    perceptual_loss,
    rec_loss,
    structure_loss,
    total_generator_loss,
)
from defencekit.tensor import ShapeError, Tensor, grad_check


class TestBce:
    def test_half_confidence(self):
        loss = bce_loss(Tensor(np.array([0.5])), np.array([1.0]))
        assert abs(loss.item() - 0.693147) <= 1e-6

    def test_averaging(self):
        loss = bce_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert abs(loss.item() - 0.693147) <= 1e-6

    def test_perfect_prediction_clip_bound(self):
        loss = bce_loss(Tensor(np.array([1.0, 0.0])), np.array([1.0, 0.0]))
        assert loss.item() <= 1.1e-7

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.array([0.5])), np.array([0.7]))

    def test_grad_check(self, rng):
        target = (rng.uniform(size=8) > 0.4).astype(float)
        x = Tensor(rng.uniform(0.05, 0.95, size=8))
        assert grad_check(lambda t: bce_loss(t, target), x) <= 1e-4


class TestRec:
    def test_identical_zero(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        assert rec_loss(Tensor(x), x).item() == 0.0

    def test_uniform_offset(self, rng):
        x = rng.standard_normal((3, 5))
        assert abs(rec_loss(Tensor(x + 0.1), x).item() - 0.1) <= 1e-12

    def test_matches_loop_mean(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 3, 4, 4))
        want = float(np.mean([abs(x - y) for x, y in zip(a.ravel(), b.ravel())]))
        assert abs(rec_loss(Tensor(a), b).item() - want) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rec_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))

    def test_grad_check(self, rng):
        target = rng.standard_normal(10)
        x = Tensor(rng.standard_normal(10))
        assert grad_check(lambda t: rec_loss(t, target), x) <= 1e-4


class TestPerceptual:
    def test_identical_zero(self, rng):
        ex = FeaturePyramid(seed=3)
        x = rng.standard_normal((1, 3, 16, 16))
        assert perceptual_loss(ex, Tensor(x), x).item() == 0.0

    def test_recomposition_from_stages(self, rng):
        ex = FeaturePyramid(seed=3)
        a = Tensor(rng.standard_normal((1, 3, 16, 16)))
        b = Tensor(rng.standard_normal((1, 3, 16, 16)))
        got = perceptual_loss(ex, a, b).item()
        stages = [
            rec_loss(fa, fb.data).item()
            for fa, fb in zip(ex.features(a), ex.features(b))
        ]
        assert abs(got - np.mean(stages)) <= 1e-12

    def test_symmetry(self, rng):
        ex = FeaturePyramid(seed=3)
        a = Tensor(rng.standard_normal((1, 3, 8, 8)))
        b = Tensor(rng.standard_normal((1, 3, 8, 8)))
        assert perceptual_loss(ex, a, b.data).item() == \
            perceptual_loss(ex, b, a.data).item()

    def test_features_bitwise_stable(self, rng):
        ex = FeaturePyramid(seed=3)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        first = [f.data.copy() for f in ex.features(x)]
        again = ex.features(x)
        for f0, f1 in zip(first, again):
            assert np.array_equal(f0, f1.data)

    def test_frozen_weights_hidden_from_optimizers(self):
        assert FeaturePyramid(seed=3).parameters() == []

    def test_grad_check(self, rng):
        ex = FeaturePyramid(seed=3)
        target = rng.standard_normal((1, 3, 8, 8))
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        assert grad_check(lambda t: perceptual_loss(ex, t, target), x) <= 1e-4


class TestStructure:
    def test_identical_zero(self, rng):
        sm = StructureSmoother()
        x = rng.standard_normal((1, 3, 8, 8))
        assert structure_loss(sm, Tensor(x), x).item() == 0.0

    def test_constants_are_fixed_points(self):
        sm = StructureSmoother()
        a = np.full((1, 3, 8, 8), 0.3)
        b = np.full((1, 3, 8, 8), 0.75)
        assert abs(structure_loss(sm, Tensor(a), b).item() - 0.45) <= 1e-12

    def test_recomposition(self, rng):
        sm = StructureSmoother()
        a = Tensor(rng.standard_normal((1, 3, 8, 8)))
        b = Tensor(rng.standard_normal((1, 3, 8, 8)))
        want = rec_loss(sm(a), sm(b).data).item()
        assert abs(structure_loss(sm, a, b.data).item() - want) <= 1e-12

    def test_linearity_shift_invariance(self, rng):
        sm = StructureSmoother()
        a = rng.standard_normal((1, 3, 8, 8))
        b = rng.standard_normal((1, 3, 8, 8))
        base = structure_loss(sm, Tensor(a), b).item()
        shifted = structure_loss(sm, Tensor(a + 0.37), b + 0.37).item()
        assert abs(base - shifted) <= 1e-12

    def test_grad_check(self, rng):
        sm = StructureSmoother()
        target = rng.standard_normal((1, 3, 6, 6))
        x = Tensor(rng.standard_normal((1, 3, 6, 6)))
        assert grad_check(lambda t: structure_loss(sm, t, target), x) <= 1e-4


class TestAdversarial:
    @pytest.mark.parametrize("fn", [d_texture_loss, d_structure_loss])
    def test_anchors(self, fn):
        assert fn(1.0, 0.0).item() == 0.0
        assert fn(0.0, 1.0).item() == 1.0
        assert fn(0.5, 0.5).item() == 0.25

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_texture_structure_exchangeable(self, r, f):
        assert d_texture_loss(r, f).item() == d_structure_loss(r, f).item()

    def test_batch_scores_use_mean(self):
        real = Tensor(np.array([[1.0], [0.0]]))
        fake = Tensor(np.array([[0.0], [0.0]]))
        # 0.5 * (mean([0,1]) + 0) = 0.25
        assert d_texture_loss(real, fake).item() == 0.25

    def test_generator_side(self):
        tex, struct = g_adversarial_loss(1.0, 0.0)
        assert tex.item() == 0.0 and struct.item() == 0.5
        tex, _ = g_adversarial_loss(0.5, 0.5)
        assert tex.item() == 0.125

    def test_grad_check(self, rng):
        real = Tensor(rng.standard_normal((4, 1)))
        fake = Tensor(rng.standard_normal((4, 1)))
        assert grad_check(lambda r, f: d_texture_loss(r, f), [real, fake]) <= 1e-4
        assert grad_check(lambda f: g_adversarial_loss(f, 0.0)[0], fake) <= 1e-4


class TestTotal:
    def test_unit_components_default_weights(self):
        total = total_generator_loss(LossWeights(), 1.0, 1.0, 1.0, 1.0, 1.0)
        assert total.item() == 2.21

    def test_zero_components(self):
        assert total_generator_loss(LossWeights(), 0, 0, 0, 0, 0).item() == 0.0

    def test_rec_only(self):
        w = LossWeights(rec=1, per=0, struct=0, adv_tex=0, adv_struct=0)
        assert total_generator_loss(w, 0.3, 9, 9, 9, 9).item() == pytest.approx(0.3)

    def test_nonfinite_component_named(self):
        with pytest.raises(ArithmeticError, match="struct"):
            total_generator_loss(LossWeights(), 1.0, 1.0, float("nan"), 1.0, 1.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(rec=-1.0)
