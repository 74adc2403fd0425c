import numpy as np
import pytest
from scipy.optimize import linprog

from slidegcd import numerics as nx
from slidegcd.backbone import (AttentionMIL, MilHeadParams, PrecomputedBackbone, attention_weights,
                               backbone_embed, init_backbone_params, make_backbone, mil_head)
from slidegcd.errors import ConfigError, DimensionError, InputError
from slidegcd.numerics import Tensor
from slidegcd.objectives import cross_entropy

from conftest import param


def f64_params(rng, d_patch=6, d_s=4, attn=5):
    p = init_backbone_params(d_patch, d_s, rng, attn, dtype=np.float64)
    for t in p.tensors().values():
        t.data = t.data + rng.normal(scale=0.1, size=t.shape)
    return p


def project(p, x):
    return x @ p.proj_W.data + p.proj_b.data


class TestEmbed:
    def test_identical_patches(self, rng):
        p = f64_params(rng)
        x = rng.normal(size=6)
        s = backbone_embed(np.tile(x, (9, 1)), p).data
        np.testing.assert_allclose(s[0], project(p, x), atol=1e-12)

    def test_single_patch(self, rng):
        p = f64_params(rng)
        x = rng.normal(size=(1, 6))
        np.testing.assert_allclose(backbone_embed(x, p).data, project(p, x), atol=1e-12)

    def test_attention_is_a_distribution(self, rng):
        p = f64_params(rng)
        a = attention_weights(rng.normal(size=(11, 6)), p).data
        assert np.all(a >= 0) and abs(a.sum() - 1) <= 1e-6

    def test_in_convex_hull_of_projections(self, rng):
        for _ in range(5):
            p = f64_params(rng)
            x = rng.normal(size=(5, 6))
            s = backbone_embed(x, p).data[0]
            pts = project(p, x)  # (5, D_s)
            # feasibility LP: lambda >= 0, sum lambda = 1, pts^T lambda = s
            A_eq = np.vstack([pts.T, np.ones(5)])
            b_eq = np.concatenate([s, [1.0]])
            res = linprog(np.zeros(5), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * 5, method="highs")
            assert res.status == 0
            np.testing.assert_allclose(A_eq @ res.x, b_eq, atol=1e-8)

    def test_permutation_invariant(self, rng):
        p = f64_params(rng)
        x = rng.normal(size=(13, 6))
        a = backbone_embed(x, p).data
        b = backbone_embed(x[rng.permutation(13)], p).data
        assert np.max(np.abs(a - b)) <= 1e-6

    @pytest.mark.parametrize("m", [1, 7, 100])
    def test_output_width_independent_of_bag_size(self, rng, m):
        bb = AttentionMIL.create(6, 4, rng)
        assert bb.embed(rng.normal(size=(m, 6))).shape == (1, 4)

    def test_empty_bag(self, rng):
        with pytest.raises(InputError):
            backbone_embed(np.zeros((0, 6)), f64_params(rng))

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            backbone_embed(np.zeros((3, 5)), f64_params(rng))

    def test_identity_projection_when_widths_match(self, rng):
        p = init_backbone_params(8, 8, rng)
        np.testing.assert_array_equal(p.proj_W.data, np.eye(8))


class TestHead:
    def test_zero_weights_uniform(self, rng):
        head = MilHeadParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        logits = mil_head(rng.normal(size=(2, 4)), head)
        np.testing.assert_array_equal(logits.data, 0)
        np.testing.assert_allclose(nx.softmax(logits, axis=1).data, 1 / 3)

    def test_zero_embedding_gives_bias(self, rng):
        head = MilHeadParams(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3)))
        np.testing.assert_array_equal(mil_head(np.zeros(4), head).data[0], head.b.data)

    def test_width_mismatch(self, rng):
        head = MilHeadParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            mil_head(np.zeros((1, 5)), head)

    def test_gradcheck_embed_head_ce(self, rng):
        p = f64_params(rng)
        W, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=3))
        bag = rng.normal(size=(7, 6))
        ts = list(p.tensors().values())

        def f(V, U, w, pW, pb, W, b):
            from slidegcd.backbone import BackboneParams
            s = backbone_embed(bag, BackboneParams(V, U, w, pW, pb))
            return cross_entropy(mil_head(s, MilHeadParams(W, b)), [2])

        assert nx.grad_check(f, ts + [W, b]) <= 1e-4


class TestPrecomputed:
    def test_identity(self, rng):
        bb = make_backbone("precomputed", 4, 4, rng)
        x = rng.normal(size=(1, 4)).astype(np.float32)
        np.testing.assert_array_equal(bb.embed(x).data, x)
        assert bb.tensors() == {}
        assert not bb.embed(x).requires_grad

    def test_multi_row_rejected(self):
        with pytest.raises(InputError):
            PrecomputedBackbone(4).embed(np.zeros((2, 4)))

    def test_unknown_name(self, rng):
        with pytest.raises(ConfigError):
            make_backbone("transmil", 4, 4, rng)
