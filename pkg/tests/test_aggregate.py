"""Correlation-weighted aggregation: refinement, weighted averaging, fusion.

aggregate_level is pinned to a quadruple-loop weighted-sum oracle and
aggregate_pair to the composition of pool, volume, softmax, 1x1-conv, and
aggregation oracles, all recomputed here in plain numpy.
"""

import numpy as np
import pytest

from vdeblur.aggregate import (
    AggregatedFeature,
    aggregate_level,
    aggregate_pair,
    fuse_three,
    phi_param_names,
    refine_neighbor,
)
from vdeblur.corrvol import CorrelationVolume, naive_correlation_volume
from vdeblur.tensor import ParamStore, Tensor, grad_check, mul, sum_reduce


def make_phi_params(L, c, rng, dtype=np.float32, sources=("prev", "self", "next")):
    ps = ParamStore()
    for source in sources:
        for k in range(1, L + 1):
            w_name, b_name = phi_param_names(k, source)
            ps.add(w_name, Tensor(
                rng.standard_normal((c, c, 1, 1)).astype(dtype), requires_grad=True))
            ps.add(b_name, Tensor(
                rng.standard_normal((c,)).astype(dtype), requires_grad=True))
    return ps


def normalized_volume(rng, h, w, hk, wk, level=1, kind="intra", dtype=np.float64):
    raw = rng.uniform(0.1, 1.0, size=(h, w, hk, wk)).astype(dtype)
    raw /= raw.sum(axis=(2, 3), keepdims=True)
    return CorrelationVolume(Tensor(raw), level=level, kind=kind)


def aggregate_oracle(weights, refined):
    h, w, hk, wk = weights.shape
    c = refined.shape[0]
    out = np.zeros((c, h, w), dtype=np.float64)
    for x in range(h):
        for y in range(w):
            for u in range(hk):
                for v in range(wk):
                    out[:, x, y] += weights[x, y, u, v] * refined[:, u, v]
    return out


class TestRefineNeighbor:
    def test_identity_weights_pass_input_through(self):
        c = 3
        ps = ParamStore()
        w = np.zeros((c, c, 1, 1), np.float32)
        for i in range(c):
            w[i, i, 0, 0] = 1.0
        w_name, b_name = phi_param_names(1, "next")
        ps.add(w_name, Tensor(w))
        ps.add(b_name, Tensor(np.zeros(c, np.float32)))
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((c, 4, 4)).astype(np.float32))
        out = refine_neighbor(x, ps, 1, "next")
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_returns_bias(self):
        rng = np.random.default_rng(1)
        ps = make_phi_params(1, 2, rng)
        z = Tensor(np.zeros((2, 3, 3), np.float32))
        out = refine_neighbor(z, ps, 1, "self")
        bias = ps[phi_param_names(1, "self")[1]].data
        np.testing.assert_allclose(out.data, np.broadcast_to(bias[:, None, None], (2, 3, 3)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_per_pixel_matvec_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c = 4
        ps = make_phi_params(2, c, rng, dtype=np.float64)
        x = rng.standard_normal((c, 5, 5))
        out = refine_neighbor(Tensor(x), ps, 2, "prev")
        w_name, b_name = phi_param_names(2, "prev")
        w = ps[w_name].data[:, :, 0, 0]
        b = ps[b_name].data
        expect = np.einsum("oc,chw->ohw", w, x) + b[:, None, None]
        assert np.abs(out.data - expect).max() < 1e-6

    def test_missing_params_rejected(self):
        ps = ParamStore()
        x = Tensor(np.zeros((2, 4, 4), np.float32))
        with pytest.raises(KeyError):
            refine_neighbor(x, ps, 1, "next")

    def test_unknown_source_rejected(self):
        rng = np.random.default_rng(2)
        ps = make_phi_params(1, 2, rng)
        x = Tensor(np.zeros((2, 4, 4), np.float32))
        with pytest.raises(ValueError):
            refine_neighbor(x, ps, 1, "middle")


class TestAggregateLevel:
    def test_one_hot_weights_select_one_pixel(self):
        rng = np.random.default_rng(3)
        refined = rng.standard_normal((2, 2, 2)).astype(np.float32)
        weights = np.zeros((3, 3, 2, 2), np.float32)
        weights[:, :, 1, 0] = 1.0
        vol = CorrelationVolume(Tensor(weights), level=1, kind="intra")
        out = aggregate_level(vol, Tensor(refined))
        expect = np.broadcast_to(refined[:, 1, 0][:, None, None], (2, 3, 3))
        np.testing.assert_allclose(out.data, expect, atol=1e-7)

    def test_uniform_weights_produce_mean(self):
        rng = np.random.default_rng(4)
        refined = rng.standard_normal((3, 2, 2)).astype(np.float32)
        weights = np.full((4, 4, 2, 2), 0.25, np.float32)
        vol = CorrelationVolume(Tensor(weights), level=1, kind="inter_next")
        out = aggregate_level(vol, Tensor(refined))
        mean = refined.mean(axis=(1, 2))
        np.testing.assert_allclose(
            out.data, np.broadcast_to(mean[:, None, None], (3, 4, 4)), atol=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_weighted_sum_oracle(self, seed):
        rng = np.random.default_rng(seed)
        vol = normalized_volume(rng, 4, 4, 2, 2)
        refined = rng.standard_normal((2, 2, 2))
        out = aggregate_level(vol, Tensor(refined))
        expect = aggregate_oracle(vol.values.data, refined)
        assert np.abs(out.data - expect).max() < 1e-6

    def test_unnormalized_volume_rejected(self):
        bad = CorrelationVolume(Tensor(np.full((2, 2, 2, 2), 0.5, np.float32)),
                                level=1, kind="intra")
        with pytest.raises(ValueError):
            aggregate_level(bad, Tensor(np.zeros((1, 2, 2), np.float32)))

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        vol = normalized_volume(rng, 4, 4, 2, 2)
        with pytest.raises(ValueError):
            aggregate_level(vol, Tensor(np.zeros((1, 3, 3), np.float32)))

    @pytest.mark.parametrize("seed", [0, 1])
    def test_convexity_bounds(self, seed):
        rng = np.random.default_rng(seed)
        vol = normalized_volume(rng, 4, 4, 4, 4)
        refined = rng.standard_normal((3, 4, 4))
        out = aggregate_level(vol, Tensor(refined)).data
        lo = refined.min(axis=(1, 2))[:, None, None]
        hi = refined.max(axis=(1, 2))[:, None, None]
        assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()

    def test_stabilization_shift_leaves_output_unchanged(self):
        rng = np.random.default_rng(6)
        dots = rng.standard_normal((3, 3, 2, 2))
        shift = rng.standard_normal((3, 3))[:, :, None, None]
        refined = rng.standard_normal((2, 2, 2))

        def norm(d):
            e = np.exp(d)
            v = e / e.sum(axis=(2, 3), keepdims=True)
            return CorrelationVolume(Tensor(v), level=1, kind="intra")

        a = aggregate_level(norm(dots), Tensor(refined)).data
        b = aggregate_level(norm(dots - shift), Tensor(refined)).data
        assert np.abs(a - b).max() < 1e-6


class TestAggregatePair:
    def test_channel_count_l2_c16(self):
        rng = np.random.default_rng(7)
        ps = make_phi_params(2, 16, rng)
        f = Tensor(rng.standard_normal((16, 8, 8)).astype(np.float32))
        out = aggregate_pair(f, f, 2, ps, "self")
        assert out.values.data.shape == (32, 8, 8)
        assert out.source == "self"

    def test_constant_neighbor_gives_spatially_constant_output(self):
        rng = np.random.default_rng(8)
        ps = make_phi_params(2, 3, rng)
        f_ref = Tensor(rng.standard_normal((3, 8, 8)).astype(np.float32))
        f_nbr = Tensor(np.full((3, 8, 8), 0.7, np.float32))
        out = aggregate_pair(f_ref, f_nbr, 2, ps, "next").values.data
        for ch in range(out.shape[0]):
            assert np.abs(out[ch] - out[ch, 0, 0]).max() < 1e-6

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_component_oracle_composition(self, seed):
        rng = np.random.default_rng(seed)
        c, hw, L = 3, 8, 2
        ps = make_phi_params(L, c, rng, dtype=np.float64)
        f_ref = rng.standard_normal((c, hw, hw))
        f_nbr = rng.standard_normal((c, hw, hw))
        out = aggregate_pair(Tensor(f_ref), Tensor(f_nbr), L, ps, "prev").values.data

        blocks = []
        for k in range(1, L + 1):
            s = 1 << k
            pooled = f_nbr.reshape(c, hw // s, s, hw // s, s).max(axis=(2, 4))
            vol = naive_correlation_volume(f_ref, pooled)
            norm = vol / vol.sum(axis=(2, 3), keepdims=True)
            w_name, b_name = phi_param_names(k, "prev")
            w = ps[w_name].data[:, :, 0, 0]
            b = ps[b_name].data
            refined = np.einsum("oc,chw->ohw", w, pooled) + b[:, None, None]
            blocks.append(aggregate_oracle(norm, refined))
        expect = np.concatenate(blocks, axis=0)
        assert np.abs(out - expect).max() < 1e-6

    def test_non_divisible_dims_rejected(self):
        rng = np.random.default_rng(9)
        ps = make_phi_params(2, 2, rng)
        f = Tensor(np.zeros((2, 6, 6), np.float32))
        with pytest.raises(ValueError):
            aggregate_pair(f, f, 2, ps, "next")

    def test_unknown_source_rejected(self):
        rng = np.random.default_rng(10)
        ps = make_phi_params(1, 2, rng)
        f = Tensor(np.zeros((2, 4, 4), np.float32))
        with pytest.raises(ValueError):
            aggregate_pair(f, f, 1, ps, "future")

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradients_through_full_aggregation(self, seed):
        rng = np.random.default_rng(seed)
        c, hw = 2, 4
        ps = make_phi_params(1, c, rng, dtype=np.float64, sources=("next",))
        ps.add("ref", Tensor(rng.standard_normal((c, hw, hw)), requires_grad=True))
        ps.add("nbr", Tensor(rng.standard_normal((c, hw, hw)), requires_grad=True))
        cw = Tensor(rng.standard_normal((c, hw, hw)))

        def f(p):
            rho = aggregate_pair(p["ref"], p["nbr"], 1, p, "next")
            return sum_reduce(mul(rho.values, cw))

        assert grad_check(f, ps, step=1e-5) < 1e-5


class TestFuseThree:
    def test_channel_count_l3_c16(self):
        rng = np.random.default_rng(11)
        vals = [Tensor(rng.standard_normal((48, 4, 4)).astype(np.float32))
                for _ in range(3)]
        fused = fuse_three(AggregatedFeature(vals[0], "prev"),
                           AggregatedFeature(vals[1], "self"),
                           AggregatedFeature(vals[2], "next"))
        assert fused.data.shape == (144, 4, 4)

    def test_identical_inputs_repeat_in_blocks(self):
        rng = np.random.default_rng(12)
        v = rng.standard_normal((4, 3, 3)).astype(np.float32)
        fused = fuse_three(AggregatedFeature(Tensor(v.copy()), "prev"),
                           AggregatedFeature(Tensor(v.copy()), "self"),
                           AggregatedFeature(Tensor(v.copy()), "next")).data
        np.testing.assert_array_equal(fused[0:4], v)
        np.testing.assert_array_equal(fused[4:8], v)
        np.testing.assert_array_equal(fused[8:12], v)

    def test_swapping_values_swaps_blocks_only(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((2, 3, 3)).astype(np.float32)
        b = rng.standard_normal((2, 3, 3)).astype(np.float32)
        c = rng.standard_normal((2, 3, 3)).astype(np.float32)
        f1 = fuse_three(AggregatedFeature(Tensor(a), "prev"),
                        AggregatedFeature(Tensor(b), "self"),
                        AggregatedFeature(Tensor(c), "next")).data
        f2 = fuse_three(AggregatedFeature(Tensor(b), "prev"),
                        AggregatedFeature(Tensor(a), "self"),
                        AggregatedFeature(Tensor(c), "next")).data
        np.testing.assert_array_equal(f1[0:2], f2[2:4])
        np.testing.assert_array_equal(f1[2:4], f2[0:2])
        np.testing.assert_array_equal(f1[4:6], f2[4:6])

    def test_wrong_source_order_rejected(self):
        z = Tensor(np.zeros((2, 3, 3), np.float32))
        prev = AggregatedFeature(z, "prev")
        self_ = AggregatedFeature(z, "self")
        nxt = AggregatedFeature(z, "next")
        with pytest.raises(ValueError):
            fuse_three(self_, prev, nxt)
        with pytest.raises(ValueError):
            fuse_three(prev, prev, nxt)

    def test_unknown_source_label_rejected(self):
        with pytest.raises(ValueError):
            AggregatedFeature(Tensor(np.zeros((2, 3, 3), np.float32)), "center")
