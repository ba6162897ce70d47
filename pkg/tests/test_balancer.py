import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compbalance.attention import AttnMaps
from compbalance.balancer import (
    BalancerConfig,
    CoeMap,
    alignment_loss,
    balance_noise,
    box_ratio,
    coe_gradient,
    init_coe,
    lookahead_loss,
    loss_attn_cotangent,
    softmax_xi,
    update_coe,
)
from compbalance.conditions import Box, Layout
from compbalance.gradcheck import check_coe_gradient, make_instance
from oracles import alignment_loss_loop

finite = st.floats(-30, 30, allow_nan=False)


def random_attn(rng, H=4, W=4, N=4):
    a = rng.random((H, W, N))
    return AttnMaps(a / a.sum(-1, keepdims=True))


def random_mask(rng, H=4, W=4):
    m = (rng.random((H, W)) < 0.4).astype(float)
    m[rng.integers(H), rng.integers(W)] = 1
    return m


class TestCoefficients:
    def test_init_is_shared(self):
        c = init_coe(4, 4, 42)
        assert c.text.tobytes() == c.spatial.tobytes()
        np.testing.assert_array_equal(softmax_xi(c).text, 0.5)

    def test_init_golden(self):
        expected = [
            [-1.1043995228921153, 0.1891281100736375, 0.04600092882122236, -2.1076745327476445],
            [-0.5183129056007391, 0.05103482848136128, -1.5542361856105396, 1.0459855002307004],
            [-0.7409258302978787, 0.2848676213043933, -1.2160685356428795, -0.27026572859993947],
            [0.7939471408178163, -1.3564915692909494, 1.1954157163257786, -0.22528339898653543],
        ]
        np.testing.assert_array_equal(init_coe(4, 4, 42).text, expected)

    def test_init_accepts_generator(self):
        a = init_coe(3, 3, np.random.Generator(np.random.Philox(42)))
        np.testing.assert_array_equal(a.text, init_coe(3, 3, 42).text)

    def test_softmax_values(self):
        xi = softmax_xi(CoeMap(np.ones((1, 1)), np.zeros((1, 1))))
        assert round(float(xi.text[0, 0]), 6) == 0.731059
        sat = softmax_xi(CoeMap(np.full((2, 2), 50.0), np.zeros((2, 2))))
        np.testing.assert_allclose(sat.text, 1.0, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(a=st.lists(finite, min_size=4, max_size=4), b=st.lists(finite, min_size=4, max_size=4), shift=finite)
    def test_softmax_normalized_and_shift_invariant(self, a, b, shift):
        c = CoeMap(np.reshape(a, (2, 2)), np.reshape(b, (2, 2)))
        xi = softmax_xi(c)
        assert xi.normalization_error() <= 1e-6
        assert np.all(xi.text >= 0) and np.all(xi.text <= 1)
        moved = softmax_xi(CoeMap(c.text + shift, c.spatial + shift))
        np.testing.assert_allclose(moved.text, xi.text, atol=1e-12)

    def test_softmax_huge_values_stay_finite(self):
        xi = softmax_xi(CoeMap(np.full((2, 2), 800.0), np.full((2, 2), -800.0)))
        assert np.all(np.isfinite(xi.text)) and xi.normalization_error() == 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            CoeMap(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(FloatingPointError):
            CoeMap(np.full((2, 2), np.nan), np.zeros((2, 2)))
        for bad in (dict(rho=0), dict(rho=float("inf")), dict(inner_updates=-1), dict(gradient_mode="x"), dict(jacobian_mode="x")):
            with pytest.raises(ValueError):
                BalancerConfig(**bad)

    def test_rho_schedule(self):
        assert BalancerConfig().rho_at(7, 50) == 0.1
        c = BalancerConfig(rho=1.0, rho_end=0.1)
        assert c.rho_at(50, 50) == 1.0 and c.rho_at(1, 50) == pytest.approx(0.1)


class TestBalanceNoise:
    def test_identity_gate_and_midpoint(self, rng):
        e1, e2 = rng.standard_normal((2, 3, 3, 2))
        one = softmax_xi(CoeMap(np.full((3, 3), 60.0), np.zeros((3, 3))))
        np.testing.assert_allclose(balance_noise(one, e1, e2), e1, atol=1e-12)
        half = softmax_xi(CoeMap(np.zeros((1, 1)), np.zeros((1, 1))))
        assert balance_noise(half, np.full((1, 1, 1), 2.0), np.zeros((1, 1, 1)))[0, 0, 0] == 1.0

    def test_elementwise_oracle(self, rng):
        c = CoeMap(rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
        xi = softmax_xi(c)
        e1, e2 = rng.standard_normal((2, 4, 4, 3))
        out = balance_noise(xi, e1, e2)
        for r in range(4):
            for col in range(4):
                wt = math.exp(c.text[r, col]) / (math.exp(c.text[r, col]) + math.exp(c.spatial[r, col]))
                for ch in range(3):
                    assert out[r, col, ch] == pytest.approx(wt * e1[r, col, ch] + (1 - wt) * e2[r, col, ch], abs=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**20))
    def test_convex_identity(self, seed):
        r = np.random.default_rng(seed)
        c = CoeMap(5 * r.standard_normal((3, 3)), 5 * r.standard_normal((3, 3)))
        e = r.standard_normal((3, 3, 3))
        np.testing.assert_allclose(balance_noise(softmax_xi(c), e, e), e, atol=1e-13)

    def test_shape_mismatch(self, rng):
        xi = softmax_xi(init_coe(3, 3, 0))
        with pytest.raises(ValueError):
            balance_noise(xi, np.zeros((3, 3, 2)), np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            balance_noise(xi, np.zeros((4, 3, 2)), np.zeros((4, 3, 2)))


class TestLoss:
    def test_quarter_box_uniform(self):
        a = AttnMaps(np.full((8, 8, 4), 0.25))
        mask = np.zeros((8, 8))
        mask[:4, :4] = 1
        assert alignment_loss(a, a, [(mask, 2)]) == 1.5

    def test_zero_and_full(self):
        maps = np.zeros((4, 4, 2))
        maps[..., 0] = 1
        maps[:2, :2, 1], maps[:2, :2, 0] = 0.6, 0.4
        a = AttnMaps(maps)
        inside = np.zeros((4, 4))
        inside[:2, :2] = 1
        assert alignment_loss(a, a, [(inside, 1)]) == 0
        assert alignment_loss(a, a, [(1 - inside, 1)]) == 2

    def test_random_instances_match_loop_oracle(self, rng):
        for _ in range(50):
            a, b = random_attn(rng, 5, 6, 4), random_attn(rng, 5, 6, 4)
            masks = [(random_mask(rng, 5, 6), 1), (random_mask(rng, 5, 6), 3)]
            assert alignment_loss(a, b, masks) == pytest.approx(alignment_loss_loop(a.maps, b.maps, masks), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**20), boxes=st.integers(1, 3))
    def test_bounds(self, seed, boxes):
        r = np.random.default_rng(seed)
        a, b = random_attn(r), random_attn(r)
        masks = [(random_mask(r), j + 1) for j in range(boxes)]
        assert 0 <= alignment_loss(a, b, masks) <= 2 * boxes

    def test_zero_attention_is_guarded(self):
        maps = np.zeros((2, 2, 2))
        maps[..., 0] = 1
        a = AttnMaps(maps)
        assert box_ratio(a, np.ones((2, 2)), 1) == 0.0
        assert np.all(np.isfinite(loss_attn_cotangent(a, np.ones((2, 2)), 1)))

    def test_mask_errors(self):
        a = AttnMaps(np.full((2, 2, 2), 0.5))
        with pytest.raises(ValueError):
            box_ratio(a, np.ones((3, 2)), 1)
        with pytest.raises(ValueError):
            box_ratio(a, np.ones((2, 2)), 2)


class TestCotangent:
    def test_full_box_gives_zero(self, rng):
        a = random_attn(rng)
        np.testing.assert_allclose(loss_attn_cotangent(a, np.ones((4, 4)), 2), 0.0, atol=1e-15)

    def test_uniform_symbolic(self):
        u, H, W = 0.2, 4, 5
        P = H * W
        a = AttnMaps(np.full((H, W, 5), u))
        mask = np.zeros((H, W))
        mask[:2, :3] = 1
        m = mask.sum()
        cot = loss_attn_cotangent(a, mask, 1)
        np.testing.assert_allclose(cot[mask == 1], (m - P) / (P**2 * u), rtol=1e-12)
        np.testing.assert_allclose(cot[mask == 0], m / (P**2 * u), rtol=1e-12)

    def test_finite_differences(self, rng):
        a = random_attn(rng)
        mask = random_mask(rng)
        other = random_attn(rng)
        cot = loss_attn_cotangent(a, mask, 2)
        h = 1e-5
        for idx in np.ndindex(4, 4):
            p, m = a.maps.copy(), a.maps.copy()
            p[idx + (2,)] += h
            m[idx + (2,)] -= h
            fd = (alignment_loss(AttnMaps(p), other, [(mask, 2)]) - alignment_loss(AttnMaps(m), other, [(mask, 2)])) / (2 * h)
            assert cot[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestGradient:
    def test_full_image_boxes_give_zero(self, tokens, sched):
        inst = make_instance("analytic", 8, 20, seed=3)
        full = Layout(tuple(Box(0, 0, 1, 1, b.token_index, b.name) for b in inst.layout.boxes))
        for mode in ("paper", "full"):
            g = coe_gradient(inst.z, 20, inst.coe, inst.fidelity, inst.spatial, inst.tokens, full, inst.sched,
                             BalancerConfig(gradient_mode=mode))
            np.testing.assert_allclose(g.text, 0.0, atol=1e-14)
            np.testing.assert_allclose(g.spatial, 0.0, atol=1e-14)
            assert g.loss == pytest.approx(0.0, abs=1e-12)

    def test_equal_branch_noise(self):
        inst = make_instance("analytic", 8, 20, seed=4)
        e = inst.fidelity.denoise(inst.z, 20, inst.tokens).eps
        args = (inst.z, 20, inst.coe, inst.fidelity, inst.spatial, inst.tokens, inst.layout, inst.sched)
        full = coe_gradient(*args, BalancerConfig(gradient_mode="full"), eps_text=e, eps_spatial=e)
        paper = coe_gradient(*args, BalancerConfig(gradient_mode="paper"), eps_text=e, eps_spatial=e)
        np.testing.assert_array_equal(full.text, 0.0)
        assert np.abs(paper.text).max() > 0

    def test_paper_mode_is_half_the_full_difference(self):
        inst = make_instance("analytic", 8, 15, seed=5)
        args = (inst.z, 15, inst.coe, inst.fidelity, inst.spatial, inst.tokens, inst.layout, inst.sched)
        full = coe_gradient(*args, BalancerConfig(gradient_mode="full"))
        paper = coe_gradient(*args, BalancerConfig(gradient_mode="paper"))
        np.testing.assert_allclose(paper.text - paper.spatial, 0.5 * (full.text - full.spatial), atol=1e-15)

    @pytest.mark.parametrize("kind", ["analytic", "micro"])
    @pytest.mark.parametrize("t", [45, 25, 6])
    def test_full_mode_matches_finite_differences(self, kind, t):
        inst = make_instance(kind, 8, t, seed=t + 1)
        for res in check_coe_gradient(inst, BalancerConfig(gradient_mode="full"), step=1e-3):
            assert res.passed, res.line()

    def test_paper_mode_is_not_exact(self):
        inst = make_instance("analytic", 8, 25, seed=0)
        assert not all(r.passed for r in check_coe_gradient(inst, BalancerConfig(gradient_mode="paper")))

    def test_sigma_positive_needs_paper_jacobian_mode(self):
        inst = make_instance("analytic", 8, 25, seed=0, eta=1.0)
        good = check_coe_gradient(inst, BalancerConfig(gradient_mode="full", jacobian_mode="paper"))
        bad = check_coe_gradient(inst, BalancerConfig(gradient_mode="full", jacobian_mode="consistent"))
        assert all(r.passed for r in good)
        assert not any(r.passed for r in bad)

    def test_gradient_loss_matches_lookahead(self):
        inst = make_instance("micro", 8, 30, seed=2)
        e_t = inst.fidelity.denoise(inst.z, 30, inst.tokens).eps
        e_s = inst.spatial.denoise(inst.z, 30, inst.tokens, inst.layout).eps
        g = coe_gradient(inst.z, 30, inst.coe, inst.fidelity, inst.spatial, inst.tokens, inst.layout, inst.sched,
                         BalancerConfig())
        ref = lookahead_loss(inst.z, 30, inst.coe, e_t, e_s, inst.fidelity, inst.spatial, inst.tokens,
                             inst.layout, inst.sched)
        assert g.loss == pytest.approx(ref, abs=1e-14)

    def test_descent_on_small_instances(self):
        wins = 0
        for seed in range(100):
            inst = make_instance("analytic", 8, int(np.random.default_rng(seed).integers(2, 51)), seed=seed)
            cfg = BalancerConfig(rho=0.1, gradient_mode="full")
            e_t = inst.fidelity.denoise(inst.z, inst.t, inst.tokens).eps
            e_s = inst.spatial.denoise(inst.z, inst.t, inst.tokens, inst.layout).eps
            g = coe_gradient(inst.z, inst.t, inst.coe, inst.fidelity, inst.spatial, inst.tokens, inst.layout,
                             inst.sched, cfg, eps_text=e_t, eps_spatial=e_s)
            after = lookahead_loss(inst.z, inst.t, update_coe(inst.coe, g, 0.1), e_t, e_s, inst.fidelity,
                                   inst.spatial, inst.tokens, inst.layout, inst.sched)
            wins += after < g.loss
        assert wins >= 95


class TestUpdate:
    def test_null_steps(self, rng):
        c = CoeMap(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)))
        g = (rng.standard_normal((3, 3)), rng.standard_normal((3, 3)))
        assert update_coe(c, g, 0.0).text.tobytes() == c.text.tobytes()
        z = (np.zeros((3, 3)), np.zeros((3, 3)))
        assert update_coe(c, z, 0.5).spatial.tobytes() == c.spatial.tobytes()
        out = update_coe(c, g, 0.1)
        np.testing.assert_allclose(out.text, c.text - 0.1 * g[0])
        np.testing.assert_allclose(out.spatial, c.spatial - 0.1 * g[1])

    def test_guards(self):
        c = init_coe(2, 2, 0)
        with pytest.raises(FloatingPointError):
            update_coe(c, (np.full((2, 2), np.inf), np.zeros((2, 2))), 0.1)
        with pytest.raises(ValueError):
            update_coe(c, (np.zeros((3, 2)), np.zeros((3, 2))), 0.1)
