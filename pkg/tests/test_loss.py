import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcl import tensor as T
from mvcl.errors import DimensionError, ParameterError
from mvcl.loss import (DEFAULT_LAMBDAS, LossConfig, PairType, info_nce, info_nce_tensor,
                       multi_view_loss, multi_view_loss_tensor, similarity_matrix)
from mvcl.tensor import Tensor, grad_check

from _oracles import info_nce_mp, lambda_weighted_sum, multi_view_cases, unit_rows


def _views(seed, n=6, d=8):
    rng = np.random.default_rng(seed)
    return {k: unit_rows(rng, n, d) for k in ("I_v1", "I_v2", "T_v1", "T_v2")}


class TestInfoNCEOracle:
    @pytest.mark.parametrize("n", [1, 2, 4, 8, 16])
    @pytest.mark.parametrize("tau", [0.05, 0.1, 1.0])
    def test_matches_extended_precision(self, n, tau):
        rng = np.random.default_rng(1000 * n + int(100 * tau))
        for _ in range(7):
            hx, hy = unit_rows(rng, n, 8), unit_rows(rng, n, 8)
            assert abs(info_nce(hx, hy, tau) - info_nce_mp(hx, hy, tau)) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.floats(0.02, 2.0), st.integers(0, 2**31))
    def test_oracle_on_random_shapes(self, n, d, tau, seed):
        rng = np.random.default_rng(seed)
        hx, hy = unit_rows(rng, n, d), unit_rows(rng, n, d)
        assert abs(info_nce(hx, hy, tau) - info_nce_mp(hx, hy, tau)) < 1e-9


class TestClosedForms:
    def test_single_pair_is_exactly_zero(self):
        x = unit_rows(np.random.default_rng(0), 1, 8)
        assert info_nce(x, x, 0.07) == 0.0

    def test_identical_rows_give_log_n(self):
        v = np.ones((4, 8)) / np.sqrt(8)
        assert abs(info_nce(v, v, 0.07) - math.log(4)) < 1e-9

    def test_total_is_lambda_weighted_sum(self):
        views = _views(1)
        lam = {PairType.II: 0.3, PairType.TT: 0.7, PairType.IT: 1.0, PairType.TI: 1.5}
        br = multi_view_loss(views, LossConfig(tau=0.1, lambdas=lam))
        assert abs(br.total - math.fsum(lam[p] * br.per_pair[p] for p in PairType)) < 1e-10
        assert abs(br.total - lambda_weighted_sum(views, lam, 0.1)) < 1e-10

    def test_tensor_total_equals_breakdown(self):
        total, br = multi_view_loss_tensor(_views(2), LossConfig(tau=0.2))
        assert abs(total.item() - br.total) < 1e-12

    def test_zero_weight_views_may_be_omitted(self):
        v = _views(3)
        lam = {PairType.II: 0.0, PairType.TT: 0.0, PairType.IT: 1.0, PairType.TI: 1.0}
        br = multi_view_loss({"I_v1": v["I_v1"], "T_v1": v["T_v1"]}, LossConfig(lambdas=lam))
        assert set(br.per_pair) == {PairType.IT, PairType.TI}

    def test_extra_pairs_add_second_view_terms(self):
        v = _views(4)
        base = multi_view_loss(v, LossConfig(tau=0.1)).total
        extra = multi_view_loss(v, LossConfig(tau=0.1, extra_pairs=True)).total
        want = base + info_nce(v["I_v2"], v["T_v2"], 0.1) + info_nce(v["T_v2"], v["I_v2"], 0.1)
        assert abs(extra - want) < 1e-10


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**31))
    def test_nonnegative_and_bounded_by_uniform_worst_case(self, n, seed):
        rng = np.random.default_rng(seed)
        hx, hy = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
        tau = 0.5
        # logits lie in [-1/tau, 1/tau], so loss <= log n + 2/tau
        assert 0.0 <= info_nce(hx, hy, tau) <= math.log(n) + 2 / tau + 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31))
    def test_joint_permutation_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        hx, hy = unit_rows(rng, n, 6), unit_rows(rng, n, 6)
        perm = rng.permutation(n)
        assert abs(info_nce(hx, hy, 0.1) - info_nce(hx[perm], hy[perm], 0.1)) < 1e-12

    def test_perfect_alignment_beats_misalignment(self):
        x = np.eye(4)
        assert info_nce(x, x, 0.1) < info_nce(x, x[::-1], 0.1)

    def test_similarity_is_cosine_for_unit_rows(self):
        rng = np.random.default_rng(5)
        a, b = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
        np.testing.assert_allclose(similarity_matrix(a, b).data, a @ b.T, rtol=1e-14)


class TestGradients:
    @pytest.mark.parametrize("name,f,x0", multi_view_cases(), ids=[c[0] for c in multi_view_cases()])
    def test_full_objective(self, name, f, x0):
        assert grad_check(f, x0, h=1e-5) < 1e-3

    def test_info_nce_gradient_both_sides(self):
        rng = np.random.default_rng(6)
        a, b = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8)
        assert grad_check(lambda x: info_nce_tensor(x, Tensor(b), 0.1), a) < 1e-3
        assert grad_check(lambda y: info_nce_tensor(Tensor(a), y, 0.1), b) < 1e-3

    def test_per_pair_temperatures(self):
        v = _views(7, n=4)
        cfg = LossConfig(per_pair_tau=True)
        taus = {p: Tensor(t, requires_grad=True) for p, t in zip(PairType, (0.1, 0.2, 0.3, 0.4))}
        total, br = multi_view_loss_tensor(v, cfg, taus)
        total.backward()
        for p in PairType:
            a, b = {"II": ("I_v1", "I_v2"), "TT": ("T_v1", "T_v2"),
                    "IT": ("I_v1", "T_v1"), "TI": ("T_v1", "I_v1")}[p.value]
            assert abs(br.per_pair[p] - info_nce(v[a], v[b], taus[p].item())) < 1e-12
            assert taus[p].grad is not None


class TestValidation:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            info_nce(np.ones((3, 4)), np.ones((2, 4)), 0.1)

    def test_nonpositive_tau(self):
        with pytest.raises(ParameterError):
            info_nce(np.eye(2), np.eye(2), 0.0)

    def test_negative_lambda(self):
        with pytest.raises(ParameterError):
            LossConfig(lambdas={**DEFAULT_LAMBDAS, PairType.II: -1.0})

    def test_tau_outside_clip_range(self):
        with pytest.raises(ParameterError):
            LossConfig(tau=0.9)

    def test_views_disagree_in_shape(self):
        v = _views(8)
        v["T_v2"] = v["T_v2"][:3]
        with pytest.raises(DimensionError):
            multi_view_loss(v, LossConfig())

    def test_missing_weighted_view(self):
        v = _views(9)
        del v["I_v2"]
        with pytest.raises(DimensionError):
            multi_view_loss(v, LossConfig())


def test_no_grad_loss_value_matches():
    v = _views(10)
    with T.no_grad():
        a = multi_view_loss(v, LossConfig()).total
    assert a == multi_view_loss(v, LossConfig()).total


class TestWorkedExamples:
    def test_orthonormal_rows_give_identity(self):
        np.testing.assert_array_equal(similarity_matrix(np.eye(3), np.eye(3)).data, np.eye(3))

    def test_self_similarity_diagonal_is_one(self):
        h = unit_rows(np.random.default_rng(0), 5, 7)
        np.testing.assert_allclose(np.diag(similarity_matrix(h, h).data), 1.0, atol=1e-15)

    def test_hand_specified_rows(self):
        hx = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
        hy = np.array([[0.8, 0.6], [0.0, 1.0], [-1.0, 0.0]])
        assert abs(info_nce(hx, hy, 1.0) - info_nce_mp(hx, hy, 1.0)) < 1e-12

    def test_all_zero_weights_give_zero(self):
        lam = {p: 0.0 for p in PairType}
        total, br = multi_view_loss_tensor(_views(11), LossConfig(lambdas=lam))
        assert total.item() == 0.0 and br.total == 0.0

    def test_single_inter_modal_term(self):
        v = _views(12)
        lam = {PairType.II: 0.0, PairType.TT: 0.0, PairType.IT: 1.0, PairType.TI: 0.0}
        assert multi_view_loss(v, LossConfig(tau=0.1, lambdas=lam)).total == \
            info_nce(v["I_v1"], v["T_v1"], 0.1)

    def test_unit_weights_sum_four_terms(self):
        v = _views(13, n=4)
        lam = {p: 1.0 for p in PairType}
        want = math.fsum(info_nce_mp(v[a], v[b], 0.1) for a, b in
                         [("I_v1", "I_v2"), ("T_v1", "T_v2"), ("I_v1", "T_v1"), ("T_v1", "I_v1")])
        assert abs(multi_view_loss(v, LossConfig(tau=0.1, lambdas=lam)).total - want) < 1e-10
