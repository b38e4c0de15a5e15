import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcl.errors import DataError, ParameterError
from mvcl.evaluation import (DirectionResult, GroundTruth, RetrievalReport, mean_recall,
                             recall_at_k, recalls)

from _oracles import recall_oracle


def random_instance(rng, with_excluded=False):
    q, g = rng.integers(1, 33, size=2)
    # coarse values make ties common
    sim = rng.integers(-3, 4, size=(q, g)) / 3.0 if rng.random() < 0.5 else rng.normal(size=(q, g))
    relevant, excluded = [], []
    for _ in range(q):
        size = int(rng.integers(1, min(g, 4) + 1))
        relevant.append(set(rng.choice(g, size=size, replace=False).tolist()))
        if with_excluded:
            pool = [j for j in range(g) if j not in relevant[-1]]
            excluded.append(set(rng.choice(pool, size=min(1, len(pool)), replace=False).tolist()))
    return sim, relevant, (excluded if with_excluded else None), int(g)


class TestRecallOracle:
    def test_thousand_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            sim, rel, exc, g = random_instance(rng, with_excluded=rng.random() < 0.3)
            gt = GroundTruth(rel, g, exc)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = [recall_at_k(sim, gt, k) for k in (1, 5, 10)]
            want = [recall_oracle(sim, rel, k, exc) for k in (1, 5, 10)]
            assert got == want
            assert got[0] <= got[1] <= got[2]

    def test_recalls_agrees_with_recall_at_k(self):
        rng = np.random.default_rng(1)
        sim, rel, _, g = random_instance(rng)
        gt = GroundTruth(rel, g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert recalls(sim, gt) == {k: recall_at_k(sim, gt, k) for k in (1, 5, 10)}


class TestTies:
    def test_lower_index_wins_a_tie(self):
        sim = np.array([[0.5, 0.5, 0.5]])
        assert recall_at_k(sim, GroundTruth([{0}], 3), 1) == 1.0
        assert recall_at_k(sim, GroundTruth([{2}], 3), 1) == 0.0
        assert recall_at_k(sim, GroundTruth([{2}], 3), 3) == 1.0

    def test_excluded_item_never_counts(self):
        sim = np.array([[0.9, 0.1]])
        gt = GroundTruth([{0, 1}], 2, excluded=[{0}])
        assert recall_at_k(sim, gt, 1) == 1.0  # item 1 moves up to rank 0
        only_excluded = GroundTruth([{0}], 2, excluded=[{0}])
        assert recall_at_k(sim, only_excluded, 1) == 0.0


class TestInvariances:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 10.0), st.floats(-5, 5))
    def test_positive_affine_map_preserves_recall(self, seed, a, b):
        rng = np.random.default_rng(seed)
        sim = rng.normal(size=(6, 9))
        gt = GroundTruth([{int(j)} for j in rng.integers(0, 9, 6)], 9)
        assert recalls(sim, gt) == recalls(a * sim + b, gt)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_query_permutation_preserves_recall(self, seed):
        rng = np.random.default_rng(seed)
        sim = rng.normal(size=(7, 8))
        rel = [{int(j)} for j in rng.integers(0, 8, 7)]
        perm = rng.permutation(7)
        a = recalls(sim, GroundTruth(rel, 8))
        b = recalls(sim[perm], GroundTruth([rel[i] for i in perm], 8))
        assert a == pytest.approx(b, abs=1e-15)

    def test_perfect_scores(self):
        assert recalls(np.eye(5), GroundTruth([{i} for i in range(5)], 5)) == {1: 1.0, 5: 1.0, 10: 1.0}


class TestMeanRecall:
    def test_arithmetic(self):
        assert mean_recall(0.3, 0.6, 0.9) == pytest.approx(0.6, abs=1e-15)

    def test_two_direction_aggregate(self):
        # overall = mean of the I2T and T2I meanRecalls
        assert round((81.9 + 91.6) / 2, 2) == 86.75
        rep = RetrievalReport({"I2T": DirectionResult(10, 0.819, 0.819, 0.819),
                               "T2I": DirectionResult(10, 0.916, 0.916, 0.916),
                               "I2I": DirectionResult(0), "T2T": DirectionResult(0)})
        assert 100 * rep.overall == pytest.approx(86.75, abs=1e-9)
        assert round(100 * rep.overall, 1) == 86.8

    def test_rejects_out_of_range(self):
        with pytest.raises(ParameterError):
            mean_recall(1.2, 0.5, 0.5)


class TestGroundTruth:
    def test_from_keys_groups(self):
        gt = GroundTruth.from_keys(["a", "b", "a"], ["a", "b", "a"])
        assert gt.relevant == [frozenset({0, 2}), frozenset({1}), frozenset({0, 2})]

    def test_leave_self_out_drops_singletons(self):
        gt, kept = GroundTruth.from_keys(["a", "b", "a"], ["a", "b", "a"], leave_self_out=True)
        assert kept.tolist() == [0, 2]
        assert gt.relevant == [frozenset({2}), frozenset({0})]
        assert gt.excluded == [frozenset({0}), frozenset({2})]

    def test_none_key_is_self_relevant(self):
        assert GroundTruth.from_keys([None, None], [None, None]).relevant == [{0}, {1}]

    def test_validation(self):
        with pytest.raises(DataError):
            GroundTruth([set()], 3)
        with pytest.raises(DataError):
            GroundTruth([{3}], 3)
        with pytest.raises(ParameterError):
            recall_at_k(np.zeros((2, 3)), GroundTruth([{0}], 3), 1)
        with pytest.raises(ParameterError):
            recall_at_k(np.zeros((1, 3)), GroundTruth([{0}], 3), 0)

    def test_k_beyond_gallery_warns_and_clamps(self):
        with pytest.warns(UserWarning):
            assert recall_at_k(np.zeros((1, 3)), GroundTruth([{2}], 3), 10) == 1.0


def test_report_json_is_stable():
    rep = RetrievalReport({d: DirectionResult(3, 0.5, 0.75, 1.0) for d in ("I2T", "T2I", "I2I", "T2T")})
    assert rep.to_json() == rep.to_json()
    data = json.loads(rep.to_json())
    assert data["overall_mR"] == pytest.approx(0.75)
    assert "overall cross-modal mR: 75.00" in rep.to_table()


class TestWorkedExamples:
    def test_identity_dominant(self):
        sim = np.full((4, 4), 0.3) + 0.7 * np.eye(4)
        assert recall_at_k(sim, GroundTruth([{i} for i in range(4)], 4), 1) == 1.0

    def test_all_equal_scores(self):
        assert recall_at_k(np.ones((10, 10)), GroundTruth([{i} for i in range(10)], 10), 1) == 0.1

    def test_small_multi_relevant_instance(self):
        rng = np.random.default_rng(3)
        sim = rng.normal(size=(6, 8))
        rel = [{0, 3}, {1}, {2, 5, 7}, {4}, {6, 0}, {1, 2}]
        for k in (1, 5):
            assert recall_at_k(sim, GroundTruth(rel, 8), k) == recall_oracle(sim, rel, k)

    def test_mean_recall_examples(self):
        assert mean_recall(1, 1, 1) == 1
        assert mean_recall(0.2, 0.5, 0.8) == pytest.approx(0.5, abs=1e-15)


class TestEndToEnd:
    def test_single_pair_dataset(self):
        from _tiny import tiny_data
        from mvcl.trainer import init_state
        from mvcl.evaluation import zero_shot_retrieval
        from _tiny import tiny_config

        d = tiny_data(n=1)
        rep = zero_shot_retrieval(init_state(tiny_config(), len(d.vocab)).model, d.samples)
        assert rep.directions["I2T"].r1 == 1.0 and rep.directions["T2I"].r1 == 1.0

    def test_separable_data_converges(self):
        from mvcl.config import load_config
        from mvcl.data import SynthConfig, synth_generate
        from mvcl.evaluation import zero_shot_retrieval
        from mvcl.trainer import train

        ds = synth_generate(SynthConfig(n_samples=128, max_factors=1, caption_noise_rate=0.0,
                                        n_objects=2, n_attributes=3, max_noise=0.0, seed=0))
        cfg = load_config(overrides={"model": "A", "train.total_steps": 200,
                                     "train.warmup_steps": 20, "train.batch_size": 32})
        state, _ = train(cfg, ds.samples, ds.vocab)
        rep = zero_shot_retrieval(state.model, ds.samples)
        assert rep.directions["I2T"].r1 >= 0.9 and rep.directions["T2I"].r1 >= 0.9
        for d in rep.directions.values():
            if d.r1 is not None:
                assert d.r1 <= d.r5 <= d.r10

    def test_untrained_models_agree_across_presets(self):
        from _tiny import tiny_config, tiny_data
        from mvcl.evaluation import run_ablation

        d = tiny_data(n=40)
        res = run_ablation(tiny_config(**{"train.total_steps": 0}), d.samples[:24], d.samples[24:],
                           d.vocab, seeds=[0])
        overall = {m: r[0].overall for m, r in res.reports.items()}
        assert len(set(overall.values())) == 1
        assert len(res.to_table().splitlines()) == 6
