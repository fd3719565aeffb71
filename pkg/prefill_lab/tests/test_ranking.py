import unittest
import numpy as np
import sys
import os
import tempfile

# Add the parent directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.engine import ForwardTrace, LayerTrace, OracleTrace
from src.errors import ConfigError, OracleUndefinedError, RankingError
from src.ranking import (
    ImportanceScores,
    LayerScoreBuffer,
    RankingParams,
    claa_aggregate,
    gemfilter_score,
    keep_count,
    kv_group_score,
    kv_group_scores,
    oracle_score,
    pool1d,
    spec_prefill_score,
    topk_indices,
    window_force,
    window_score,
)


def make_trace(layers):
    """layers: {index: (queries [H, L, dk], keys [G, L, dk])}."""
    traces = {l: LayerTrace(np.asarray(q, dtype=np.float32), np.asarray(k, dtype=np.float32))
              for l, (q, k) in layers.items()}
    length = next(iter(traces.values())).length
    return ForwardTrace(length, traces)


def scores(values):
    return ImportanceScores(np.asarray(values, dtype=np.float64))


class TestGemFilterScore(unittest.TestCase):

    def test_single_head(self):
        trace = make_trace({0: ([[[0.0, 1.0], [1.0, 0.0]]], [[[1.0, 0.0], [0.0, 1.0]]])})
        np.testing.assert_allclose(gemfilter_score(trace, 0).values, [1 / np.sqrt(2), 0.0], atol=1e-7)

    def test_two_identical_heads_double(self):
        q = [[0.3, 1.0], [1.0, 0.2]]
        k = [[[1.0, 0.5], [0.1, 1.0]]]
        one = gemfilter_score(make_trace({0: ([q], k)}), 0).values
        two = gemfilter_score(make_trace({0: ([q, q], k)}), 0).values
        np.testing.assert_allclose(two, 2 * one, rtol=1e-6)

    def test_orthogonal_keys(self):
        trace = make_trace({0: ([[[0.0, 0.0], [1.0, 0.0]]], [[[0.0, 1.0], [0.0, 2.0]]])})
        np.testing.assert_array_equal(gemfilter_score(trace, 0).values, [0.0, 0.0])

    def test_linear_in_last_query(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(2, 6, 4))
        k = rng.normal(size=(1, 6, 4))
        base = gemfilter_score(make_trace({0: (q, k)}), 0).values
        scaled = q.copy()
        scaled[:, -1] *= 3.0
        np.testing.assert_allclose(gemfilter_score(make_trace({0: (scaled, k)}), 0).values, 3 * base, rtol=1e-5)

    def test_layer_not_captured(self):
        trace = make_trace({0: ([[[1.0, 0.0]]], [[[1.0, 0.0]]])})
        with self.assertRaises(RankingError):
            gemfilter_score(trace, 3)


class TestWindowScore(unittest.TestCase):

    def test_uniform_keys(self):
        q = np.ones((3, 2, 2))
        k = np.ones((1, 2, 2))
        np.testing.assert_allclose(window_score(make_trace({0: (q, k)}), 0, 1).values, [1.5, 1.5], rtol=1e-6)

    def test_single_head_sums_to_window(self):
        rng = np.random.default_rng(1)
        trace = make_trace({0: (rng.normal(size=(1, 12, 4)), rng.normal(size=(1, 12, 4)))})
        for window in (1, 5, 12):
            self.assertAlmostEqual(window_score(trace, 0, window).values.sum(), window, delta=1e-5)

    def test_saturating_key(self):
        q = np.tile([10.0, 0.0], (2, 4, 1))
        k = np.array([[[100.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]])
        s = window_score(make_trace({0: (q, k)}), 0, 3).values
        self.assertAlmostEqual(s[0], 3 * 2, places=4)

    def test_window_longer_than_sequence(self):
        trace = make_trace({0: (np.ones((1, 3, 2)), np.ones((1, 3, 2)))})
        with self.assertRaises(RankingError):
            window_score(trace, 0, 4)


class TestKvGroupScore(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(2)
        self.q = rng.normal(size=(4, 10, 4))
        self.k = rng.normal(size=(4, 10, 4))

    def test_single_group_is_mean(self):
        trace = make_trace({0: (self.q, self.k[:1])})
        np.testing.assert_allclose(kv_group_score(trace, 0, 3, 0).values, window_score(trace, 0, 3).values / 4,
                                   rtol=1e-6)

    def test_singleton_groups(self):
        trace = make_trace({0: (self.q, self.k)})
        for g in range(4):
            single = make_trace({0: (self.q[g:g + 1], self.k[g:g + 1])})
            np.testing.assert_allclose(kv_group_score(trace, 0, 3, g).values, window_score(single, 0, 3).values,
                                       rtol=1e-6)

    def test_swapping_groups_swaps_scores(self):
        q, k = self.q, self.k[:2]
        swapped_q = np.concatenate([q[2:], q[:2]])
        swapped_k = k[::-1]
        a = kv_group_scores(make_trace({0: (q, k)}), 0, 4)
        b = kv_group_scores(make_trace({0: (swapped_q, swapped_k)}), 0, 4)
        np.testing.assert_allclose(a[0].values, b[1].values, rtol=1e-6)
        np.testing.assert_allclose(a[1].values, b[0].values, rtol=1e-6)

    def test_head_to_group_mapping(self):
        lt = LayerTrace(self.q, self.k[:2])
        self.assertEqual(lt.group_size, 2)
        self.assertEqual([lt.group_of(h) for h in range(4)], [0, 0, 1, 1])

    def test_bad_group(self):
        with self.assertRaises(RankingError):
            kv_group_score(make_trace({0: (self.q, self.k[:2])}), 0, 3, 2)


def lookahead(queries):
    """queries: [steps, layers, H, dk]"""
    queries = np.asarray(queries, dtype=np.float32)
    return OracleTrace(tokens=list(range(len(queries))), queries=list(queries))


class TestLookaheadScores(unittest.TestCase):

    def test_single_row(self):
        trace = make_trace({0: (np.zeros((1, 2, 2)), [[[2.0, 0.0], [1.0, 0.0]]])})
        gen = lookahead([[[[1.0, 0.0]]]])
        np.testing.assert_allclose(spec_prefill_score(trace, gen).values, np.array([2.0, 1.0]) / np.sqrt(2),
                                   rtol=1e-6)

    def test_duplicate_tokens_unchanged(self):
        rng = np.random.default_rng(3)
        trace = make_trace({0: (np.zeros((2, 5, 4)), rng.normal(size=(1, 5, 4)))})
        q = rng.normal(size=(1, 2, 4))
        np.testing.assert_allclose(spec_prefill_score(trace, lookahead([q, q])).values,
                                   spec_prefill_score(trace, lookahead([q])).values, rtol=1e-6)

    def test_max_over_layers(self):
        keys = np.array([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]])
        shifted = keys + np.array([1.0, 0.0])
        trace = make_trace({0: (np.zeros((1, 3, 2)), keys), 1: (np.zeros((1, 3, 2)), shifted)})
        gen = lookahead([[[[np.sqrt(2), 0.0]], [[np.sqrt(2), 0.0]]]])
        layer_two = np.array([2.0, 1.0, 2.0])
        np.testing.assert_allclose(spec_prefill_score(trace, gen).values, layer_two, rtol=1e-6)

    def test_empty_lookahead(self):
        trace = make_trace({0: (np.zeros((1, 2, 2)), np.ones((1, 2, 2)))})
        with self.assertRaises(RankingError):
            spec_prefill_score(trace, OracleTrace())

    def test_oracle_degenerate_composition(self):
        trace = make_trace({0: (np.zeros((1, 2, 1)), [[[2.0], [1.0]]])})
        np.testing.assert_allclose(oracle_score(trace, lookahead([[[[1.0]]]]), 1).values, [2.0, 1.0])

    def test_oracle_identical_tokens(self):
        rng = np.random.default_rng(4)
        trace = make_trace({0: (np.zeros((2, 6, 4)), rng.normal(size=(2, 6, 4)))})
        q = rng.normal(size=(1, 2, 4))
        np.testing.assert_allclose(oracle_score(trace, lookahead([q, q]), 3).values,
                                   oracle_score(trace, lookahead([q]), 3).values, rtol=1e-6)

    def test_oracle_undefined(self):
        trace = make_trace({0: (np.zeros((1, 2, 2)), np.ones((1, 2, 2)))})
        with self.assertRaisesRegex(OracleUndefinedError, "oracle undefined"):
            oracle_score(trace, OracleTrace(), 1)

    def test_mean_head_reduce(self):
        trace = make_trace({0: (np.zeros((2, 2, 1)), [[[2.0], [1.0]]])})
        gen = lookahead([[[[1.0], [3.0]]]])
        np.testing.assert_allclose(oracle_score(trace, gen, 1, "mean").values, [4.0, 2.0])
        np.testing.assert_allclose(oracle_score(trace, gen, 1, "max").values, [6.0, 3.0])


class TestAggregationAndPooling(unittest.TestCase):

    def test_claa_elementwise_max(self):
        np.testing.assert_array_equal(claa_aggregate([scores([1, 0]), scores([0, 2])]).values, [1, 2])

    def test_claa_single_entry(self):
        np.testing.assert_array_equal(claa_aggregate([scores([3, 1, 2])]).values, [3, 1, 2])

    def test_claa_dominates(self):
        rng = np.random.default_rng(5)
        buffer = [scores(rng.normal(size=20)) for _ in range(4)]
        agg = claa_aggregate(buffer).values
        for entry in buffer:
            self.assertTrue(np.all(agg >= entry.values))

    def test_claa_errors(self):
        with self.assertRaises(RankingError):
            claa_aggregate([])
        with self.assertRaises(RankingError):
            claa_aggregate([scores([1, 2]), scores([1, 2, 3])])

    def test_buffer_evicts_oldest(self):
        buffer = LayerScoreBuffer(2)
        for layer in range(4):
            buffer.push(ImportanceScores(np.full(3, float(layer)), layer))
        self.assertEqual([s.layer for s in buffer], [2, 3])
        np.testing.assert_array_equal(claa_aggregate(buffer).values, [3, 3, 3])

    def test_pool_identity(self):
        s = scores([1, 5, 2])
        self.assertIs(pool1d(s, 1), s)

    def test_pool_constant(self):
        np.testing.assert_allclose(pool1d(scores([5, 5, 5]), 3).values, [5, 5, 5])

    def test_pool_spike(self):
        np.testing.assert_allclose(pool1d(scores([0, 0, 3, 0, 0]), 3).values, [0, 1, 1, 1, 0])

    def test_pool_partial_edges(self):
        np.testing.assert_allclose(pool1d(scores([3, 0, 0]), 3).values, [1.5, 1.0, 0.0])

    def test_pool_kernel_longer_than_input(self):
        np.testing.assert_allclose(pool1d(scores([2, 4]), 7).values, [3, 3])

    def test_pool_even_kernel(self):
        with self.assertRaises(RankingError):
            pool1d(scores([1, 2, 3]), 2)


class TestSelection(unittest.TestCase):

    def test_keep_count(self):
        self.assertEqual(keep_count(0.2, 100), 20)
        self.assertEqual(keep_count(0.1, 4), 1)
        self.assertEqual(keep_count(1.0, 57), 57)
        self.assertEqual(keep_count(0.25, 10), 3)

    def test_keep_count_bad_rate(self):
        with self.assertRaises(RankingError):
            keep_count(0.0, 10)

    def test_topk_selection(self):
        np.testing.assert_array_equal(topk_indices(scores([0.1, 0.9, 0.5]), 2), [1, 2])
        np.testing.assert_array_equal(topk_indices(scores([0.5, 0.5, 0.1]), 1), [0])
        np.testing.assert_array_equal(topk_indices(scores([0.9, 0.1, 0.2]), 2, {2}), [0, 2])

    def test_topk_forced_array(self):
        s = scores([9, 8, 7, 6, 5, 0, 0, 0])
        np.testing.assert_array_equal(topk_indices(s, 4, np.arange(5, 8)), [0, 5, 6, 7])
        np.testing.assert_array_equal(topk_indices(s, 3, window_force(8, 8, 3)), [5, 6, 7])
        np.testing.assert_array_equal(topk_indices(s, 2, np.empty(0, dtype=np.int64)), [0, 1])

    def test_topk_forced_index_zero(self):
        s = scores([0, 5, 4])
        np.testing.assert_array_equal(topk_indices(s, 2, np.array([0])), [0, 1])
        np.testing.assert_array_equal(topk_indices(s, 1, np.array([0])), [0])

    def test_topk_properties(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            s = scores(rng.integers(0, 5, size=30))
            k = int(rng.integers(1, 31))
            picked = topk_indices(s, k)
            self.assertEqual(len(picked), k)
            self.assertTrue(np.all(np.diff(picked) > 0))
            np.testing.assert_array_equal(topk_indices(scores(s.values * 7.5), k), picked)

    def test_topk_errors(self):
        with self.assertRaises(RankingError):
            topk_indices(scores([1, 2]), 3)
        with self.assertRaises(RankingError):
            topk_indices(scores([1, 2, 3]), 1, [0, 1])

    def test_window_force(self):
        np.testing.assert_array_equal(window_force(10, 3, 5), [7, 8, 9])
        np.testing.assert_array_equal(window_force(10, 8, 2), [8, 9])


class TestRankingParams(unittest.TestCase):

    def test_defaults(self):
        p = RankingParams()
        self.assertEqual((p.window_size, p.pool_kernel, p.agg_window, p.defer_layers, p.pruning_layer),
                         (8, 7, 4, 4, 15))

    def test_even_kernel_rejected(self):
        with self.assertRaises(ConfigError):
            RankingParams(pool_kernel=4)

    def test_defer_after_pruning_rejected(self):
        with self.assertRaises(ConfigError):
            RankingParams(defer_layers=6, pruning_layer=5)

    def test_scaled_to_small_model(self):
        p = RankingParams().scaled_to(8)
        self.assertEqual((p.pruning_layer, p.routing_layer, p.defer_layers), (3, 3, 3))
        self.assertEqual(RankingParams().scaled_to(32), RankingParams())

    def test_scaled_to_keeps_fixed_fields(self):
        p = RankingParams(pruning_layer=20, routing_layer=30).scaled_to(8, {"pruning_layer", "routing_layer"})
        self.assertEqual((p.pruning_layer, p.routing_layer), (20, 30))
        with self.assertRaises(ConfigError):
            p.validate_for(8)
        with self.assertRaises(ConfigError):
            RankingParams(defer_layers=6).scaled_to(8, {"defer_layers"})

    def test_validate_for(self):
        with self.assertRaises(ConfigError):
            RankingParams().validate_for(8)


class TestScoresCsv(unittest.TestCase):

    def test_csv(self):
        s = scores([0.5, 1.5, -2.0])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "scores.csv")
            s.to_csv(path)
            np.testing.assert_array_equal(ImportanceScores.from_csv(path).values, s.values)

    def test_non_finite_rejected(self):
        with self.assertRaises(RankingError):
            scores([1.0, np.nan])


if __name__ == '__main__':
    unittest.main()
