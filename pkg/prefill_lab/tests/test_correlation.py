import unittest
import numpy as np
import sys
import os

# Add the parent directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.correlation import layerwise_correlation, reports_frame, spearman_rho
from src.errors import RankingError
from src.model import ModelConfig, random_init_model
from src.pipelines import Method, PipelineConfig, oracle_ranking
from src.ranking import ImportanceScores, RankingParams, claa_aggregate


class TestSpearman(unittest.TestCase):

    def test_identity(self):
        self.assertEqual(spearman_rho([3.0, 1.0, 2.0, 5.0], [3.0, 1.0, 2.0, 5.0]), 1.0)

    def test_reversal(self):
        self.assertAlmostEqual(spearman_rho([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]), -1.0, places=12)

    def test_one_swap(self):
        self.assertAlmostEqual(spearman_rho([1, 2, 3, 4], [1, 2, 4, 3]), 0.8, delta=1e-9)

    def test_ties_use_average_ranks(self):
        # ranks (1.5, 1.5, 3) vs (1, 2, 3)
        self.assertAlmostEqual(spearman_rho([1, 1, 2], [1, 2, 3]), np.sqrt(3) / 2, places=12)

    def test_constant_is_degenerate(self):
        with self.assertRaisesRegex(RankingError, "degenerate ranking"):
            spearman_rho([2, 2, 2], [1, 2, 3])

    def test_length_errors(self):
        with self.assertRaises(RankingError):
            spearman_rho([1, 2, 3], [1, 2])
        with self.assertRaises(RankingError):
            spearman_rho([1], [1])

    def test_symmetric_and_monotone_invariant(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 50))
        self.assertAlmostEqual(spearman_rho(a, b), spearman_rho(b, a), places=12)
        self.assertAlmostEqual(spearman_rho(a, b), spearman_rho(np.exp(a), 3 * b + 1), places=12)


def layered_scores(oracle, num_layers, corrupted, seed):
    """num_layers - 1 noisy copies of the oracle and one seeded permutation of it."""
    rng = np.random.default_rng(seed)
    sigma = 0.05 * (oracle.max() - oracle.min())
    layers = [oracle + rng.normal(scale=sigma, size=len(oracle)) for _ in range(num_layers - 1)]
    layers.insert(corrupted, rng.permutation(oracle))
    return [ImportanceScores(v) for v in layers]


class TestAdversarialLayer(unittest.TestCase):

    def test_aggregate_outranks_corrupted_layer(self):
        for seed in range(10):
            oracle = np.random.default_rng(100 + seed).uniform(size=2000)
            layers = layered_scores(oracle, 4, seed % 4, seed)
            rho_agg = spearman_rho(claa_aggregate(layers), oracle)
            rho_bad = spearman_rho(layers[seed % 4], oracle)
            self.assertLessEqual(abs(rho_bad), 0.3)
            self.assertGreaterEqual(rho_agg, 0.5)
            self.assertGreater(rho_agg - rho_bad, 0.3)

    def test_aggregate_recovers_suppressed_tokens(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            oracle = rng.uniform(size=500)
            sigma = 0.05 * (oracle.max() - oracle.min())
            layers = [oracle + rng.normal(scale=sigma, size=500) for _ in range(3)]
            muted = oracle.copy()
            muted[rng.permutation(500)[:250]] = oracle.min()
            layers.append(muted)
            rho_agg = spearman_rho(claa_aggregate([ImportanceScores(v) for v in layers]), oracle)
            self.assertGreaterEqual(rho_agg, 0.9)
            self.assertGreater(rho_agg, spearman_rho(muted, oracle))


class TestLayerwiseCorrelation(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = random_init_model(ModelConfig(num_layers=8, d_model=128, num_heads=8, num_kv_heads=4,
                                                  head_dim=16, vocab_size=512), 0)
        cls.tokens = np.random.default_rng(1).integers(0, 512, size=96)

    def config(self, **params):
        return PipelineConfig(Method.CLAA, RankingParams(max_gen=16, **params).scaled_to(8))

    def test_shape_and_self_curve(self):
        cfg = self.config(defer_layers=2, agg_window=3)
        reports = layerwise_correlation(self.model, self.tokens, cfg, "p0")
        self.assertEqual(set(reports), {"oracle", "gemfilter", "fastkv", "claa"})
        self.assertEqual(sorted(reports["oracle"].rho), list(range(8)))
        self.assertTrue(all(rho == 1.0 for rho in reports["oracle"].rho.values()))
        self.assertLessEqual(set(reports["claa"].rho), set(range(4, 8)))
        for report in reports.values():
            for rho in report.rho.values():
                self.assertTrue(-1.0 <= rho <= 1.0)

    def test_single_layer_claa_matches_fastkv(self):
        cfg = self.config(defer_layers=0, agg_window=1)
        oracle = oracle_ranking(self.model, self.tokens, cfg)
        reports = layerwise_correlation(self.model, self.tokens, cfg, "p0", oracle)
        self.assertEqual(reports["claa"].rho, reports["fastkv"].rho)

    def test_speculator_curve_is_flat(self):
        speculator = random_init_model(ModelConfig(num_layers=2, d_model=128, num_heads=8, num_kv_heads=4,
                                                   head_dim=16, vocab_size=512), 1)
        cfg = PipelineConfig(Method.SPEC_PREFILL, RankingParams(max_gen=16).scaled_to(8), speculator)
        reports = layerwise_correlation(self.model, self.tokens, cfg, "p0")
        values = set(reports["spec_prefill"].rho.values())
        self.assertLessEqual(len(values), 1)

    def test_frame(self):
        reports = layerwise_correlation(self.model, self.tokens, self.config(), "p0")
        frame = reports_frame(list(reports.values()))
        self.assertEqual(list(frame.columns), ["prompt", "method", "layer", "rho", "pool_kernel"])
        self.assertEqual(len(frame[frame["method"] == "oracle"]), 8)


if __name__ == '__main__':
    unittest.main()
