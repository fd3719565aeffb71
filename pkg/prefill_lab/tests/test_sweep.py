import unittest
import numpy as np
import sys
import os
import json
import tempfile
from unittest import mock

# Add the parent directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.errors import ConfigError
from src.model import ModelConfig, random_init_model
from src.pipelines import Method, PipelineConfig
from src.ranking import RankingParams
from src.sweep import SweepReport, ablate, sweep
from src.tasks import PromptRecord, niah_suite

SMALL = dict(num_layers=4, d_model=64, num_heads=4, num_kv_heads=2, head_dim=16, vocab_size=128)


class TestSweep(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = random_init_model(ModelConfig(**SMALL), 0)
        rng = np.random.default_rng(0)
        cls.prompts = [PromptRecord(str(i), rng.integers(0, 128, size=64)) for i in range(2)]
        cls.cfg = PipelineConfig(Method.FULL_KV, RankingParams(max_gen=8).scaled_to(4))

    def frame_without_timing(self, report):
        return report.to_frame().drop(columns=list(SweepReport.TIMING_COLUMNS))

    def test_single_cell(self):
        report = sweep(self.model, self.prompts[:1], [Method.CLAA], [0.2], self.cfg)
        self.assertEqual(len(report), 1)
        cell = report.cells[0]
        self.assertIsNone(cell.error)
        self.assertEqual(cell.kept, 13)
        self.assertTrue(-1.0 <= cell.rho <= 1.0)

    def test_grid_size_and_order(self):
        report = sweep(self.model, self.prompts, [Method.GEMFILTER, Method.FASTKV], [0.1, 0.2, 0.4], self.cfg)
        self.assertEqual(len(report), 12)
        self.assertEqual([(c.prompt_id, c.method, c.keep_rate) for c in report.cells[:3]],
                         [("0", "gemfilter", 0.1), ("0", "gemfilter", 0.2), ("0", "gemfilter", 0.4)])
        self.assertEqual(report.errored, [])

    def test_full_kv_baseline(self):
        report = sweep(self.model, self.prompts, [Method.FULL_KV, Method.ORACLE], [0.1, 0.2], self.cfg)
        full = [c for c in report.cells if c.method == "full_kv"]
        self.assertEqual(len(full), 2)
        for cell in full:
            self.assertEqual(cell.keep_rate, 1.0)
            self.assertIsNone(cell.rho)
        for cell in report.cells:
            if cell.method == "oracle":
                self.assertEqual(cell.rho, 1.0)

    def test_rerun_identical_apart_from_timing(self):
        methods = [Method.FULL_KV, Method.CLAA, Method.ORACLE_EMULATED]
        a = sweep(self.model, self.prompts, methods, [0.2], self.cfg, workers=2, seed=3)
        b = sweep(self.model, self.prompts, methods, [0.2], self.cfg, workers=1, seed=3)
        self.assertTrue(self.frame_without_timing(a).equals(self.frame_without_timing(b)))

    def test_retrieval_score_recorded(self):
        records = niah_suite(40, [0.5], seed=1, vocab_size=128)
        report = sweep(self.model, records, [Method.FULL_KV], [0.5], self.cfg)
        self.assertIn(report.cells[0].score, (0, 1))

    def test_invalid_grid(self):
        with self.assertRaises(ConfigError):
            sweep(self.model, self.prompts, [], [0.1], self.cfg)
        with self.assertRaises(ConfigError):
            sweep(self.model, self.prompts, [Method.CLAA], [1.5], self.cfg)
        with self.assertRaises(ConfigError):
            sweep(self.model, [], [Method.CLAA], [0.1], self.cfg)

    def test_cell_errors_are_recorded(self):
        short = [PromptRecord("short", np.array([5, 6, 7]))]
        report = sweep(self.model, short, [Method.FULL_KV, Method.FASTKV], [0.5], self.cfg)
        self.assertIsNone(report.cells[0].error)
        self.assertIn("RankingError", report.cells[1].error)
        self.assertEqual(len(report.errored), 1)

    def test_unexpected_failure_recorded_on_cell(self):
        with mock.patch("src.sweep.check_architecture", side_effect=RuntimeError("boom")):
            report = sweep(self.model, self.prompts[:1], [Method.FULL_KV, Method.CLAA], [0.2], self.cfg)
        self.assertEqual(len(report.errored), 2)
        self.assertEqual(report.cells[1].error, "RuntimeError: boom")

    def test_outputs(self):
        report = sweep(self.model, self.prompts, [Method.CLAA], [0.2], self.cfg)
        with tempfile.TemporaryDirectory() as tmp:
            report.to_csv(os.path.join(tmp, "sweep.csv"))
            report.to_json(os.path.join(tmp, "sweep.json"))
            with open(os.path.join(tmp, "sweep.json"), encoding="utf-8") as f:
                payload = json.load(f)
        self.assertEqual(len(payload["cells"]), 2)
        self.assertNotIn("result_summary", payload["cells"][0])
        self.assertEqual(list(report.summary()["method"]), ["claa"])


class TestAblate(unittest.TestCase):

    def test_variants(self):
        model = random_init_model(ModelConfig(**SMALL), 0)
        prompts = [PromptRecord("0", np.random.default_rng(2).integers(0, 128, size=48))]
        cfg = PipelineConfig(Method.FULL_KV, RankingParams(max_gen=8, defer_layers=0).scaled_to(4))
        report = ablate(model, prompts, [Method.CLAA], [0.25], cfg, "agg_window", [1, 2])
        self.assertEqual([c.variant for c in report.cells], ["agg_window=1", "agg_window=2"])

    def test_unknown_param(self):
        model = random_init_model(ModelConfig(**SMALL), 0)
        cfg = PipelineConfig(Method.FULL_KV, RankingParams().scaled_to(4))
        with self.assertRaises(ConfigError):
            ablate(model, [PromptRecord("0", np.arange(20))], [Method.CLAA], [0.2], cfg, "keep_rate", [1])


if __name__ == '__main__':
    unittest.main()
