import unittest
import numpy as np
import sys
import os
import json
import math
import tempfile

# Add the parent directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.errors import ConfigError
from src.tasks import (
    NEEDLE_MARKER,
    QUERY_MARKER,
    PromptRecord,
    gen_niah,
    niah_suite,
    read_prompts,
    score_exact_match,
    write_prompts,
)


class TestGenNiah(unittest.TestCase):

    def test_depth_zero(self):
        task = gen_niah(100, 0.0, seed=1)
        self.assertEqual(task.needle_span[0], 0)
        self.assertEqual(task.tokens[0], NEEDLE_MARKER)

    def test_depth_one(self):
        task = gen_niah(100, 1.0, seed=1)
        self.assertEqual(task.needle_span[1], task.query_span[0])

    def test_layout(self):
        task = gen_niah(200, 0.37, seed=3, payload_len=5)
        start, end = task.needle_span
        self.assertEqual(start, math.floor(0.37 * 200))
        self.assertEqual(end - start, 6)
        self.assertEqual(tuple(task.tokens[start + 1:end]), task.expected)
        self.assertEqual(list(task.tokens[task.query_span[0]:]), [QUERY_MARKER, NEEDLE_MARKER])
        self.assertEqual(len(task.tokens), 200 + 6 + 2)

    def test_deterministic(self):
        a = gen_niah(64, 0.5, seed=9)
        b = gen_niah(64, 0.5, seed=9)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        self.assertEqual(a.expected, b.expected)

    def test_filler_avoids_reserved_ids(self):
        task = gen_niah(500, 0.5, seed=2, vocab_size=32)
        start, end = task.needle_span
        filler = np.concatenate([task.tokens[:start], task.tokens[end:task.query_span[0]]])
        self.assertTrue(np.all(filler >= 4))
        self.assertTrue(np.all(filler < 32))

    def test_bad_depth(self):
        with self.assertRaises(ConfigError):
            gen_niah(100, 1.5, seed=0)

    def test_too_short(self):
        with self.assertRaises(ConfigError):
            gen_niah(3, 0.5, seed=0)


class TestExactMatch(unittest.TestCase):

    def test_contained(self):
        self.assertEqual(score_exact_match([5, 6, 7, 8], [6, 7]), 1)

    def test_disjoint(self):
        self.assertEqual(score_exact_match([5, 6, 7], [9]), 0)

    def test_not_contiguous(self):
        self.assertEqual(score_exact_match([6, 5, 7], [6, 7]), 0)

    def test_empty_expected(self):
        self.assertEqual(score_exact_match([1, 2], []), 1)


class TestPromptFiles(unittest.TestCase):

    def test_round_trip_with_answers(self):
        records = niah_suite(40, [0.0, 0.5, 1.0], seed=4, vocab_size=128)
        with tempfile.TemporaryDirectory() as tmp:
            prompts = os.path.join(tmp, "prompts.txt")
            answers = os.path.join(tmp, "answers.json")
            write_prompts(records, prompts, answers)
            loaded = read_prompts(prompts, answers)
            with open(answers, encoding="utf-8") as f:
                self.assertEqual(sorted(json.load(f)), ["0", "1", "2"])
        self.assertEqual([r.prompt_id for r in loaded], ["0", "1", "2"])
        for a, b in zip(records, loaded):
            np.testing.assert_array_equal(a.tokens, b.tokens)
            self.assertEqual(a.expected, b.expected)

    def test_blank_lines_skipped(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "prompts.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write("1 2 3\n\n4 5\n")
            loaded = read_prompts(path)
        self.assertEqual([list(r.tokens) for r in loaded], [[1, 2, 3], [4, 5]])
        self.assertIsNone(loaded[0].expected)

    def test_bad_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "prompts.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write("1 2 x\n")
            with self.assertRaisesRegex(ConfigError, "prompts.txt:1"):
                read_prompts(path)

    def test_records_without_answers(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "p.txt")
            write_prompts([PromptRecord("a", np.array([3, 4]))], path)
            self.assertEqual(len(read_prompts(path)), 1)


if __name__ == '__main__':
    unittest.main()
