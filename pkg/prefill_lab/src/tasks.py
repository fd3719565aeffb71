"""Prompt sources: token-id prompt files and synthetic needle-in-a-haystack tasks."""

import json
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConfigError

logger = logging.getLogger(__name__)

EOS_TOKEN = 0
NEEDLE_MARKER = 1
QUERY_MARKER = 2
FIRST_FILLER = 4
QUERY_LEN = 2


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    tokens: np.ndarray
    expected: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class NiahTask:
    """Filler tokens with a [marker, payload...] needle and a trailing [query, marker] span.

    Spans are half-open (start, end) token index ranges.
    """

    tokens: np.ndarray
    needle_span: Tuple[int, int]
    depth: float
    expected: Tuple[int, ...]
    query_span: Tuple[int, int]
    seed: int

    def to_record(self, prompt_id: str) -> PromptRecord:
        return PromptRecord(prompt_id, self.tokens, self.expected)


def gen_niah(haystack_len: int, depth: float, seed: int, vocab_size: int = 512,
             payload_len: int = 4) -> NiahTask:
    """Deterministic needle task; the needle starts before filler index floor(depth * haystack_len)."""
    if not 0.0 <= depth <= 1.0:
        raise ConfigError(f"depth must be within [0, 1], got {depth}")
    if payload_len < 1:
        raise ConfigError(f"payload_len must be >= 1, got {payload_len}")
    needle_len = 1 + payload_len
    if haystack_len < needle_len + QUERY_LEN:
        raise ConfigError(
            f"haystack_len {haystack_len} shorter than needle ({needle_len}) plus query ({QUERY_LEN})"
        )
    if vocab_size <= FIRST_FILLER:
        raise ConfigError(f"vocab_size must exceed {FIRST_FILLER}, got {vocab_size}")

    rng = np.random.default_rng(seed)
    filler = rng.integers(FIRST_FILLER, vocab_size, size=haystack_len)
    payload = rng.integers(FIRST_FILLER, vocab_size, size=payload_len)
    start = math.floor(depth * haystack_len)
    needle = np.concatenate([[NEEDLE_MARKER], payload])
    body = np.concatenate([filler[:start], needle, filler[start:]])
    tokens = np.concatenate([body, [QUERY_MARKER, NEEDLE_MARKER]]).astype(np.int64)
    return NiahTask(
        tokens=tokens,
        needle_span=(start, start + needle_len),
        depth=depth,
        expected=tuple(int(t) for t in payload),
        query_span=(len(body), len(tokens)),
        seed=seed,
    )


def niah_suite(haystack_len: int, depths: Sequence[float], seed: int, vocab_size: int,
               payload_len: int = 4) -> List[PromptRecord]:
    """One task per depth; task i uses seed + i."""
    return [
        gen_niah(haystack_len, depth, seed + i, vocab_size, payload_len).to_record(str(i))
        for i, depth in enumerate(depths)
    ]


def score_exact_match(generated: Sequence[int], expected: Sequence[int]) -> int:
    """1 iff expected occurs as a contiguous run inside generated."""
    generated, expected = list(generated), list(expected)
    if not expected:
        return 1
    width = len(expected)
    return int(any(generated[i:i + width] == expected for i in range(len(generated) - width + 1)))


def read_prompts(path: str, answers_path: Optional[str] = None) -> List[PromptRecord]:
    """One prompt per line of whitespace-separated token ids; blank lines skipped.

    answers_path, when given, is a JSON object mapping prompt index to expected tokens.
    """
    answers = {}
    if answers_path is not None:
        with open(answers_path, "r", encoding="utf-8") as f:
            answers = json.load(f)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                tokens = np.asarray([int(t) for t in line.split()], dtype=np.int64)
            except ValueError as e:
                raise ConfigError(f"{path}:{line_no}: not a token-id line ({e})") from e
            prompt_id = str(len(records))
            expected = answers.get(prompt_id)
            records.append(PromptRecord(prompt_id, tokens, tuple(expected) if expected is not None else None))
    logger.info("read %d prompts from %s", len(records), path)
    return records


def write_prompts(records: Sequence[PromptRecord], path: str, answers_path: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(" ".join(str(int(t)) for t in record.tokens) + "\n")
    if answers_path is not None:
        answers = {str(i): list(r.expected) for i, r in enumerate(records) if r.expected is not None}
        with open(answers_path, "w", encoding="utf-8") as f:
            json.dump(answers, f, indent=2, sort_keys=True)
