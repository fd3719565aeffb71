"""Wall-clock and memory accounting for prefill and decode."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import psutil
from tqdm import tqdm

from src.engine import BYTES_PER_ELEMENT, KvCache, greedy_generate
from src.errors import ConfigError
from src.pipelines import Method, PipelineConfig, PrefillResult, Prompt, as_sequence, oracle_ranking, run_pipeline

logger = logging.getLogger(__name__)

MIN_REPEATS = 3
MIN_DECODE_STEPS = 16


def get_memory_usage() -> float:
    """Resident memory of this process in GB."""
    process = psutil.Process(os.getpid())
    return process.memory_info().rss / 1024 / 1024 / 1024


def kv_cache_bytes(kv: KvCache) -> int:
    """Sum over layers of 2 * G * len * d_k * 4."""
    return sum(layer.nbytes for layer in kv.layers)


@dataclass
class BenchReport:
    method: str
    prompt_len: int
    keep_rate: float
    ttft_ms: float
    ttft_min_ms: float
    ttft_max_ms: float
    repeats: int
    decode_tps: Optional[float] = None
    decode_steps: Optional[int] = None
    cache_bytes: int = 0
    rss_gb: float = 0.0
    bytes_per_element: int = BYTES_PER_ELEMENT

    def to_dict(self) -> dict:
        return asdict(self)


def reports_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports])


def write_reports(reports: Sequence[BenchReport], csv_path: str, json_path: str) -> None:
    reports_frame(reports).to_csv(csv_path, index=False)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2)


def measure_ttft(model, prompt: Prompt, cfg: PipelineConfig, repeats: int = MIN_REPEATS):
    """Median wall time to first next-token logits, ranking overhead included.

    One untimed warm-up precedes the timed runs. Oracle methods time the oracle
    ranking too. Returns (BenchReport, last PrefillResult).
    """
    if repeats < MIN_REPEATS:
        raise ConfigError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    seq = as_sequence(prompt)

    def once() -> PrefillResult:
        oracle = oracle_ranking(model, seq, cfg) if cfg.method.needs_oracle else None
        return run_pipeline(model, seq, cfg, oracle)

    result = once()
    samples: List[float] = []
    for _ in tqdm(range(repeats), desc=f"ttft {cfg.method.value}", disable=None):
        started = time.perf_counter()
        result = once()
        samples.append((time.perf_counter() - started) * 1000.0)

    median = float(np.median(samples))
    logger.info("%s L=%d keep=%.2f ttft median %.2f ms (min %.2f, max %.2f)", cfg.method.value, len(seq),
                result.keep_rate, median, min(samples), max(samples))
    report = BenchReport(
        method=cfg.method.value,
        prompt_len=len(seq),
        keep_rate=result.keep_rate,
        ttft_ms=median,
        ttft_min_ms=min(samples),
        ttft_max_ms=max(samples),
        repeats=repeats,
        cache_bytes=kv_cache_bytes(result.kv),
        rss_gb=get_memory_usage(),
    )
    return report, result


def measure_decode_tps(model, result: PrefillResult, steps: int, repeats: int = MIN_REPEATS) -> float:
    """steps / wall time of the greedy decode loop, median over repeats; result.kv is not modified."""
    if steps < MIN_DECODE_STEPS:
        raise ConfigError(f"decode steps must be >= {MIN_DECODE_STEPS}, got {steps}")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    rates = []
    for _ in range(repeats):
        kv = result.kv.copy()
        started = time.perf_counter()
        greedy_generate(model, kv, result.next_logits, steps, record_queries=False)
        rates.append(steps / (time.perf_counter() - started))
    return float(np.median(rates))


def run_bench(model, prompt: Prompt, methods: Sequence[Method], keep_rates: Sequence[float],
              cfg: PipelineConfig, repeats: int = MIN_REPEATS, decode_steps: int = 32) -> List[BenchReport]:
    """TTFT, decode throughput and cache size for each (method, keep_rate), run serially."""
    reports = []
    for method in methods:
        rates = [1.0] if method == Method.FULL_KV else keep_rates
        for rate in rates:
            cell_cfg = replace(cfg, method=method, params=replace(cfg.params, keep_rate=rate))
            report, result = measure_ttft(model, prompt, cell_cfg, repeats)
            report.decode_tps = measure_decode_tps(model, result, decode_steps, repeats)
            report.decode_steps = decode_steps
            reports.append(report)
    return reports
