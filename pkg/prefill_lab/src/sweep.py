"""Keep-rate sweeps over (method, keep_rate, prompt) grids, and parameter ablations."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import pandas as pd
from tqdm import tqdm

from src.correlation import spearman_rho
from src.errors import (
    ArchitectureError,
    ConfigError,
    ForwardError,
    OracleUndefinedError,
    RankingError,
)
from src.pipelines import Method, PipelineConfig, check_architecture, decode, oracle_ranking, run_pipeline
from src.ranking import ImportanceScores
from src.tasks import PromptRecord, score_exact_match

logger = logging.getLogger(__name__)

ABLATABLE = ("pruning_layer", "agg_window", "defer_layers", "window_size", "pool_kernel")
CELL_ERRORS = (RankingError, ArchitectureError, ForwardError)


@dataclass
class SweepCell:
    prompt_id: str
    method: str
    keep_rate: float
    variant: str = ""
    score: Optional[int] = None
    rho: Optional[float] = None
    ttft_ms: Optional[float] = None
    cache_bytes: Optional[int] = None
    kept: Optional[int] = None
    error: Optional[str] = None
    result_summary: Optional[dict] = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        row = asdict(self)
        del row["result_summary"]
        return row


@dataclass
class SweepReport:
    cells: List[SweepCell]
    params: dict
    seed: int = 0

    TIMING_COLUMNS = ("ttft_ms",)

    def __len__(self) -> int:
        return len(self.cells)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.row() for c in self.cells],
                            columns=[f for f in SweepCell.__dataclass_fields__ if f != "result_summary"])

    @property
    def errored(self) -> List[SweepCell]:
        return [c for c in self.cells if c.error is not None]

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    def summary(self) -> pd.DataFrame:
        """Mean score / rho / TTFT / cache bytes per (variant, method, keep_rate)."""
        df = self.to_frame()
        metrics = ["score", "rho", "ttft_ms", "cache_bytes"]
        df[metrics] = df[metrics].apply(pd.to_numeric)
        return df.groupby(["variant", "method", "keep_rate"], sort=False)[metrics].mean().reset_index()

    def to_json(self, path: str) -> None:
        payload = {
            "seed": self.seed,
            "params": self.params,
            "cells": [c.row() for c in self.cells],
            "errors": len(self.errored),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)


def _grid(methods: Sequence[Method], keep_rates: Sequence[float]) -> List[tuple]:
    if not methods:
        raise ConfigError("sweep needs at least one method")
    if not keep_rates:
        raise ConfigError("sweep needs at least one keep rate")
    for rate in keep_rates:
        if not 0 < rate <= 1:
            raise ConfigError(f"keep rate {rate} outside (0, 1]")
    grid = []
    for method in methods:
        if method == Method.FULL_KV:
            grid.append((method, 1.0))
        else:
            grid.extend((method, rate) for rate in keep_rates)
    return grid


def _run_cell(model, record: PromptRecord, method: Method, keep_rate: float, cfg: PipelineConfig,
              oracle: Optional[ImportanceScores], oracle_error: Optional[str], variant: str) -> SweepCell:
    cell = SweepCell(record.prompt_id, method.value, keep_rate, variant)
    if method.needs_oracle and oracle is None:
        cell.error = oracle_error
        return cell
    cell_cfg = replace(cfg, method=method, params=replace(cfg.params, keep_rate=keep_rate))
    try:
        result = run_pipeline(model, record.tokens, cell_cfg, oracle)
        check_architecture(result, cell_cfg, model.config.num_layers)
        if record.expected:
            generated = decode(model, result, len(record.expected), cfg.eos_id)
            cell.score = score_exact_match(generated, record.expected)
    except CELL_ERRORS as e:
        logger.warning("cell %s/%s/%s failed: %s", record.prompt_id, method.value, keep_rate, e)
        cell.error = f"{type(e).__name__}: {e}"
        return cell
    except Exception as e:
        logger.exception("cell %s/%s/%s crashed", record.prompt_id, method.value, keep_rate)
        cell.error = f"{type(e).__name__}: {e}"
        return cell

    summary = result.summary()
    cell.result_summary = summary
    cell.ttft_ms = summary["ttft_ms"]
    cell.cache_bytes = summary["cache_bytes"]
    cell.kept = len(result.kept_indices)
    if method != Method.FULL_KV and oracle is not None and result.ranking_scores is not None:
        try:
            cell.rho = spearman_rho(result.ranking_scores, oracle)
        except RankingError as e:
            logger.warning("rho undefined for %s/%s: %s", record.prompt_id, method.value, e)
    return cell


def sweep(model, prompts: Sequence[PromptRecord], methods: Sequence[Method], keep_rates: Sequence[float],
          cfg: PipelineConfig, workers: int = 1, seed: int = 0, variant: str = "") -> SweepReport:
    """Run every (prompt, method, keep_rate) cell; cells come back in grid order.

    Configuration problems abort the run. Per-cell failures are recorded on the
    cell. rho compares the ranking that drove pruning against the oracle.
    """
    if not prompts:
        raise ConfigError("no prompts")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    grid = _grid(list(methods), list(keep_rates))
    if Method.SPEC_PREFILL in methods:
        replace(cfg, method=Method.SPEC_PREFILL).validate(model)
    else:
        cfg.params.validate_for(model.config.num_layers)

    oracles: Dict[str, Optional[ImportanceScores]] = {}
    oracle_errors: Dict[str, Optional[str]] = {}
    for record in tqdm(prompts, desc="oracle", disable=None):
        try:
            oracles[record.prompt_id] = oracle_ranking(model, record.tokens, cfg)
            oracle_errors[record.prompt_id] = None
        except (OracleUndefinedError, ForwardError) as e:
            logger.warning("prompt %s: %s", record.prompt_id, e)
            oracles[record.prompt_id] = None
            oracle_errors[record.prompt_id] = f"{type(e).__name__}: {e}"

    jobs = [(record, method, rate) for record in prompts for method, rate in grid]
    logger.info("sweep: %d prompts x %d grid points = %d cells (workers=%d)",
                len(prompts), len(grid), len(jobs), workers)

    def work(job):
        record, method, rate = job
        return _run_cell(model, record, method, rate, cfg, oracles[record.prompt_id],
                         oracle_errors[record.prompt_id], variant)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        cells = list(tqdm(pool.map(work, jobs), total=len(jobs), desc="sweep", disable=None))

    report = SweepReport(cells, cfg.params.to_dict(), seed)
    if report.errored:
        logger.warning("%d of %d cells errored", len(report.errored), len(cells))
    return report


def ablate(model, prompts: Sequence[PromptRecord], methods: Sequence[Method], keep_rates: Sequence[float],
           cfg: PipelineConfig, param: str, values: Sequence[int], workers: int = 1,
           seed: int = 0) -> SweepReport:
    """Repeat the sweep for each value of one RankingParams field; cells carry `param=value`."""
    if param not in ABLATABLE:
        raise ConfigError(f"cannot ablate {param!r}; choose one of {', '.join(ABLATABLE)}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    cells = []
    for value in values:
        params = replace(cfg.params, **{param: value})
        report = sweep(model, prompts, methods, keep_rates, replace(cfg, params=params), workers, seed,
                       variant=f"{param}={value}")
        cells.extend(report.cells)
    return SweepReport(cells, cfg.params.to_dict(), seed)
