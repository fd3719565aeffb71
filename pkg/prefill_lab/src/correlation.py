"""Oracle-referenced ranking quality: Spearman rho and layer-wise curves."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.engine import full_forward, greedy_generate
from src.errors import RankingError
from src.pipelines import PipelineConfig, Prompt, as_sequence, oracle_ranking
from src.ranking import (
    ImportanceScores,
    claa_aggregate,
    gemfilter_score,
    pool1d,
    spec_prefill_score,
    window_score,
)

logger = logging.getLogger(__name__)

Scores = Union[ImportanceScores, np.ndarray, list]


def _values(scores: Scores) -> np.ndarray:
    if isinstance(scores, ImportanceScores):
        return scores.values
    return np.asarray(scores, dtype=np.float64).reshape(-1)


def spearman_rho(a: Scores, b: Scores) -> float:
    """Pearson correlation of average ranks (tie-safe Spearman).

    Args:
        a: scores of one ranking
        b: scores of the reference ranking, same length

    Returns:
        float: rho in [-1, 1]

    Raises:
        RankingError: lengths differ, fewer than 2 scores, or a constant vector
    """
    x, y = _values(a), _values(b)
    if len(x) != len(y):
        raise RankingError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise RankingError("spearman_rho needs at least 2 scores")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    if denom == 0:
        raise RankingError("degenerate ranking: a score vector is constant")
    return float(np.clip(np.dot(rx, ry) / denom, -1.0, 1.0))


@dataclass
class RankCorrelationReport:
    """rho against the oracle per layer; layers where the method is undefined are absent."""

    method: str
    prompt_id: str
    rho: Dict[int, float] = field(default_factory=dict)
    pool_kernel: int = 1

    def rows(self) -> List[dict]:
        return [
            {"prompt": self.prompt_id, "method": self.method, "layer": layer, "rho": value,
             "pool_kernel": self.pool_kernel}
            for layer, value in sorted(self.rho.items())
        ]


def reports_frame(reports: List[RankCorrelationReport]) -> pd.DataFrame:
    rows = [row for report in reports for row in report.rows()]
    return pd.DataFrame(rows, columns=["prompt", "method", "layer", "rho", "pool_kernel"])


def _record(report: RankCorrelationReport, layer: int, scores: ImportanceScores,
            oracle: ImportanceScores) -> None:
    try:
        report.rho[layer] = spearman_rho(scores, oracle)
    except RankingError as e:
        logger.warning("%s layer %d skipped for prompt %s: %s", report.method, layer, report.prompt_id, e)


def layerwise_correlation(model, prompt: Prompt, cfg: PipelineConfig, prompt_id: str = "0",
                          oracle: Optional[ImportanceScores] = None) -> Dict[str, RankCorrelationReport]:
    """rho of each heuristic against the oracle, re-deriving the heuristic at every layer.

    Heuristic scores get the same pool_kernel the oracle uses. CLAA is defined
    from layer m + n - 1 on; Speculative Prefill (with a speculator) is layer
    independent and repeated across layers.
    """
    p = cfg.params
    seq = as_sequence(prompt)
    if oracle is None:
        oracle = oracle_ranking(model, seq, cfg)
    num_layers = model.config.num_layers
    trace = full_forward(model, seq, capture=range(num_layers), last_only=True).trace

    def pooled(scores: ImportanceScores) -> ImportanceScores:
        return pool1d(scores, p.pool_kernel)

    reports = {name: RankCorrelationReport(name, prompt_id, pool_kernel=p.pool_kernel)
               for name in ("oracle", "gemfilter", "fastkv", "claa")}
    windows = {l: window_score(trace, l, p.window_size) for l in range(num_layers)}
    for l in range(num_layers):
        _record(reports["oracle"], l, oracle, oracle)
        _record(reports["gemfilter"], l, pooled(gemfilter_score(trace, l)), oracle)
        _record(reports["fastkv"], l, pooled(windows[l]), oracle)
        if l >= p.defer_layers + p.agg_window - 1:
            span = [windows[j] for j in range(l - p.agg_window + 1, l + 1)]
            _record(reports["claa"], l, pooled(claa_aggregate(span)), oracle)

    if cfg.speculator is not None:
        spec = cfg.speculator
        drafted = full_forward(spec, seq, capture=range(spec.config.num_layers), last_only=True)
        lookahead = greedy_generate(spec, drafted.kv, drafted.logits[-1], p.lookahead)
        spec_scores = pooled(spec_prefill_score(drafted.trace, lookahead, cfg.head_reduce))
        reports["spec_prefill"] = RankCorrelationReport("spec_prefill", prompt_id, pool_kernel=p.pool_kernel)
        for l in range(num_layers):
            _record(reports["spec_prefill"], l, spec_scores, oracle)
    return reports
