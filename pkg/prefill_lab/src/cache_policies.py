"""Single-pass cache policies: compress each layer's stored KV in flight and
prune the hidden-state sequence once, at the pruning layer.

Below the pruning layer the full hidden states always propagate; only what
is stored for decode shrinks.
"""

import logging
from typing import Dict, Optional

import numpy as np

from src.engine import CachePolicy, LayerCache, LayerView
from src.ranking import (
    ImportanceScores,
    LayerScoreBuffer,
    RankingParams,
    claa_aggregate,
    keep_count,
    kv_group_scores,
    pool1d,
    topk_indices,
    window_force,
    window_score,
)

logger = logging.getLogger(__name__)


class _SinglePassPolicy(CachePolicy):
    def __init__(self, params: RankingParams, prompt_len: int):
        self.params = params
        self.prompt_len = prompt_len
        self.keep = keep_count(params.keep_rate, prompt_len)
        self.pruning_indices: Optional[np.ndarray] = None
        self.ranking_scores: Optional[ImportanceScores] = None

    def _forced(self) -> np.ndarray:
        if not self.params.force_window:
            return np.empty(0, dtype=np.int64)
        return window_force(self.prompt_len, self.params.window_size, self.keep)

    def _select(self, scores: ImportanceScores) -> np.ndarray:
        return topk_indices(pool1d(scores, self.params.pool_kernel), self.keep, self._forced())

    def _past_pruning(self, layer: int) -> bool:
        return layer > self.params.pruning_layer

    def prune(self, view: LayerView) -> Optional[np.ndarray]:
        if view.layer == self.params.pruning_layer:
            logger.debug("%s pruning at layer %d: %d of %d tokens kept", type(self).__name__,
                         view.layer, len(self.pruning_indices), self.prompt_len)
            return self.pruning_indices
        return None


class FastKVPolicy(_SinglePassPolicy):
    """Per-group window ranking below l_p; window ranking at l_p prunes the sequence."""

    def compress(self, view: LayerView) -> Optional[LayerCache]:
        if self._past_pruning(view.layer):
            return None
        trace = view.trace
        if view.layer == self.params.pruning_layer:
            self.ranking_scores = pool1d(window_score(trace, view.layer, self.params.window_size),
                                         self.params.pool_kernel)
            self.pruning_indices = topk_indices(self.ranking_scores, self.keep, self._forced())
            return view.cache().select(self.pruning_indices)
        per_group = [self._select(s) for s in kv_group_scores(trace, view.layer, self.params.window_size)]
        return view.cache().select_per_group(per_group)


class ClaaPolicy(_SinglePassPolicy):
    """Deferred compression for layers < m, then per-layer window ranking buffered
    over the last n layers; the buffer's elementwise max prunes at l_p."""

    def __init__(self, params: RankingParams, prompt_len: int):
        super().__init__(params, prompt_len)
        self.buffer = LayerScoreBuffer(params.agg_window)
        self.layer_scores: Dict[int, ImportanceScores] = {}

    def compress(self, view: LayerView) -> Optional[LayerCache]:
        if view.layer < self.params.defer_layers or self._past_pruning(view.layer):
            return None
        current = window_score(view.trace, view.layer, self.params.window_size)
        self.layer_scores[view.layer] = current
        self.buffer.push(current)
        if view.layer == self.params.pruning_layer:
            self.ranking_scores = pool1d(claa_aggregate(self.buffer), self.params.pool_kernel)
            self.pruning_indices = topk_indices(self.ranking_scores, self.keep, self._forced())
        return view.cache().select(self._select(current))


class OracleEmulationPolicy(_SinglePassPolicy):
    """One precomputed ranking drives cache compression up to l_p and pruning at l_p."""

    def __init__(self, params: RankingParams, prompt_len: int, oracle_scores: ImportanceScores):
        super().__init__(params, prompt_len)
        self.ranking_scores = oracle_scores
        self.pruning_indices = topk_indices(oracle_scores, self.keep)

    def compress(self, view: LayerView) -> Optional[LayerCache]:
        if self._past_pruning(view.layer):
            return None
        return view.cache().select(self.pruning_indices)
