"""Token-importance scoring: the ranking signals of every prefill method.

All functions are pure. Scores are length-L float64 vectors; selection ties
always go to the lower index.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, fields, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.attention import attention_scores, softmax_rows
from src.engine import ForwardTrace, OracleTrace
from src.errors import ConfigError, OracleUndefinedError, RankingError

logger = logging.getLogger(__name__)

HEAD_REDUCTIONS = ("max", "mean")


@dataclass(frozen=True)
class ImportanceScores:
    values: np.ndarray
    layer: Optional[int] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise RankingError("importance scores must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"index": np.arange(len(self.values)), "score": self.values})

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str) -> "ImportanceScores":
        df = pd.read_csv(path).sort_values("index")
        return cls(df["score"].to_numpy())


class LayerScoreBuffer:
    """Rolling window of the last n layer scores, oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise RankingError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries = deque(maxlen=capacity)

    def push(self, scores: ImportanceScores) -> None:
        self._entries.append(scores)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


@dataclass(frozen=True)
class RankingParams:
    """Hyperparameters of the ranking heuristics.

    window_size W, pool_kernel, keep_rate, agg_window n, defer_layers m,
    pruning_layer l_p, routing_layer r (GemFilter), lookahead k (speculator),
    max_gen N_gen (oracle).
    """

    window_size: int = 8
    pool_kernel: int = 7
    keep_rate: float = 0.1
    agg_window: int = 4
    defer_layers: int = 4
    pruning_layer: int = 15
    routing_layer: int = 15
    lookahead: int = 8
    max_gen: int = 64
    force_window: bool = True
    force_last: bool = True

    def __post_init__(self):
        for name in ("window_size", "pool_kernel", "agg_window", "lookahead", "max_gen"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("defer_layers", "pruning_layer", "routing_layer"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.pool_kernel % 2 == 0:
            raise ConfigError(f"pool_kernel must be odd, got {self.pool_kernel}")
        if not 0 < self.keep_rate <= 1:
            raise ConfigError(f"keep_rate must be in (0, 1], got {self.keep_rate}")
        if self.defer_layers > self.pruning_layer:
            raise ConfigError(
                f"defer_layers ({self.defer_layers}) must not exceed pruning_layer ({self.pruning_layer})"
            )

    def validate_for(self, num_layers: int) -> None:
        for name in ("pruning_layer", "routing_layer", "defer_layers"):
            if getattr(self, name) >= num_layers:
                raise ConfigError(f"{name} {getattr(self, name)} invalid for a {num_layers}-layer model")

    def scaled_to(self, num_layers: int, fixed: Iterable[str] = ()) -> "RankingParams":
        """Map out-of-range layer indices onto a smaller model (halfway layer).

        Args:
            num_layers: layer count of the target model.
            fixed: names of fields the caller set explicitly; these are never
                remapped, so an out-of-range value fails validate_for instead.

        Returns:
            A copy with pruning_layer, routing_layer and defer_layers resolved.
        """
        fixed = set(fixed)
        halfway = max(0, num_layers // 2 - 1)
        pruning = self.pruning_layer
        if "pruning_layer" not in fixed and pruning >= num_layers:
            pruning = halfway
        routing = self.routing_layer
        if "routing_layer" not in fixed and routing >= num_layers:
            routing = pruning
        defer = self.defer_layers if "defer_layers" in fixed else min(self.defer_layers, pruning)
        return replace(self, pruning_layer=pruning, routing_layer=routing, defer_layers=defer)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _window_rows(trace: ForwardTrace, layer: int, window: int) -> np.ndarray:
    """Per-head softmax rows of the last W queries: [H, W, L]."""
    lt = trace.layer(layer)
    num_heads, length, head_dim = lt.queries.shape
    if window > length:
        raise RankingError(f"window W={window} exceeds sequence length L={length}")
    if window < 1:
        raise RankingError(f"window must be >= 1, got {window}")
    rows = np.empty((num_heads, window, length), dtype=np.float32)
    for h in range(num_heads):
        raw = attention_scores(lt.queries[h, length - window:], lt.keys[lt.group_of(h)], head_dim)
        rows[h] = softmax_rows(raw, causal_offset=length - window)
    return rows


def gemfilter_score(trace: ForwardTrace, layer: int) -> ImportanceScores:
    """Sum over heads of the last token's raw (pre-softmax) scores."""
    lt = trace.layer(layer)
    num_heads, length, head_dim = lt.queries.shape
    total = np.zeros(length, dtype=np.float64)
    for h in range(num_heads):
        total += attention_scores(lt.queries[h, -1:], lt.keys[lt.group_of(h)], head_dim)[0]
    return ImportanceScores(total, layer)


def window_score(trace: ForwardTrace, layer: int, window: int) -> ImportanceScores:
    """Post-softmax attention from the observation window, summed over queries and heads."""
    rows = _window_rows(trace, layer, window)
    return ImportanceScores(rows.sum(axis=(0, 1), dtype=np.float64), layer)


def kv_group_score(trace: ForwardTrace, layer: int, window: int, group: int) -> ImportanceScores:
    """Window score averaged over the query heads served by one KV group."""
    lt = trace.layer(layer)
    num_groups = lt.keys.shape[0]
    if not 0 <= group < num_groups:
        raise RankingError(f"group {group} outside 0..{num_groups - 1}")
    ratio = lt.group_size
    rows = _window_rows(trace, layer, window)[group * ratio:(group + 1) * ratio]
    return ImportanceScores(rows.sum(axis=(0, 1), dtype=np.float64) / ratio, layer)


def kv_group_scores(trace: ForwardTrace, layer: int, window: int) -> List[ImportanceScores]:
    """kv_group_score for every group, sharing one softmax evaluation."""
    lt = trace.layer(layer)
    num_groups = lt.keys.shape[0]
    ratio = lt.group_size
    per_head = _window_rows(trace, layer, window).sum(axis=1, dtype=np.float64)
    return [ImportanceScores(per_head[g * ratio:(g + 1) * ratio].sum(axis=0) / ratio, layer)
            for g in range(num_groups)]


def lookahead_raw_scores(prompt_trace: ForwardTrace, generated: OracleTrace,
                         head_reduce: str = "max") -> np.ndarray:
    """Raw scores of each generated query against the prompt keys.

    Reduced over (layer, head) with max (or mean); returns [steps, L].
    """
    if head_reduce not in HEAD_REDUCTIONS:
        raise RankingError(f"head_reduce must be one of {HEAD_REDUCTIONS}, got {head_reduce!r}")
    queries = generated.stacked()  # [steps, layers, H, d_k]
    steps, num_layers, num_heads, head_dim = queries.shape
    missing = [l for l in range(num_layers) if l not in prompt_trace.layers]
    if missing:
        raise RankingError(f"prompt trace lacks layers {missing}")
    reduce = np.maximum if head_reduce == "max" else np.add
    out = None
    for l in range(num_layers):
        lt = prompt_trace.layer(l)
        for h in range(num_heads):
            raw = attention_scores(queries[:, l, h], lt.keys[lt.group_of(h)], head_dim)
            out = raw.astype(np.float64) if out is None else reduce(out, raw)
    if head_reduce == "mean":
        out = out / (num_layers * num_heads)
    return out


def spec_prefill_score(spec_trace: ForwardTrace, lookahead: OracleTrace,
                       head_reduce: str = "max") -> ImportanceScores:
    """Mean over lookahead tokens of the max raw score across all speculator layers and heads."""
    if len(lookahead) == 0:
        raise RankingError("speculator produced no lookahead tokens")
    return ImportanceScores(lookahead_raw_scores(spec_trace, lookahead, head_reduce).mean(axis=0))


def oracle_score(prompt_trace: ForwardTrace, oracle: OracleTrace, pool_kernel: int,
                 head_reduce: str = "max") -> ImportanceScores:
    """Answer-informed ranking: pool1d(mean over answer tokens of max raw score over layers/heads)."""
    if len(oracle) == 0:
        raise OracleUndefinedError("oracle undefined: the model generated no answer tokens")
    mean_row = lookahead_raw_scores(prompt_trace, oracle, head_reduce).mean(axis=0)
    return pool1d(ImportanceScores(mean_row), pool_kernel)


def claa_aggregate(buffer: Iterable[ImportanceScores]) -> ImportanceScores:
    """Elementwise max over the buffered layer scores."""
    entries = list(buffer)
    if not entries:
        raise RankingError("cannot aggregate an empty layer-score buffer")
    lengths = {len(e) for e in entries}
    if len(lengths) != 1:
        raise RankingError(f"buffered scores have different lengths: {sorted(lengths)}")
    stacked = np.stack([e.values for e in entries])
    return ImportanceScores(stacked.max(axis=0), entries[-1].layer)


def pool1d(scores: ImportanceScores, kernel: int) -> ImportanceScores:
    """Average pooling with partial windows at the edges; length preserved."""
    if kernel < 1 or kernel % 2 == 0:
        raise RankingError(f"pool kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return scores
    half = kernel // 2
    length = len(scores)
    prefix = np.concatenate([[0.0], np.cumsum(scores.values)])
    idx = np.arange(length)
    lo = np.maximum(0, idx - half)
    hi = np.minimum(length, idx + half + 1)
    return ImportanceScores((prefix[hi] - prefix[lo]) / (hi - lo), scores.layer)


def keep_count(keep_rate: float, length: int) -> int:
    """max(1, round-half-up(keep_rate * L))."""
    if not 0 < keep_rate <= 1:
        raise RankingError(f"keep_rate must be in (0, 1], got {keep_rate}")
    return min(length, max(1, math.floor(keep_rate * length + 0.5)))


def topk_indices(scores: ImportanceScores, k: int,
                 force_include: Optional[Iterable[int]] = None) -> np.ndarray:
    """Ascending indices of the k best scores; forced indices always kept.

    Args:
        scores: per-token importance
        k: number of indices to return
        force_include: indices kept regardless of score (any iterable,
            numpy arrays included); they count towards k

    Returns:
        numpy.ndarray: k sorted int64 indices; equal scores go to the lower index

    Raises:
        RankingError: k outside 1..L, or more forced indices than k
    """
    length = len(scores)
    if k > length:
        raise RankingError(f"k={k} exceeds number of scores {length}")
    if k < 1:
        raise RankingError(f"k must be >= 1, got {k}")
    forced = np.unique(np.asarray([] if force_include is None else list(force_include), dtype=np.int64))
    if len(forced) > k:
        raise RankingError(f"{len(forced)} forced indices exceed k={k}")
    if len(forced) and (forced.min() < 0 or forced.max() >= length):
        raise RankingError("forced index out of range")
    order = np.argsort(-scores.values, kind="stable")
    if len(forced):
        order = order[~np.isin(order, forced)]
    chosen = np.concatenate([forced, order[:k - len(forced)]])
    return np.sort(chosen)


def window_force(length: int, window: int, k: int) -> np.ndarray:
    """The last min(W, k) positions of a sequence."""
    span = min(window, k, length)
    return np.arange(length - span, length)


def select_tokens(scores: ImportanceScores, keep_rate: float,
                  force_include: Optional[Sequence[int]] = None) -> np.ndarray:
    return topk_indices(scores, keep_count(keep_rate, len(scores)), force_include)
