"""Forward pass, KV cache and greedy generation for the numpy decoder."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from src.attention import apply_rotary, grouped_attention, rms_norm, rope_angles, silu
from src.errors import ForwardError, RankingError
from src.model import Model, TokenSequence

logger = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class LayerCache:
    """Stored keys/values of one layer.

    keys, values: [G, len, d_k]; position_ids: [G, len], strictly increasing
    per group. Groups of a layer always share the same length.
    """

    keys: np.ndarray
    values: np.ndarray
    position_ids: np.ndarray

    @classmethod
    def uniform(cls, keys: np.ndarray, values: np.ndarray, position_ids: np.ndarray) -> "LayerCache":
        positions = np.broadcast_to(np.asarray(position_ids, dtype=np.int64), keys.shape[:2]).copy()
        return cls(keys, values, positions)

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    @property
    def num_groups(self) -> int:
        return self.keys.shape[0]

    @property
    def nbytes(self) -> int:
        """2 * G * len * d_k * 4 (keys and values, 4-byte elements)."""
        groups, length, head_dim = self.keys.shape
        return 2 * groups * length * head_dim * BYTES_PER_ELEMENT

    def select(self, indices: Sequence[int]) -> "LayerCache":
        """Keep the same sequence indices in every group."""
        indices = np.asarray(indices, dtype=np.int64)
        return LayerCache(self.keys[:, indices], self.values[:, indices], self.position_ids[:, indices])

    def select_per_group(self, indices: Sequence[Sequence[int]]) -> "LayerCache":
        """Keep an independent index set per KV group (all of equal size)."""
        rows = np.asarray(indices, dtype=np.int64)
        if rows.shape[0] != self.num_groups:
            raise ForwardError(f"expected {self.num_groups} index sets, got {rows.shape[0]}")
        picks = rows[:, :, None]
        return LayerCache(
            np.take_along_axis(self.keys, picks, axis=1),
            np.take_along_axis(self.values, picks, axis=1),
            np.take_along_axis(self.position_ids, rows, axis=1),
        )

    def extended(self, keys: np.ndarray, values: np.ndarray, position: int) -> "LayerCache":
        """Append one uncompressed entry ([G, 1, d_k]) at the given position."""
        new_pos = np.full((self.num_groups, 1), position, dtype=np.int64)
        return LayerCache(
            np.concatenate([self.keys, keys], axis=1),
            np.concatenate([self.values, values], axis=1),
            np.concatenate([self.position_ids, new_pos], axis=1),
        )

    def is_uniform(self) -> bool:
        return bool(np.all(self.position_ids == self.position_ids[:1]))

    def validate(self) -> None:
        if self.keys.shape != self.values.shape:
            raise ForwardError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.position_ids.shape != self.keys.shape[:2]:
            raise ForwardError("position ids do not match cache length")
        if self.length > 1 and np.any(np.diff(self.position_ids, axis=1) <= 0):
            raise ForwardError("cache position ids must be strictly increasing")


class KvCache:
    """Per-layer caches; each layer may have been compressed independently."""

    def __init__(self, layers: Optional[List[LayerCache]] = None, next_position: int = 0):
        self.layers: List[LayerCache] = list(layers or [])
        self.next_position = next_position

    def copy(self) -> "KvCache":
        return KvCache(list(self.layers), self.next_position)

    def lengths(self) -> List[int]:
        return [layer.length for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class LayerTrace:
    queries: np.ndarray  # [H, L, d_k], post-rotary
    keys: np.ndarray  # [G, L, d_k], post-rotary

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    @property
    def group_size(self) -> int:
        """Query heads per KV group."""
        return self.queries.shape[0] // self.keys.shape[0]

    def group_of(self, head: int) -> int:
        return head // self.group_size


@dataclass
class ForwardTrace:
    """Captured per-layer queries and keys of a forward pass."""

    length: int
    layers: Dict[int, LayerTrace] = field(default_factory=dict)

    @property
    def captured(self) -> frozenset:
        return frozenset(self.layers)

    def layer(self, index: int) -> LayerTrace:
        if index not in self.layers:
            raise RankingError(f"layer {index} was not captured (captured: {sorted(self.layers)})")
        return self.layers[index]


@dataclass
class OracleTrace:
    """Greedy continuation: emitted tokens and each token's queries [num_layers, H, d_k]."""

    tokens: List[int] = field(default_factory=list)
    queries: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def stacked(self) -> np.ndarray:
        """Queries as [steps, num_layers, H, d_k]."""
        return np.stack(self.queries)


@dataclass(frozen=True)
class LayerView:
    """What a cache policy sees of one layer during the forward pass."""

    layer: int
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    position_ids: np.ndarray

    @property
    def trace(self) -> ForwardTrace:
        return ForwardTrace(self.keys.shape[1], {self.layer: LayerTrace(self.queries, self.keys)})

    def cache(self) -> LayerCache:
        return LayerCache.uniform(self.keys, self.values, self.position_ids)


class CachePolicy(ABC):
    """Per-layer hook of the forward pass.

    compress() may replace what is stored in the layer's cache; it never
    changes the hidden states. prune() may shrink the hidden-state sequence
    after the layer has run.
    """

    @abstractmethod
    def compress(self, view: LayerView) -> Optional[LayerCache]:
        pass

    def prune(self, view: LayerView) -> Optional[np.ndarray]:
        return None


class ForwardOutput(NamedTuple):
    logits: Optional[np.ndarray]
    kv: KvCache
    trace: ForwardTrace


def _check_inputs(model: Model, tokens: np.ndarray, positions: np.ndarray) -> None:
    cfg = model.config
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        bad = int(tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0])
        raise ForwardError(f"token id {bad} out of range [0, {cfg.vocab_size})")
    if np.any(positions >= cfg.max_position):
        raise ForwardError(f"position id {int(positions.max())} >= max_position {cfg.max_position}")


def _project(x: np.ndarray, weight: np.ndarray, heads: int, head_dim: int) -> np.ndarray:
    return (x @ weight).reshape(x.shape[0], heads, head_dim).transpose(1, 0, 2)


def _feed_forward(model: Model, layer: int, x: np.ndarray) -> np.ndarray:
    w = model.layers[layer]
    h = rms_norm(x, w.ffn_norm)
    return x + (silu(h @ w.w_gate) * (h @ w.w_up)) @ w.w_down


def full_forward(model: Model, seq: TokenSequence, capture: Iterable[int] = (),
                 compress_hook: Optional[CachePolicy] = None, stop_after: Optional[int] = None,
                 last_only: bool = False) -> ForwardOutput:
    """Pre-norm decoder forward with rotary at each token's original position.

    Args:
        model: decoder weights and config
        seq: prompt tokens with their position ids
        capture: layers whose post-rotary queries and keys go into the trace
        compress_hook: policy that may replace each layer's stored cache and
            prune the hidden-state sequence after a layer
        stop_after: run layers 0..r-1 only and capture layer r
        last_only: compute logits for the final position only

    Returns:
        ForwardOutput: logits (None when stop_after is set), the KV cache and
        the captured trace
    """
    cfg = model.config
    _check_inputs(model, seq.tokens, seq.position_ids)
    capture = frozenset(capture)
    if any(l < 0 or l >= cfg.num_layers for l in capture):
        raise ForwardError(f"capture layers {sorted(capture)} outside 0..{cfg.num_layers - 1}")
    if stop_after is not None:
        if not 0 <= stop_after < cfg.num_layers:
            raise ForwardError(f"stop_after {stop_after} outside 0..{cfg.num_layers - 1}")
        capture = capture | {stop_after}

    H, G, dk = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    x = model.embed[seq.tokens]
    positions = seq.position_ids
    kv = KvCache(next_position=int(positions[-1]) + 1)
    trace = ForwardTrace(len(seq))

    for l, w in enumerate(model.layers):
        cos, sin = rope_angles(positions, dk, cfg.rope_theta)
        h = rms_norm(x, w.attn_norm)
        q = apply_rotary(_project(h, w.wq, H, dk), cos, sin)
        k = apply_rotary(_project(h, w.wk, G, dk), cos, sin)
        if l in capture:
            trace.layers[l] = LayerTrace(q, k)
        if l == stop_after:
            return ForwardOutput(None, kv, trace)
        v = _project(h, w.wv, G, dk)

        attn = grouped_attention(q, k, v)
        view = LayerView(l, q, k, v, positions)
        stored = compress_hook.compress(view) if compress_hook is not None else None
        kv.layers.append(stored if stored is not None else view.cache())

        x = x + attn @ w.wo
        x = _feed_forward(model, l, x)

        if compress_hook is not None:
            keep = compress_hook.prune(view)
            if keep is not None:
                x = x[keep]
                positions = positions[keep]
                logger.debug("layer %d: hidden states pruned to %d tokens", l, len(keep))

    hidden = rms_norm(x[-1:] if last_only else x, model.final_norm)
    return ForwardOutput(hidden @ model.lm_head, kv, trace)


def forward_step(model: Model, kv: KvCache, token: int):
    """One-token forward extending kv in place at kv.next_position.

    Returns (logits [vocab], queries [num_layers, H, d_k]).
    """
    cfg = model.config
    if len(kv) != cfg.num_layers:
        raise ForwardError(f"cache has {len(kv)} layers, model has {cfg.num_layers}")
    position = kv.next_position
    _check_inputs(model, np.asarray([token]), np.asarray([position]))

    H, G, dk = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    cos, sin = rope_angles([position], dk, cfg.rope_theta)
    x = model.embed[[token]]
    queries = np.empty((cfg.num_layers, H, dk), dtype=np.float32)
    for l, w in enumerate(model.layers):
        h = rms_norm(x, w.attn_norm)
        q = apply_rotary(_project(h, w.wq, H, dk), cos, sin)
        k = apply_rotary(_project(h, w.wk, G, dk), cos, sin)
        v = _project(h, w.wv, G, dk)
        layer = kv.layers[l].extended(k, v, position)
        kv.layers[l] = layer
        queries[l] = q[:, 0, :]
        x = x + grouped_attention(q, layer.keys, layer.values) @ w.wo
        x = _feed_forward(model, l, x)
    kv.next_position = position + 1
    logits = rms_norm(x, model.final_norm) @ model.lm_head
    return logits[0], queries


def greedy_generate(model: Model, kv: KvCache, last_logits: np.ndarray, max_gen: int,
                    eos_id: Optional[int] = None, record_queries: bool = True) -> OracleTrace:
    """Greedy continuation extending kv; stops before storing eos or after max_gen tokens.

    Ties in argmax go to the lowest token id.

    Args:
        model: decoder the cache belongs to
        kv: cache extended in place
        last_logits: next-token logits at the end of the prefill
        max_gen: upper bound on generated tokens
        eos_id: token that ends generation without being stored
        record_queries: keep each step's queries for answer-informed scoring

    Returns:
        OracleTrace: generated tokens and, when recorded, their queries
    """
    if max_gen < 1:
        raise ForwardError(f"max_gen must be >= 1, got {max_gen}")
    out = OracleTrace()
    logits = last_logits
    for _ in range(max_gen):
        token = int(np.argmax(logits))
        if eos_id is not None and token == eos_id:
            break
        logits, queries = forward_step(model, kv, token)
        out.tokens.append(token)
        if record_queries:
            out.queries.append(queries)
    logger.debug("generated %d tokens", len(out))
    return out
