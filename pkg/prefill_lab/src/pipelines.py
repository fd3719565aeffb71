"""Prefill architectures: the full-KV baseline, two-pass sequence pruning
(GemFilter, Speculative Prefill, oracle) and single-pass in-flight
compression (FastKV, CLAA, oracle emulation), plus greedy decode.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.cache_policies import ClaaPolicy, FastKVPolicy, OracleEmulationPolicy
from src.engine import KvCache, full_forward, greedy_generate
from src.errors import ArchitectureError, ConfigError, RankingError
from src.model import Model, TokenSequence
from src.ranking import (
    ImportanceScores,
    RankingParams,
    gemfilter_score,
    keep_count,
    oracle_score,
    pool1d,
    select_tokens,
    spec_prefill_score,
    topk_indices,
)

logger = logging.getLogger(__name__)

Prompt = Union[TokenSequence, Sequence[int], np.ndarray]


class Method(str, Enum):
    FULL_KV = "full_kv"
    GEMFILTER = "gemfilter"
    FASTKV = "fastkv"
    SPEC_PREFILL = "spec_prefill"
    ORACLE = "oracle"
    ORACLE_EMULATED = "oracle_emulated"
    CLAA = "claa"

    @classmethod
    def parse(cls, name: str) -> "Method":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown method {name!r}; valid names: {valid}") from None

    @property
    def is_two_pass(self) -> bool:
        return self in (Method.GEMFILTER, Method.SPEC_PREFILL, Method.ORACLE)

    @property
    def needs_oracle(self) -> bool:
        return self in (Method.ORACLE, Method.ORACLE_EMULATED)


@dataclass(frozen=True)
class PipelineConfig:
    method: Method
    params: RankingParams = field(default_factory=RankingParams)
    speculator: Optional[Model] = None
    eos_id: Optional[int] = None
    head_reduce: str = "max"

    def validate(self, model: Model) -> None:
        self.params.validate_for(model.config.num_layers)
        if self.method == Method.SPEC_PREFILL:
            if self.speculator is None:
                raise ConfigError("spec_prefill requires a speculator model")
            if self.speculator.config.vocab_size != model.config.vocab_size:
                raise ConfigError(
                    f"speculator vocab {self.speculator.config.vocab_size} != "
                    f"base vocab {model.config.vocab_size}"
                )


@dataclass
class PrefillResult:
    method: Method
    keep_rate: float
    prompt_len: int
    next_logits: np.ndarray
    kv: KvCache
    kept_indices: np.ndarray
    ranking_scores: Optional[ImportanceScores] = None
    per_layer_scores: Dict[int, ImportanceScores] = field(default_factory=dict)
    wall_time: float = 0.0

    def cache_bytes_per_layer(self) -> List[int]:
        return [layer.nbytes for layer in self.kv.layers]

    def summary(self) -> dict:
        per_layer = self.cache_bytes_per_layer()
        return {
            "method": self.method.value,
            "keep_rate": self.keep_rate,
            "prompt_len": self.prompt_len,
            "kept_indices": [int(i) for i in self.kept_indices],
            "ttft_ms": self.wall_time * 1000.0,
            "cache_bytes_per_layer": per_layer,
            "cache_bytes": int(sum(per_layer)),
        }


def as_sequence(prompt: Prompt) -> TokenSequence:
    """Prompts always start at position 0."""
    tokens = prompt.tokens if isinstance(prompt, TokenSequence) else prompt
    return TokenSequence.from_tokens(tokens)


def _two_pass(model: Model, seq: TokenSequence, indices: np.ndarray):
    out = full_forward(model, seq.select(indices), last_only=True)
    out.kv.next_position = len(seq)
    return out


def _result(cfg: PipelineConfig, seq: TokenSequence, out, kept: np.ndarray, started: float,
            scores: Optional[ImportanceScores] = None, per_layer=None) -> PrefillResult:
    elapsed = time.perf_counter() - started
    keep_rate = 1.0 if cfg.method == Method.FULL_KV else cfg.params.keep_rate
    logger.info("%s prefill L=%d kept=%d in %.1f ms", cfg.method.value, len(seq), len(kept), elapsed * 1000)
    return PrefillResult(cfg.method, keep_rate, len(seq), out.logits[-1], out.kv, np.asarray(kept),
                         scores, dict(per_layer or {}), elapsed)


def full_prefill(model: Model, prompt: Prompt, cfg: Optional[PipelineConfig] = None) -> PrefillResult:
    cfg = cfg or PipelineConfig(Method.FULL_KV)
    started = time.perf_counter()
    seq = as_sequence(prompt)
    out = full_forward(model, seq, last_only=True)
    return _result(PipelineConfig(Method.FULL_KV, cfg.params), seq, out, np.arange(len(seq)), started)


def gemfilter_prefill(model: Model, prompt: Prompt, cfg: PipelineConfig) -> PrefillResult:
    """Rank with the last token's query at the routing layer, then rerun on the kept tokens."""
    cfg.validate(model)
    p = cfg.params
    started = time.perf_counter()
    seq = as_sequence(prompt)
    partial = full_forward(model, seq, stop_after=p.routing_layer)
    scores = pool1d(gemfilter_score(partial.trace, p.routing_layer), p.pool_kernel)
    forced = [len(seq) - 1] if p.force_last else None
    kept = select_tokens(scores, p.keep_rate, forced)
    return _result(cfg, seq, _two_pass(model, seq, kept), kept, started, scores)


def fastkv_prefill(model: Model, prompt: Prompt, cfg: PipelineConfig) -> PrefillResult:
    cfg.validate(model)
    started = time.perf_counter()
    seq = as_sequence(prompt)
    policy = FastKVPolicy(cfg.params, len(seq))
    out = full_forward(model, seq, compress_hook=policy, last_only=True)
    out.kv.next_position = len(seq)
    return _result(cfg, seq, out, policy.pruning_indices, started, policy.ranking_scores)


def speculative_prefill(base: Model, spec: Model, prompt: Prompt, cfg: PipelineConfig) -> PrefillResult:
    """Score the prompt with a speculator's k lookahead queries, then prefill the base on kept tokens."""
    if spec.config.vocab_size != base.config.vocab_size:
        raise ConfigError(f"speculator vocab {spec.config.vocab_size} != base vocab {base.config.vocab_size}")
    base_cfg = PipelineConfig(Method.SPEC_PREFILL, cfg.params, spec, cfg.eos_id, cfg.head_reduce)
    base_cfg.validate(base)
    p = cfg.params
    started = time.perf_counter()
    seq = as_sequence(prompt)
    drafted = full_forward(spec, seq, capture=range(spec.config.num_layers), last_only=True)
    lookahead = greedy_generate(spec, drafted.kv, drafted.logits[-1], p.lookahead)
    scores = pool1d(spec_prefill_score(drafted.trace, lookahead, cfg.head_reduce), p.pool_kernel)
    forced = [len(seq) - 1] if p.force_last else None
    kept = select_tokens(scores, p.keep_rate, forced)
    return _result(base_cfg, seq, _two_pass(base, seq, kept), kept, started, scores)


def oracle_ranking(model: Model, prompt: Prompt, cfg: PipelineConfig) -> ImportanceScores:
    """Answer-informed ranking: greedy answer up to max_gen tokens attending back to the prompt.

    Args:
        model: decoder that generates the answer
        prompt: prompt tokens
        cfg: supplies max_gen, pool_kernel, eos_id and head_reduce

    Returns:
        ImportanceScores: pooled per-token scores of prompt length

    Raises:
        OracleUndefinedError: the model emitted eos before any answer token
    """
    seq = as_sequence(prompt)
    out = full_forward(model, seq, capture=range(model.config.num_layers), last_only=True)
    answer = greedy_generate(model, out.kv, out.logits[-1], cfg.params.max_gen, cfg.eos_id)
    logger.debug("oracle answer: %d tokens", len(answer))
    return oracle_score(out.trace, answer, cfg.params.pool_kernel, cfg.head_reduce)


def _check_oracle_length(scores: ImportanceScores, seq: TokenSequence) -> None:
    if len(scores) != len(seq):
        raise RankingError(f"oracle scores have length {len(scores)}, prompt has {len(seq)}")


def oracle_prefill(model: Model, prompt: Prompt, scores: ImportanceScores,
                   cfg: PipelineConfig) -> PrefillResult:
    cfg.validate(model)
    started = time.perf_counter()
    seq = as_sequence(prompt)
    _check_oracle_length(scores, seq)
    kept = topk_indices(scores, keep_count(cfg.params.keep_rate, len(seq)))
    return _result(cfg, seq, _two_pass(model, seq, kept), kept, started, scores)


def oracle_emulation_prefill(model: Model, prompt: Prompt, scores: ImportanceScores,
                             cfg: PipelineConfig) -> PrefillResult:
    """Oracle ranking run through the single-pass architecture (upper bound for FastKV/CLAA)."""
    cfg.validate(model)
    started = time.perf_counter()
    seq = as_sequence(prompt)
    _check_oracle_length(scores, seq)
    policy = OracleEmulationPolicy(cfg.params, len(seq), scores)
    out = full_forward(model, seq, compress_hook=policy, last_only=True)
    out.kv.next_position = len(seq)
    return _result(cfg, seq, out, policy.pruning_indices, started, scores)


def claa_prefill(model: Model, prompt: Prompt, cfg: PipelineConfig) -> PrefillResult:
    """Single-pass prefill ranked by the max over the last n layers' window scores.

    Layers below defer_layers keep their full cache. Layers defer_layers..l_p
    store the tokens ranked by their own window score, and the buffered
    aggregate prunes the hidden states at l_p.

    Args:
        model: base decoder
        prompt: prompt tokens
        cfg: window_size, agg_window, defer_layers, pruning_layer, keep_rate

    Returns:
        PrefillResult: with per_layer_scores for every scored layer
    """
    cfg.validate(model)
    started = time.perf_counter()
    seq = as_sequence(prompt)
    policy = ClaaPolicy(cfg.params, len(seq))
    out = full_forward(model, seq, compress_hook=policy, last_only=True)
    out.kv.next_position = len(seq)
    return _result(cfg, seq, out, policy.pruning_indices, started, policy.ranking_scores,
                   policy.layer_scores)


def run_pipeline(model: Model, prompt: Prompt, cfg: PipelineConfig,
                 oracle_scores: Optional[ImportanceScores] = None) -> PrefillResult:
    """Run the prefill architecture named by cfg.method.

    Args:
        model: base decoder
        prompt: token ids or a TokenSequence starting at position 0
        cfg: method, ranking parameters and optional speculator
        oracle_scores: precomputed answer-informed ranking; oracle methods
            compute it when none is given

    Returns:
        PrefillResult: compressed cache, next-token logits and kept indices
    """
    method = cfg.method
    if method == Method.FULL_KV:
        return full_prefill(model, prompt, cfg)
    if method == Method.GEMFILTER:
        return gemfilter_prefill(model, prompt, cfg)
    if method == Method.FASTKV:
        return fastkv_prefill(model, prompt, cfg)
    if method == Method.CLAA:
        return claa_prefill(model, prompt, cfg)
    if method == Method.SPEC_PREFILL:
        cfg.validate(model)
        return speculative_prefill(model, cfg.speculator, prompt, cfg)
    if oracle_scores is None:
        oracle_scores = oracle_ranking(model, prompt, cfg)
    if method == Method.ORACLE:
        return oracle_prefill(model, prompt, oracle_scores, cfg)
    return oracle_emulation_prefill(model, prompt, oracle_scores, cfg)


def decode(model: Model, result: PrefillResult, steps: int, eos_id: Optional[int] = None) -> List[int]:
    """Greedy tokens from a (possibly compressed) prefill cache; result.kv is left untouched."""
    if steps < 1:
        raise ConfigError(f"decode steps must be >= 1, got {steps}")
    trace = greedy_generate(model, result.kv.copy(), result.next_logits, steps, eos_id,
                            record_queries=False)
    return trace.tokens


def _positions(result: PrefillResult, layer: int) -> np.ndarray:
    return result.kv.layers[layer].position_ids


def check_architecture(result: PrefillResult, cfg: PipelineConfig, num_layers: int) -> None:
    """Verify the cache-length and index-set contracts of the result's architecture."""
    L = result.prompt_len
    kept = np.asarray(result.kept_indices)
    keep = len(kept)
    p = cfg.params

    def fail(layer, msg):
        raise ArchitectureError(f"{result.method.value} layer {layer}: {msg}")

    if len(result.kv) != num_layers:
        fail("-", f"cache has {len(result.kv)} layers, expected {num_layers}")
    if np.any(np.diff(kept) <= 0):
        fail("-", "kept indices are not strictly ascending")
    for l, layer in enumerate(result.kv.layers):
        try:
            layer.validate()
        except Exception as e:
            fail(l, str(e))

    method = result.method
    for l in range(num_layers):
        positions = _positions(result, l)
        length = positions.shape[1]
        if method == Method.FULL_KV:
            expected_full = True
        elif method == Method.CLAA:
            expected_full = l < p.defer_layers
        else:
            expected_full = False

        if expected_full:
            if length != L or not np.array_equal(positions[0], np.arange(L)):
                fail(l, f"expected the full uncompressed cache of {L} entries, got {length}")
            continue
        if length != keep:
            fail(l, f"cache length {length} != keep count {keep}")
        if method == Method.CLAA:
            if l <= p.pruning_layer and not result.kv.layers[l].is_uniform():
                fail(l, "CLAA caches must share one index set across groups")
            shared = l > p.pruning_layer
        elif method == Method.FASTKV:
            shared = l >= p.pruning_layer
        else:
            shared = True
        if shared and not np.all(positions == kept[None, :]):
            fail(l, "cache positions differ from the kept index set")
