import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConfigError, ForwardError, ShapeMismatchError, MissingTensorError

logger = logging.getLogger(__name__)

LAYER_TENSORS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "ffn_norm")
NORM_TENSORS = ("attn_norm", "ffn_norm", "final_norm")
INIT_BOUND = 0.05


@dataclass(frozen=True)
class ModelConfig:
    """Shape-defining configuration of a decoder-only GQA transformer.

    Query head h is served by KV group h // (num_heads // num_kv_heads).
    """

    num_layers: int
    d_model: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    rope_theta: float = 10000.0
    max_position: int = 8192
    ffn_dim: Optional[int] = None
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)
        for name in ("num_layers", "d_model", "num_heads", "num_kv_heads",
                     "head_dim", "vocab_size", "max_position", "ffn_dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.num_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"num_heads ({self.num_heads}) must be divisible by num_kv_heads ({self.num_kv_heads})"
            )
        if self.d_model != self.num_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal num_heads * head_dim "
                f"({self.num_heads} * {self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if not self.rope_theta > 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config fields: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"incomplete model config: {e}") from e

    def tensor_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """All stored tensors in container order with their expected shapes."""
        H, G, dk, d, ff = self.num_heads, self.num_kv_heads, self.head_dim, self.d_model, self.ffn_dim
        per_layer = {
            "wq": (d, H * dk),
            "wk": (d, G * dk),
            "wv": (d, G * dk),
            "wo": (H * dk, d),
            "w_gate": (d, ff),
            "w_up": (d, ff),
            "w_down": (ff, d),
            "attn_norm": (d,),
            "ffn_norm": (d,),
        }
        shapes = [("embed", (self.vocab_size, d))]
        for i in range(self.num_layers):
            shapes.extend((f"layer.{i}.{name}", per_layer[name]) for name in LAYER_TENSORS)
        shapes.append(("final_norm", (d,)))
        if not self.tie_embeddings:
            shapes.append(("lm_head", (d, self.vocab_size)))
        return shapes


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


class Model:
    """Immutable weight container. Safe to share across threads."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, np.ndarray]):
        self.config = config
        expected = config.tensor_shapes()
        expected_names = {name for name, _ in expected}
        extra = sorted(set(tensors) - expected_names)
        if extra:
            raise ShapeMismatchError(f"unexpected tensor {extra[0]}")

        self._tensors: Dict[str, np.ndarray] = {}
        for name, shape in expected:
            if name not in tensors:
                raise MissingTensorError(f"{name} missing")
            array = np.asarray(tensors[name], dtype=np.float32)
            if array.shape != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {array.shape}")
            array = array.copy()
            array.flags.writeable = False
            self._tensors[name] = array

        self.embed = self._tensors["embed"]
        self.final_norm = self._tensors["final_norm"]
        self.lm_head = self.embed.T if config.tie_embeddings else self._tensors["lm_head"]
        self.layers = [
            LayerWeights(**{name: self._tensors[f"layer.{i}.{name}"] for name in LAYER_TENSORS})
            for i in range(config.num_layers)
        ]

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Stored tensors in container order."""
        for name, _ in self.config.tensor_shapes():
            yield name, self._tensors[name]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, array in self.named_tensors():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
        return digest.hexdigest()

    def __repr__(self) -> str:
        c = self.config
        return (f"Model(layers={c.num_layers}, d_model={c.d_model}, heads={c.num_heads}, "
                f"kv_heads={c.num_kv_heads}, vocab={c.vocab_size})")


def random_init_model(config: ModelConfig, seed: int) -> Model:
    """Seeded model: projections and embeddings ~ U[-0.05, 0.05], norm gains = 1.

    Tensors are drawn in container order, so equal (config, seed) gives
    bit-identical weights.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("random_init_model expects a ModelConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.tensor_shapes():
        if name.split(".")[-1] in NORM_TENSORS:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.uniform(-INIT_BOUND, INIT_BOUND, size=shape).astype(np.float32)
    logger.debug("initialised random model seed=%d config=%s", seed, config)
    return Model(config, tensors)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with the (original) position id of each token."""

    tokens: np.ndarray
    position_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.position_ids is None:
            positions = np.arange(len(tokens), dtype=np.int64)
        else:
            positions = np.asarray(self.position_ids, dtype=np.int64).reshape(-1)
        if len(tokens) == 0:
            raise ForwardError("token sequence is empty")
        if len(positions) != len(tokens):
            raise ForwardError(
                f"position_ids length {len(positions)} != tokens length {len(tokens)}"
            )
        if positions[0] < 0 or np.any(np.diff(positions) <= 0):
            raise ForwardError("position_ids must be non-negative and strictly increasing")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "position_ids", positions)

    @classmethod
    def from_tokens(cls, tokens: Sequence[int]) -> "TokenSequence":
        return cls(np.asarray(tokens, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.tokens)

    def select(self, indices: Sequence[int]) -> "TokenSequence":
        """Pruned sequence keeping original position ids ("restore position ids")."""
        indices = np.asarray(indices, dtype=np.int64)
        return TokenSequence(self.tokens[indices], self.position_ids[indices])
