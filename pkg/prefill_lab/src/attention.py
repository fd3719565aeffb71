"""Dense attention primitives in float32."""

from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from src.errors import RankingError

RMS_EPS = 1e-5
QUERY_BLOCK = 256


def attention_scores(queries: np.ndarray, keys: np.ndarray, head_dim: int) -> np.ndarray:
    """Raw scaled dot products: out[i, j] = Q[i] . K[j] / sqrt(d_k). No mask, no softmax."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float32))
    if queries.shape[-1] != head_dim or keys.shape[-1] != head_dim:
        raise RankingError(
            f"dimension mismatch: queries {queries.shape[-1]}, keys {keys.shape[-1]}, d_k {head_dim}"
        )
    return (queries @ keys.T) * np.float32(1.0 / np.sqrt(head_dim))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=-1, keepdims=True)


def causal_mask(n_q: int, n_k: int, offset: int, first_query: int = 0) -> np.ndarray:
    """True where key j lies after query i, i.e. j > i + offset."""
    rows = np.arange(first_query, first_query + n_q)[:, None]
    return np.arange(n_k)[None, :] > rows + offset


def softmax_rows(scores: np.ndarray, causal_offset: Optional[int] = None) -> np.ndarray:
    """Row-wise stabilised softmax; with causal_offset, entries j > i + offset get 0."""
    scores = np.asarray(scores, dtype=np.float32)
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise RankingError("softmax_rows needs a non-empty 2-D score matrix")
    if causal_offset is not None:
        if causal_offset < 0:
            raise RankingError(f"causal_offset must be >= 0, got {causal_offset}")
        scores = np.where(causal_mask(*scores.shape, causal_offset), -np.inf, scores)
    return _softmax(scores)


def rope_angles(positions: np.ndarray, head_dim: int, theta: float) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [n, head_dim/2] for interleaved pairs (2i, 2i+1)."""
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate [..., n, head_dim] by per-position angles."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    variance = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(variance + np.float32(eps))) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return (x * expit(x)).astype(np.float32)


def grouped_attention(queries: np.ndarray, keys: np.ndarray, values: np.ndarray,
                      block: int = QUERY_BLOCK) -> np.ndarray:
    """Causal grouped-query attention.

    queries [H, n, d_k]; keys/values [G, m, d_k] with m >= n. The n queries
    are the last n positions of the m keys, so query i may see keys
    0..i + (m - n). Returns [n, H * d_k].
    """
    num_heads, n, head_dim = queries.shape
    num_groups, m, _ = keys.shape
    ratio = num_heads // num_groups
    offset = m - n
    scale = np.float32(1.0 / np.sqrt(head_dim))

    grouped = queries.reshape(num_groups, ratio, n, head_dim)
    keys_t = keys.transpose(0, 2, 1)[:, None]
    vals = values[:, None]
    out = np.empty((num_groups, ratio, n, head_dim), dtype=np.float32)
    for start in range(0, n, block):
        stop = min(n, start + block)
        visible = stop + offset
        scores = (grouped[:, :, start:stop] @ keys_t[..., :visible]) * scale
        mask = causal_mask(stop - start, visible, offset, first_query=start)
        probs = _softmax(np.where(mask, -np.inf, scores))
        out[:, :, start:stop] = probs @ vals[:, :, :visible]
    return out.reshape(num_heads, n, head_dim).transpose(1, 0, 2).reshape(n, num_heads * head_dim)
