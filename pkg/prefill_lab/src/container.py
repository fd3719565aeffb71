"""Model container: a directory with config.json and weights.bin.

weights.bin is a little-endian stream of records
[u32 name_len][name utf-8][u32 ndim][u32 dims...][f32 row-major data].
"""

import json
import logging
import os
from typing import Dict, Tuple

import numpy as np

from src.errors import ConfigError, MalformedContainerError, ModelFormatError
from src.model import Model, ModelConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.bin"

_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


class _RecordReader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0
        self.last_name = "<start>"

    def done(self) -> bool:
        return self.offset >= len(self.data)

    def _take(self, nbytes: int, what: str) -> bytes:
        end = self.offset + nbytes
        if end > len(self.data):
            raise MalformedContainerError(
                f"truncated {what} after tensor {self.last_name} "
                f"(need {nbytes} bytes at offset {self.offset})"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def _u32(self, what: str) -> int:
        return int(np.frombuffer(self._take(4, what), dtype=_U32)[0])

    def read(self) -> Tuple[str, np.ndarray]:
        name_len = self._u32("name length")
        try:
            name = self._take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedContainerError(f"tensor name after {self.last_name} is not UTF-8") from e
        ndim = self._u32(f"header of {name}")
        dims = tuple(self._u32(f"header of {name}") for _ in range(ndim))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = self._take(count * _F32.itemsize, f"data of {name}")
        self.last_name = name
        return name, np.frombuffer(raw, dtype=_F32).reshape(dims).astype(np.float32)


def read_config(path: str) -> ModelConfig:
    config_path = os.path.join(path, CONFIG_FILE)
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ModelFormatError(f"{config_path} not found") from e
    except json.JSONDecodeError as e:
        raise MalformedContainerError(f"{config_path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MalformedContainerError(f"{config_path} must hold a JSON object")
    return ModelConfig.from_dict(data)


def load_model(path: str) -> Model:
    """Load a model container; every tensor is validated against config."""
    config = read_config(path)
    weights_path = os.path.join(path, WEIGHTS_FILE)
    try:
        with open(weights_path, "rb") as f:
            reader = _RecordReader(f.read())
    except FileNotFoundError as e:
        raise ModelFormatError(f"{weights_path} not found") from e

    tensors: Dict[str, np.ndarray] = {}
    while not reader.done():
        name, array = reader.read()
        if name in tensors:
            raise MalformedContainerError(f"duplicate tensor {name}")
        tensors[name] = array

    model = Model(config, tensors)
    logger.info("loaded %r from %s", model, path)
    return model


def serialize_weights(model: Model) -> bytes:
    chunks = []
    for name, array in model.named_tensors():
        encoded = name.encode("utf-8")
        header = [len(encoded)]
        chunks.append(np.asarray(header, dtype=_U32).tobytes())
        chunks.append(encoded)
        chunks.append(np.asarray([array.ndim, *array.shape], dtype=_U32).tobytes())
        chunks.append(np.ascontiguousarray(array, dtype=_F32).tobytes())
    return b"".join(chunks)


def serialize_config(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def save_model(model: Model, path: str, force: bool = False) -> None:
    """Write model as a container directory; refuses to overwrite without force."""
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")
    config_text = serialize_config(model.config)
    weights = serialize_weights(model)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, CONFIG_FILE), "w", encoding="utf-8") as f:
        f.write(config_text)
    with open(os.path.join(path, WEIGHTS_FILE), "wb") as f:
        f.write(weights)
    logger.info("saved %r to %s (%d bytes of weights)", model, path, len(weights))
