"""Experiment configuration, model and prompt resolution, and output layout.

Resolution order: built-in defaults < .env / environment < JSON config file < CLI flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

from dotenv import load_dotenv

from src.container import load_model
from src.errors import ConfigError
from src.model import Model, ModelConfig, random_init_model
from src.pipelines import Method, PipelineConfig
from src.ranking import HEAD_REDUCTIONS, RankingParams
from src.tasks import PromptRecord, niah_suite, read_prompts

logger = logging.getLogger(__name__)

DESK_MODEL = {
    "num_layers": 8,
    "d_model": 128,
    "num_heads": 8,
    "num_kv_heads": 4,
    "head_dim": 16,
    "vocab_size": 512,
}
DESK_SPECULATOR = {**DESK_MODEL, "num_layers": 2}
MANIFEST_FILE = "manifest.json"

ENV_VARS = {
    "PREFILL_LAB_OUT_DIR": ("out_dir", str),
    "PREFILL_LAB_SEED": ("seed", int),
    "PREFILL_LAB_LOG_LEVEL": ("log_level", str),
    "PREFILL_LAB_WORKERS": ("workers", int),
}


@dataclass(frozen=True)
class ExperimentConfig:
    model_path: Optional[str] = None
    model_config: dict = field(default_factory=lambda: dict(DESK_MODEL))
    speculator_path: Optional[str] = None
    speculator_config: Optional[dict] = None
    params: dict = field(default_factory=dict)
    methods: Tuple[str, ...] = ("full_kv", "claa")
    keep_rates: Tuple[float, ...] = (0.1,)
    prompts_path: Optional[str] = None
    answers_path: Optional[str] = None
    niah_haystack_len: Optional[int] = None
    niah_depths: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    niah_payload_len: int = 4
    out_dir: str = "results"
    seed: int = 0
    workers: int = 1
    log_level: str = "INFO"
    eos_id: Optional[int] = None
    head_reduce: str = "max"
    repeats: int = 3
    decode_steps: int = 32

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "keep_rates", tuple(float(r) for r in self.keep_rates))
        object.__setattr__(self, "niah_depths", tuple(float(d) for d in self.niah_depths))
        if not self.methods:
            raise ConfigError("method list is empty")
        if not self.keep_rates:
            raise ConfigError("keep-rate list is empty")
        for rate in self.keep_rates:
            if not 0 < rate <= 1:
                raise ConfigError(f"keep rate {rate} outside (0, 1]")
        self.method_list()
        if self.head_reduce not in HEAD_REDUCTIONS:
            raise ConfigError(f"head_reduce must be one of {HEAD_REDUCTIONS}, got {self.head_reduce!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not isinstance(logging.getLevelName(self.log_level.upper()), int):
            raise ConfigError(f"unknown log level {self.log_level!r}")
        unknown = set(self.params) - {f.name for f in fields(RankingParams) if f.name != "keep_rate"}
        if unknown:
            raise ConfigError(f"unknown ranking parameters: {', '.join(sorted(unknown))}")

    @classmethod
    def resolve(cls, config_path: Optional[str] = None, overrides: Optional[dict] = None) -> "ExperimentConfig":
        """Merge defaults, environment (.env honoured), a JSON config file and explicit overrides."""
        load_dotenv()
        merged: dict = {}
        for var, (name, cast) in ENV_VARS.items():
            value = os.getenv(var)
            if value:
                try:
                    merged[name] = cast(value)
                except ValueError as e:
                    raise ConfigError(f"{var}={value!r}: {e}") from e
        if config_path is not None:
            _merge(merged, _read_json(config_path))
        _merge(merged, dict(overrides or {}))

        known = {f.name for f in fields(cls)}
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown experiment settings: {', '.join(sorted(unknown))}")
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)

    def method_list(self) -> List[Method]:
        return [Method.parse(name) for name in self.methods]

    def ranking_params(self, num_layers: int) -> RankingParams:
        """Ranking parameters at the first keep rate; sweeps override keep_rate per cell.

        Only layer settings left at their defaults follow the model size; explicit
        ones must fit the model or a ConfigError is raised.
        """
        params = RankingParams(**self.params, keep_rate=self.keep_rates[0]).scaled_to(num_layers, self.params)
        params.validate_for(num_layers)
        return params

    def load_base_model(self) -> Model:
        if self.model_path is not None:
            return load_model(self.model_path)
        return random_init_model(ModelConfig.from_dict(self.model_config), self.seed)

    def load_speculator(self) -> Optional[Model]:
        """Speculator from a path or config; the desk speculator when spec_prefill needs one."""
        if self.speculator_path is not None:
            return load_model(self.speculator_path)
        if self.speculator_config is not None:
            return random_init_model(ModelConfig.from_dict(self.speculator_config), self.seed + 1)
        if Method.SPEC_PREFILL in self.method_list():
            spec = {**DESK_SPECULATOR, "vocab_size": self.model_config.get("vocab_size", 512)}
            return random_init_model(ModelConfig.from_dict(spec), self.seed + 1)
        return None

    def pipeline_config(self, model: Model, speculator: Optional[Model] = None,
                        method: Method = Method.FULL_KV) -> PipelineConfig:
        return PipelineConfig(method, self.ranking_params(model.config.num_layers), speculator,
                              self.eos_id, self.head_reduce)

    def load_prompts(self, vocab_size: int) -> List[PromptRecord]:
        if self.prompts_path is not None:
            records = read_prompts(self.prompts_path, self.answers_path)
        elif self.niah_haystack_len is not None:
            records = niah_suite(self.niah_haystack_len, self.niah_depths, self.seed, vocab_size,
                                 self.niah_payload_len)
        else:
            raise ConfigError("no prompt source: pass --prompts or --niah-haystack-len")
        if not records:
            raise ConfigError("no prompts")
        return records

    def output_dir(self, command: str, method: Optional[str] = None, keep_rate: Optional[float] = None) -> str:
        """<out>/<command>/<method>/<keep_rate>, created on demand."""
        parts = [self.out_dir, command]
        if method is not None:
            parts.append(method)
        if keep_rate is not None:
            parts.append(f"{keep_rate:g}")
        path = os.path.join(*parts)
        os.makedirs(path, exist_ok=True)
        return path

    def write_manifest(self, command: str, **extra) -> str:
        path = os.path.join(self.output_dir(command), MANIFEST_FILE)
        payload = {"command": command, "config": self.to_dict(), **extra}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path


def _read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _merge(base: dict, update: dict) -> None:
    """Shallow merge; the nested params and model_config dicts merge key by key."""
    for key, value in update.items():
        if key in ("params", "model_config") and isinstance(value, dict):
            base[key] = {**base.get(key, DESK_MODEL if key == "model_config" else {}), **value}
        else:
            base[key] = value
