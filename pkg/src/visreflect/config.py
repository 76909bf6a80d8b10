"""Application config: one TOML document with a section per concern.

Credentials never live here; they come from REFLECT_LLM_API_KEY and
REFLECT_VLM_API_KEY at run time.

    [llm]
    base_url = "http://localhost:8000/v1"
    model = "QwQ-32B"

    [vlm]
    base_url = "http://localhost:8001/v1"
    model = "Qwen2.5-VL-72B-Instruct"
    image_encoding = "base64"

    [forge]
    max_rounds = 4

    [reward]
    lambda_v = 0.5
    lambda_f = 0.1

    [analyze]
    bucket_size = 25

    [service]
    port = 8080
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .forge import ForgeConfig
from .rewards import LAMBDA_F, LAMBDA_V

LLM_KEY_ENV = "REFLECT_LLM_API_KEY"
VLM_KEY_ENV = "REFLECT_VLM_API_KEY"


class ConfigError(ValueError):
    pass


@dataclass
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = ""
    image_encoding: str = "url"
    max_concurrency: int = 4
    max_attempts: int = 3
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.image_encoding not in ("url", "base64"):
            raise ConfigError(f"image_encoding must be 'url' or 'base64', got {self.image_encoding!r}")
        if self.max_concurrency < 1 or self.max_attempts < 1:
            raise ConfigError("max_concurrency and max_attempts must be >= 1")


@dataclass
class RewardConfig:
    lambda_v: float = LAMBDA_V
    lambda_f: float = LAMBDA_F
    cap: float | None = None

    def __post_init__(self) -> None:
        for name in ("lambda_v", "lambda_f"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"reward.{name} must be a finite number")


@dataclass
class AnalyzeConfig:
    bucket_size: int = 25
    bootstrap_resamples: int = 1000
    ci_level: float = 0.95
    seed: int = 0


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ConfigError("service.port must be in [1, 65535]")


@dataclass
class AppConfig:
    llm: EndpointConfig = field(default_factory=EndpointConfig)
    vlm: EndpointConfig = field(default_factory=lambda: EndpointConfig(image_encoding="base64"))
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)


_SECTIONS = {
    "llm": EndpointConfig,
    "vlm": EndpointConfig,
    "forge": ForgeConfig,
    "reward": RewardConfig,
    "analyze": AnalyzeConfig,
    "service": ServiceConfig,
}


def _build(cls, section: str, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    if any("key" in k.lower() or "secret" in k.lower() for k in values):
        raise ConfigError(f"[{section}] credentials belong in environment variables")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_from_dict(doc: dict) -> AppConfig:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        if name == "vlm":
            section = {"image_encoding": "base64", **section}
        kwargs[name] = _build(cls, name, section)
    return AppConfig(**kwargs)


def load_config(path: str | None) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)
