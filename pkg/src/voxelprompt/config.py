"""Server configuration: a flat key = value file (comments with #).

Keys: port, host, cache_bytes, backend, workers, gateway_port, assets_dir,
worker_timeout_s, log_level.  Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    pass


def _default_workers() -> int:
    return max(2, (os.cpu_count() or 2) - 1)


@dataclass
class ServerConfig:
    port: int = 8942
    host: str = "127.0.0.1"
    cache_bytes: int = 8 << 30
    backend: str = "reference"
    workers: int = field(default_factory=_default_workers)
    gateway_port: Optional[int] = None
    assets_dir: Optional[str] = None
    worker_timeout_s: float = 300.0
    log_level: str = "INFO"

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port {self.port} out of [1, 65535]")
        if self.cache_bytes <= 0:
            raise ConfigError("cache_bytes must be positive")
        if self.backend != "reference":
            raise ConfigError(
                f"unknown backend {self.backend!r}; learned models attach as workers"
            )
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.gateway_port is not None and not 1 <= self.gateway_port <= 65535:
            raise ConfigError(f"gateway_port {self.gateway_port} out of [1, 65535]")
        if self.worker_timeout_s <= 0:
            raise ConfigError("worker_timeout_s must be positive")


_INT_KEYS = {"port", "cache_bytes", "workers", "gateway_port"}
_FLOAT_KEYS = {"worker_timeout_s"}
_STR_KEYS = {"host", "backend", "assets_dir", "log_level"}


def parse_config_text(text: str) -> ServerConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
            val = val[1:-1]
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _INT_KEYS:
            try:
                values[key] = int(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} wants an integer, got {val!r}")
        elif key in _FLOAT_KEYS:
            try:
                values[key] = float(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} wants a number, got {val!r}")
        elif key in _STR_KEYS:
            values[key] = val
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return ServerConfig(**values)


def load_config(path) -> ServerConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
