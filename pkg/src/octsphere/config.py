"""Plain ``key = value`` configuration files for network and training settings."""

from __future__ import annotations

from dataclasses import fields

from .network import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_configs(raw: dict, **overrides):
    """Split raw ``key -> string`` pairs into ``(NetworkConfig, TrainConfig)``."""
    net_defaults, train_defaults = NetworkConfig(), TrainConfig()
    net_keys = {f.name for f in fields(NetworkConfig)}
    net_kw, train_kw = {}, {}
    for key, val in raw.items():
        if key in net_keys:
            target, default = net_kw, getattr(net_defaults, key)
        elif key in {f.name for f in fields(TrainConfig)}:
            target, default = train_kw, getattr(train_defaults, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            target[key] = _parse_value(val, default) if isinstance(val, str) else val
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    for key, val in overrides.items():
        if val is None:
            continue
        (net_kw if key in net_keys else train_kw)[key] = val
    try:
        return NetworkConfig(**net_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides):
    with open(path) as fh:
        return build_configs(parse_config_text(fh.read()), **overrides)


def format_config(*configs) -> str:
    lines = []
    for cfg in configs:
        lines.append(f"# {type(cfg).__name__}")
        for f in fields(cfg):
            lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
