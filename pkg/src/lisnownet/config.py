"""Flat ``section.field=value`` run configuration.

Every setting has a default; a config file overrides defaults and explicit
command-line settings override the file. ``dump_config`` writes every key so
a sidecar file alone reproduces a run.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from lisnownet.baselines import DrorConfig, DsorConfig, MedianConfig
from lisnownet.cloud_io import DEFAULT_SNOW_IDS
from lisnownet.model import LossWeights, NetworkConfig
from lisnownet.predict import Thresholds
from lisnownet.range_image import ProjectionConfig
from lisnownet.training import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "proj": ProjectionConfig,
    "net": NetworkConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "thresholds": Thresholds,
    "dror": DrorConfig,
    "dsor": DsorConfig,
    "median": MedianConfig,
}


@dataclass(frozen=True)
class RunConfig:
    proj: ProjectionConfig = ProjectionConfig()
    net: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    loss: LossWeights = LossWeights()
    thresholds: Thresholds = Thresholds()
    dror: DrorConfig = DrorConfig()
    dsor: DsorConfig = DsorConfig()
    median: MedianConfig = MedianConfig()
    snow_ids: frozenset = field(default=DEFAULT_SNOW_IDS)

    def items(self):
        """All ``(key, formatted value)`` pairs in a fixed order."""
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", _format(getattr(obj, f.name))
        yield "snow_ids", _format(self.snow_ids)

    def keys(self):
        return [k for k, _ in self.items()]

    def with_overrides(self, overrides: dict[str, str]) -> RunConfig:
        """Apply string overrides; values are parsed by the type of the current value."""
        cfg = self
        grouped: dict[str, dict] = {}
        for key, text in overrides.items():
            if key == "snow_ids":
                cfg = dataclasses.replace(cfg, snow_ids=_coerce(key, cfg.snow_ids, text))
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(cfg, section)
            if name not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(section, {})[name] = _coerce(key, getattr(obj, name), text)
        for section, changes in grouped.items():
            try:
                new = dataclasses.replace(getattr(cfg, section), **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from None
            cfg = dataclasses.replace(cfg, **{section: new})
        return cfg


def _format(value):
    if isinstance(value, (frozenset, set)):
        return ",".join(str(v) for v in sorted(value))
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, current, text):
    text = text.strip()
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(float(v) for v in text.split(","))
        if isinstance(current, frozenset):
            return frozenset(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None
    return text


def parse_lines(text, source="<config>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored, later keys win."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return (base or RunConfig()).with_overrides(parse_lines(text, str(path)))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: RunConfig, path) -> None:
    lines = [f"{k}={v}" for k, v in cfg.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_thresholds(th: Thresholds, path) -> None:
    Path(path).write_text(
        f"thresholds.n_d={th.n_d!r}\nthresholds.n_i={th.n_i!r}\nthresholds.delta_bar={th.delta_bar!r}\n"
    )
