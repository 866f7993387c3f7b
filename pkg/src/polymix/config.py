"""Run configuration files: UTF-8 text, one ``key = value`` per line.

Blank lines are skipped and ``#`` starts a comment (full-line or trailing).
Every key must belong to the documented schema; unknown or repeated keys and
malformed lines are reported with their 1-based line number.  Values are
coerced to the field's type, so a config file fully determines a training
run plus the sampling settings used afterwards.
"""

from __future__ import annotations

import dataclasses

from .diffusion import (LOSS_DIFFUSION, LOSS_FLOW_MATCHING, SAMPLE_METHODS,
                        TrainConfig)


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


@dataclasses.dataclass
class RunConfig:
    """Training hyperparameters plus post-training sampling settings."""

    train: TrainConfig
    sample_count: int = 1024
    sample_steps: int = 60
    sample_method: str = "heun"
    cfg_weight: float = 1.0
    sample_label: int = -1  # -1 draws labels uniformly at random

    def validate(self) -> None:
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be >= 1")
        if self.sample_method not in SAMPLE_METHODS:
            raise ConfigError(
                f"sample_method must be one of {sorted(SAMPLE_METHODS)}, "
                f"got {self.sample_method!r}")
        if self.sample_method == "ddim" and self.train.loss != LOSS_DIFFUSION:
            raise ConfigError("sample_method ddim requires loss = diffusion")
        if self.sample_method != "ddim" and self.train.loss == LOSS_DIFFUSION:
            raise ConfigError(
                f"sample_method {self.sample_method} requires loss = "
                f"{LOSS_FLOW_MATCHING}")
        if not (self.sample_label == -1
                or 0 <= self.sample_label < self.train.n_classes):
            raise ConfigError(
                f"sample_label must be -1 or in [0, {self.train.n_classes})")


_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_RUN_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)
               if f.name != "train"}

_STR_CHOICES = {
    "loss": (LOSS_DIFFUSION, LOSS_FLOW_MATCHING),
    "dataset": ("mixture2d", "patterns"),
    "sample_method": tuple(sorted(SAMPLE_METHODS)),
}


def config_keys() -> tuple[str, ...]:
    """Every key accepted in a config file, in documentation order."""
    return tuple(_TRAIN_FIELDS) + tuple(_RUN_FIELDS)


def _coerce(key: str, raw: str, line_no: int):
    annot = _TRAIN_FIELDS.get(key, _RUN_FIELDS.get(key))
    kind = annot if isinstance(annot, str) else annot.__name__
    try:
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
        if kind == "str":
            choices = _STR_CHOICES.get(key)
            if choices is not None and raw not in choices:
                raise ValueError(f"must be one of {', '.join(choices)}")
            return raw
    except ValueError as exc:
        raise ConfigError(
            f"line {line_no}: invalid value {raw!r} for {key}: {exc}"
        ) from exc
    raise ConfigError(f"line {line_no}: unsupported field type for {key}")


def parse_config_text(text: str) -> RunConfig:
    """Parse config file contents into a validated :class:`RunConfig`."""
    pairs: dict[str, tuple[str, int]] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', "
                              f"got {raw_line.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        if not value:
            raise ConfigError(f"line {line_no}: empty value for {key!r}")
        if key not in _TRAIN_FIELDS and key not in _RUN_FIELDS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in pairs:
            first = pairs[key][1]
            raise ConfigError(f"line {line_no}: duplicate key {key!r} "
                              f"(first set on line {first})")
        pairs[key] = (value, line_no)

    train_kwargs = {}
    run_kwargs = {}
    for key, (value, line_no) in pairs.items():
        coerced = _coerce(key, value, line_no)
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = coerced
        else:
            run_kwargs[key] = coerced
    cfg = RunConfig(train=TrainConfig(**train_kwargs), **run_kwargs)
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    """Read and parse a config file; errors carry the path and line number."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path} is not valid UTF-8: {exc}") from exc
    try:
        return parse_config_text(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def render_config(cfg: RunConfig) -> str:
    """Write a RunConfig back out as parseable ``key = value`` text."""
    lines = [f"{k} = {v}" for k, v in cfg.train.to_dict().items()]
    for field in dataclasses.fields(RunConfig):
        if field.name == "train":
            continue
        lines.append(f"{field.name} = {getattr(cfg, field.name)}")
    return "\n".join(lines) + "\n"
