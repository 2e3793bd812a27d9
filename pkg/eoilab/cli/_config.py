"""Reading and writing training configurations."""

import configparser
from typing import Iterable

from eoilab.errors import ConfigError
from eoilab.trainer import TrainConfig, validate_config

SECTIONS = {
    "experiment": (
        "env_kind",
        "learner_kind",
        "episodes",
        "eval_interval",
        "eval_episodes",
        "seed",
        "horizon",
        "include_position",
        "shared_init",
    ),
    "eoi": (
        "intrinsic_mode",
        "alpha",
        "beta1",
        "beta2",
        "delta_t",
        "classifier_lr",
    ),
    "learner": (
        "gamma",
        "batch_size",
        "buffer_size",
        "actor_lr",
        "critic_lr",
        "qmix_lr",
        "ivf_lr",
        "hidden",
        "embed",
        "entropy_coef",
        "target_interval",
    ),
    "schedule": ("alpha_schedule", "warmup", "epsilon_start", "epsilon_end"),
}
"""Config-file sections and the :class:`TrainConfig` fields they hold."""

HORIZONS = {"pacmen": 30, "sparse_pacmen": 30, "windy_maze": 15, "firefighters": 20}
EPISODES = {
    "pacmen": 20000,
    "sparse_pacmen": 20000,
    "windy_maze": 15000,
    "firefighters": 20000,
}
SEEDS = {"pacmen": 5, "sparse_pacmen": 5, "windy_maze": 10, "firefighters": 5}
ALPHAS = {"qmix": 0.05, "actor_critic": 0.2}

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def default_config(env_kind="pacmen", learner_kind="qmix", /) -> TrainConfig:
    """Defaults for a task and learner; everything else as in :class:`TrainConfig`."""
    if env_kind not in HORIZONS:
        raise ConfigError(f"env_kind: unknown task {env_kind!r}")
    if learner_kind not in ALPHAS:
        raise ConfigError(f"learner_kind: unknown learner {learner_kind!r}")
    return TrainConfig(
        env_kind=env_kind,
        learner_kind=learner_kind,
        alpha=ALPHAS[learner_kind],
        horizon=HORIZONS[env_kind],
        episodes=EPISODES[env_kind],
    )


def parse_config(text="", /, overrides: Iterable[str] = ()) -> TrainConfig:
    """Parse INI text and ``key=value`` overrides into a validated config.

    Overrides win over the file. Keys name :class:`TrainConfig` fields;
    unknown sections, unknown keys and malformed values raise
    :class:`~eoilab.errors.ConfigError` naming the key.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"config file: {err}") from err

    raw = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"[{section}]: unknown section")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{key}: unknown key in [{section}]")
            raw[key] = value
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{item}: overrides take the form key=value")
        if key not in TrainConfig._fields:
            raise ConfigError(f"{key}: unknown key")
        raw[key] = value.strip()

    defaults = default_config(
        raw.get("env_kind", TrainConfig._field_defaults["env_kind"]),
        raw.get("learner_kind", TrainConfig._field_defaults["learner_kind"]),
    )
    values = {key: _convert(key, value) for key, value in raw.items()}
    return validate_config(defaults._replace(**values))


def _convert(key, value):
    default = TrainConfig._field_defaults[key]
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered not in _TRUE + _FALSE:
                raise ValueError(value)
            return lowered in _TRUE
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: invalid value {value!r}") from None
    return value


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def format_config(cfg: TrainConfig, /) -> str:
    """Serialise a config to INI text that :func:`parse_config` reads back."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format(getattr(cfg, key))}" for key in keys)
        lines.append("")
    return "\n".join(lines)
