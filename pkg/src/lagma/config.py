"""Experiment configuration: plain-text files in, validated dataclasses out.

Config files are INI-style (`key = value` lines under `[section]` headers).
Every key has a documented default, unknown sections or keys are rejected,
and the handful of hyperparameters with published working ranges (codebook
size, both VQ cadences, the trajectory-heap size, and the coverage scale)
are rejected outside those ranges with the range quoted in the message.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any

from .envs import EnvSpec
from .intrinsic import IntrinsicConfig
from .marl import LearnerConfig
from .vq import VqConfig

VARIANTS = ("lagma", "qmix_baseline", "no_cl", "cl_all", "cq0", "cqt_no_upd")

# Recommended working ranges; values outside are rejected at config level
# (module-level dataclasses stay permissive for unit-scale experiments).
BOUNDS: dict[tuple[str, str], tuple[float, float, str]] = {
    ("vq", "n_codes"): (64, 512, "64-512"),
    ("vq", "n_freq_vq"): (10, 40, "10-40"),
    ("vq", "n_freq_cd"): (10, 40, "10-40"),
    ("vq", "lambda_cvr"): (0.25, 1.0, "0.25-1.0"),
    ("codebook", "k"): (10, 30, "10-30"),
}

# Accepted spellings from the published tables, mapped to canonical keys.
ALIASES: dict[tuple[str, str], str] = {
    ("vq", "n_c"): "n_codes",
}


class ConfigError(ValueError):
    """A config file or field failed validation."""


@dataclass(frozen=True)
class VariantWiring:
    """What a variant tag actually switches on and off."""

    use_vq: bool
    use_intrinsic: bool
    coverage_mode: str
    intrinsic_mode: str


def variant_wiring(variant: str) -> VariantWiring:
    """Map a variant tag to its latent-model and intrinsic-reward wiring.

    The baseline drops the latent model entirely (so the intrinsic bonus is
    identically zero); the ablations keep the full pipeline and flip exactly
    one switch each: coverage mode for no_cl / cl_all, bonus bookkeeping for
    cq0 / cqt_no_upd.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    coverage = {"no_cl": "none", "cl_all": "cvr_all"}.get(variant, "cvr")
    intrinsic = variant if variant in ("cq0", "cqt_no_upd") else "cqt"
    if variant == "qmix_baseline":
        return VariantWiring(False, False, coverage, intrinsic)
    return VariantWiring(True, True, coverage, intrinsic)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run needs, grouped the way the file is."""

    env: EnvSpec = field(default_factory=EnvSpec)
    vq: VqConfig = field(default_factory=VqConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    n_freq_vq: int = 10
    n_freq_cd: int = 10
    k: int = 10
    m: int = 100
    total_env_steps: int = 200_000
    eval_interval: int = 10_000
    eval_episodes: int = 32
    seed: int = 0
    variant: str = "lagma"

    def __post_init__(self):
        wiring = variant_wiring(self.variant)
        for (section, key), (lo, hi, text) in BOUNDS.items():
            value = getattr(self.vq, key, None)
            if value is None:
                value = getattr(self, key)
            if not lo <= value <= hi:
                raise ConfigError(
                    f"[{section}] {key} = {value} is outside the documented "
                    f"bound {text}"
                )
        if self.m < 1:
            raise ConfigError("[codebook] m must be at least 1")
        if min(self.total_env_steps, self.eval_interval, self.eval_episodes) < 1:
            raise ConfigError("[run] counts and intervals must be at least 1")
        if self.seed < 0:
            raise ConfigError("[run] seed must be non-negative")
        if self.learner.batch_size > self.learner.replay_capacity:
            raise ConfigError("[learner] batch_size cannot exceed replay_capacity")
        if abs(self.intrinsic.gamma - self.learner.gamma) > 0.0:
            raise ConfigError("[intrinsic] discount must match [learner] gamma")
        if self.intrinsic.mode != wiring.intrinsic_mode:
            raise ConfigError(
                f"intrinsic mode {self.intrinsic.mode!r} contradicts variant "
                f"{self.variant!r} (expects {wiring.intrinsic_mode!r})"
            )

    @property
    def wiring(self) -> VariantWiring:
        return variant_wiring(self.variant)


# ---------------------------------------------------------------------------
# schema: section -> key -> (value kind, default)

def _cells(text: str) -> tuple[tuple[int, int], ...]:
    text = text.strip()
    if not text:
        return ()
    cells = []
    for part in text.split(";"):
        pieces = part.split(",")
        if len(pieces) != 2:
            raise ValueError(f"cell {part!r} is not 'row,col'")
        cells.append((int(pieces[0]), int(pieces[1])))
    return tuple(cells)


_ENV_DEFAULT = EnvSpec()
_VQ_DEFAULT = VqConfig()
_INTR_DEFAULT = IntrinsicConfig()
_LEARN_DEFAULT = LearnerConfig()
_RUN_DEFAULT = ExperimentConfig()

SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "env": {
        "layout": ("str", _ENV_DEFAULT.layout),
        "width": ("int", _ENV_DEFAULT.width),
        "height": ("int", _ENV_DEFAULT.height),
        "n_agents": ("int", _ENV_DEFAULT.n_agents),
        "n_targets": ("int", _ENV_DEFAULT.n_targets),
        "obs_radius": ("int", _ENV_DEFAULT.obs_radius),
        "episode_limit": ("int", _ENV_DEFAULT.episode_limit),
        "capture_reward": ("float", _ENV_DEFAULT.capture_reward),
        "win_reward": ("float", _ENV_DEFAULT.win_reward),
        "penalty": ("float", _ENV_DEFAULT.penalty),
        "capture_agents_required": ("int", _ENV_DEFAULT.capture_agents_required),
        "auto_capture": ("bool", _ENV_DEFAULT.auto_capture),
        "allow_overlap": ("bool", _ENV_DEFAULT.allow_overlap),
        "hazard_cells": ("cells", _ENV_DEFAULT.hazard_cells),
    },
    "vq": {
        "n_codes": ("int", _VQ_DEFAULT.n_codes),
        "latent_dim": ("int", _VQ_DEFAULT.latent_dim),
        "lambda_vq": ("float", _VQ_DEFAULT.lambda_vq),
        "lambda_commit": ("float", _VQ_DEFAULT.lambda_commit),
        # Experiment files default to a heavier coverage pull than the
        # standalone VqConfig; the built-in tasks train better with it.
        "lambda_cvr": ("float", 1.0),
        "hidden": ("int", _VQ_DEFAULT.hidden),
        "n_freq_vq": ("int", _RUN_DEFAULT.n_freq_vq),
        "n_freq_cd": ("int", _RUN_DEFAULT.n_freq_cd),
    },
    "codebook": {
        "k": ("int", _RUN_DEFAULT.k),
        "m": ("int", _RUN_DEFAULT.m),
    },
    "intrinsic": {
        "n_freq": ("int", _INTR_DEFAULT.n_freq),
    },
    "learner": {
        "gamma": ("float", _LEARN_DEFAULT.gamma),
        "lr": ("float", _LEARN_DEFAULT.lr),
        "batch_size": ("int", _LEARN_DEFAULT.batch_size),
        "replay_capacity": ("int", _LEARN_DEFAULT.replay_capacity),
        "target_sync_interval": ("int", _LEARN_DEFAULT.target_sync_interval),
        "epsilon_start": ("float", _LEARN_DEFAULT.epsilon_start),
        "epsilon_end": ("float", _LEARN_DEFAULT.epsilon_end),
        "epsilon_anneal_steps": ("int", _LEARN_DEFAULT.epsilon_anneal_steps),
        "grad_clip": ("float", _LEARN_DEFAULT.grad_clip),
        "agent_hidden": ("int", _LEARN_DEFAULT.agent_hidden),
        "mixing_width": ("int", _LEARN_DEFAULT.mixing_width),
        "hyper_hidden": ("int", _LEARN_DEFAULT.hyper_hidden),
        "double_q": ("bool", _LEARN_DEFAULT.double_q),
    },
    "run": {
        "total_env_steps": ("int", _RUN_DEFAULT.total_env_steps),
        "eval_interval": ("int", _RUN_DEFAULT.eval_interval),
        "eval_episodes": ("int", _RUN_DEFAULT.eval_episodes),
        "seed": ("int", _RUN_DEFAULT.seed),
        "variant": ("str", _RUN_DEFAULT.variant),
    },
}

_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _parse_value(kind: str, raw: str, where: str) -> Any:
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"{raw!r} is not a boolean")
            return _BOOL_WORDS[word]
        if kind == "cells":
            return _cells(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_config(values: dict[str, dict[str, Any]]) -> ExperimentConfig:
    """Assemble an ExperimentConfig from typed per-section overrides.

    Missing keys take their documented defaults; unknown sections or keys
    are rejected. The intrinsic mode is derived from the variant tag rather
    than read from the file, so a saved config always round-trips.
    """
    merged: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        merged[section] = {key: default for key, (_, default) in keys.items()}
    for section, entries in values.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in entries.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            merged[section][key] = value

    env_kw = dict(merged["env"])
    env_kw["hazard_cells"] = tuple(
        (int(r), int(c)) for r, c in env_kw["hazard_cells"]
    )
    vq_kw = dict(merged["vq"])
    n_freq_vq = vq_kw.pop("n_freq_vq")
    n_freq_cd = vq_kw.pop("n_freq_cd")
    run_kw = dict(merged["run"])
    variant = run_kw.pop("variant")
    wiring = variant_wiring(variant)
    try:
        return ExperimentConfig(
            env=EnvSpec(**env_kw),
            vq=VqConfig(**vq_kw),
            intrinsic=IntrinsicConfig(
                n_freq=merged["intrinsic"]["n_freq"],
                gamma=merged["learner"]["gamma"],
                mode=wiring.intrinsic_mode,
            ),
            learner=LearnerConfig(**merged["learner"]),
            n_freq_vq=n_freq_vq,
            n_freq_cd=n_freq_cd,
            k=merged["codebook"]["k"],
            m=merged["codebook"]["m"],
            variant=variant,
            **run_kw,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def loads_config(text: str) -> ExperimentConfig:
    """Parse config text; see load_config."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            key = ALIASES.get((section, key), key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kind = SCHEMA[section][key][0]
            values[section][key] = _parse_value(kind, raw, f"[{section}] {key}")
    return build_config(values)


def load_config(path) -> ExperimentConfig:
    """Read a config file into a fully-populated, validated ExperimentConfig.

    An empty file yields all defaults. Unknown sections or keys, malformed
    values, and values outside the documented working ranges are rejected
    with a ConfigError naming the offender.
    """
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read())


def config_to_mapping(cfg: ExperimentConfig) -> dict[str, dict[str, Any]]:
    """Flatten a config into {section: {key: plain value}} (JSON-safe)."""
    out: dict[str, dict[str, Any]] = {section: {} for section in SCHEMA}
    for section, keys in SCHEMA.items():
        for key in keys:
            out[section][key] = _field_value(cfg, section, key)
    out["env"]["hazard_cells"] = [list(c) for c in cfg.env.hazard_cells]
    return out


def mapping_to_config(mapping: dict[str, dict[str, Any]]) -> ExperimentConfig:
    """Inverse of config_to_mapping (hazard cells arrive as nested lists)."""
    values = {section: dict(entries) for section, entries in mapping.items()}
    if "env" in values and "hazard_cells" in values["env"]:
        values["env"]["hazard_cells"] = tuple(
            (int(r), int(c)) for r, c in values["env"]["hazard_cells"]
        )
    return build_config(values)


def _field_value(cfg: ExperimentConfig, section: str, key: str) -> Any:
    if section == "env":
        return getattr(cfg.env, key)
    if section == "vq":
        return getattr(cfg.vq if hasattr(cfg.vq, key) else cfg, key)
    if section == "codebook":
        return getattr(cfg, key)
    if section == "intrinsic":
        return getattr(cfg.intrinsic, key)
    if section == "learner":
        return getattr(cfg.learner, key)
    return getattr(cfg, key)


def _format_value(kind: str, value: Any) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "cells":
        return ";".join(f"{r},{c}" for r, c in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def dumps_config(cfg: ExperimentConfig) -> str:
    """Render every key explicitly, in schema order; loads_config inverts it."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (kind, _) in keys.items():
            lines.append(f"{key} = {_format_value(kind, _field_value(cfg, section, key))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))
