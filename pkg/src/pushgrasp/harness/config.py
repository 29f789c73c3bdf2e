"""Experiment configuration: a sectioned ``key = value`` text format.

    # comment
    [run]
    seed = 1
    n_envs = 16

    [policy]
    topology = twonet

Every key has a type and an optional range check.  Unknown sections or keys
and out-of-range values raise :class:`ConfigError` carrying the line number.
``dumps`` writes every key of every section in schema order, so a parsed
config serializes to the same text however sparse the input was.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..encoder import VaeConfig
from ..ppo import REWARD_MODES, TOPOLOGIES, TRUNKS, PolicyConfig, TrainSettings
from ..tabletop import EnvConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        if line is not None:
            message = f"{source}:{line}: {message}"
        elif source != "<config>":
            message = f"{source}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# value codecs


def _parse_int(text: str) -> int:
    value = float(text) if any(c in text for c in ".eE") else int(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _fmt_float(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    expect: str = ""

    def read(self, text: str) -> Any:
        value = self.parse(text.strip())
        if not self.check(value):
            raise ValueError(f"{text.strip()!r} out of range (expected {self.expect})")
        return value


def int_key(default: int, lo: int | None = None, hi: int | None = None) -> Key:
    def check(v):
        return (lo is None or v >= lo) and (hi is None or v <= hi)
    bounds = f"integer >= {lo}" if hi is None else f"integer in [{lo}, {hi}]"
    return Key(_parse_int, str, default, check, bounds if lo is not None else "integer")


def float_key(default: float, lo: float | None = None, hi: float | None = None,
              open_lo: bool = False) -> Key:
    def check(v):
        if lo is not None and (v <= lo if open_lo else v < lo):
            return False
        return hi is None or v <= hi
    if lo is None:
        expect = "number"
    else:
        expect = f"number {'>' if open_lo else '>='} {lo}" + (f" and <= {hi}" if hi is not None else "")
    return Key(float, _fmt_float, default, check, expect)


def bool_key(default: bool) -> Key:
    return Key(_parse_bool, lambda v: "true" if v else "false", default)


def choice_key(default: str, choices: tuple[str, ...]) -> Key:
    return Key(str, str, default, lambda v: v in choices, " | ".join(choices))


def str_key(default: str = "") -> Key:
    return Key(str, str, default)


def int_list_key(default: tuple[int, ...], lo: int | None = None) -> Key:
    def parse(text):
        return tuple(_parse_int(t) for t in text.split(",") if t.strip())
    return Key(parse, lambda v: ", ".join(str(x) for x in v), tuple(default),
               lambda v: len(v) > 0 and (lo is None or min(v) >= lo), "comma-separated integers")


def float_tuple_key(default: tuple[float, ...]) -> Key:
    def parse(text):
        return tuple(float(t) for t in text.split(","))
    return Key(parse, lambda v: ", ".join(_fmt_float(x) for x in v), tuple(default),
               lambda v: len(v) == len(default), f"{len(default)} comma-separated numbers")


def optional_float_key(default: float | None) -> Key:
    def parse(text):
        return None if text.lower() == "none" else float(text)
    return Key(parse, lambda v: "none" if v is None else _fmt_float(v), default)


def _from_dataclass(cls, overrides: dict[str, Key] | None = None, skip: tuple[str, ...] = ()) -> dict[str, Key]:
    """Keys mirroring a config dataclass, typed from its annotations."""
    hints = typing.get_type_hints(cls)
    keys: dict[str, Key] = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if overrides and f.name in overrides:
            keys[f.name] = overrides[f.name]
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        hint = hints[f.name]
        origin = typing.get_origin(hint)
        if hint is bool:
            keys[f.name] = bool_key(default)
        elif hint is int:
            keys[f.name] = int_key(default)
        elif hint is float:
            keys[f.name] = float_key(default)
        elif hint is str:
            keys[f.name] = str_key(default)
        elif origin is tuple and typing.get_args(hint)[0] is int:
            keys[f.name] = int_list_key(default, lo=1)
        elif origin is tuple:
            keys[f.name] = float_tuple_key(default)
        elif origin in (typing.Union, types.UnionType) and float in typing.get_args(hint):
            keys[f.name] = optional_float_key(default)
        else:  # pragma: no cover - every field above is covered
            raise TypeError(f"no codec for {cls.__name__}.{f.name}: {hint}")
    return keys


_POLICY_DEFAULTS = PolicyConfig()
_TRAIN_DEFAULTS = TrainSettings()

SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": int_key(0, 0),
        "seeds": int_list_key((0, 1, 2), lo=0),
        "n_envs": int_key(_TRAIN_DEFAULTS.n_envs, 1),
        "total_steps": int_key(_TRAIN_DEFAULTS.total_steps, 1),
        "eval_every": int_key(_TRAIN_DEFAULTS.eval_every, 1),
        "eval_episodes": int_key(_TRAIN_DEFAULTS.eval_episodes, 1),
        "workers": int_key(1, 1),
        "mode": choice_key("oracle", ("oracle", "latent")),
        "shape_set": choice_key("training", ("training", "beveled", "irregular")),
        "shape_seed": int_key(0, 0),
        "encoder": str_key(),
        "checkpoint_every": int_key(0, 0),
        "output": str_key("run"),
    },
    "policy": _from_dataclass(PolicyConfig, {
        "topology": choice_key(_POLICY_DEFAULTS.topology, TOPOLOGIES),
        "trunk": choice_key(_POLICY_DEFAULTS.trunk, TRUNKS),
        "reward_mode": choice_key(_POLICY_DEFAULTS.reward_mode, REWARD_MODES),
        "gamma": float_key(_POLICY_DEFAULTS.gamma, 0.0, 1.0, open_lo=True),
        "clip_epsilon": float_key(_POLICY_DEFAULTS.clip_epsilon, 0.0, open_lo=True),
        "gae_lambda": float_key(_POLICY_DEFAULTS.gae_lambda, 0.0, 1.0),
        "rollout_horizon": int_key(_POLICY_DEFAULTS.rollout_horizon, 1),
        "update_epochs": int_key(_POLICY_DEFAULTS.update_epochs, 1),
        "minibatch_size": int_key(_POLICY_DEFAULTS.minibatch_size, 1),
        "learning_rate": float_key(_POLICY_DEFAULTS.learning_rate, 0.0, open_lo=True),
        "max_grad_norm": float_key(_POLICY_DEFAULTS.max_grad_norm, 0.0, open_lo=True),
        "action_dim": int_key(2, 2, 2),
    }),
    "env": _from_dataclass(EnvConfig),
    "vae": {
        **_from_dataclass(VaeConfig, {
            "image_size": int_key(32, 32),
            "channels": int_key(1, 1, 3),
            "latent_dim": int_key(32, 1),
            "learning_rate": float_key(0.005, 0.0, open_lo=True),
            "batch_size": int_key(64, 1),
        }),
        "corpus": str_key(),
        "generate": int_key(0, 0),
        "epochs": int_key(50, 1),
        "held_out_fraction": float_key(0.1, 0.0, 0.5),
    },
    "gentest": {
        "set": choice_key("beveled", ("beveled", "irregular")),
        "episodes": int_key(60, 1),
        "checkpoint": str_key(),
    },
    "compare": {
        "threshold": float_key(0.5, 0.0, 1.0),
        "same_topology": bool_key(False),
    },
}


@dataclass
class ExperimentConfig:
    """Parsed values, one dict per section, every schema key present."""

    sections: dict[str, dict[str, Any]] = field(default_factory=lambda: {
        name: {k: key.default for k, key in keys.items()} for name, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    def set(self, dotted: str, text: str, line: int | None = None, source: str = "<override>") -> None:
        section, _, name = dotted.partition(".")
        if not name:
            raise ConfigError(f"override {dotted!r} must look like section.key", line, source)
        _assign(self, section, name, text, line, source)

    def replace(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with ``section__key=value`` entries (already typed) swapped in."""
        out = ExperimentConfig({s: dict(v) for s, v in self.sections.items()})
        for k, v in dotted.items():
            section, _, name = k.partition("__")
            if name not in SCHEMA.get(section, {}):
                raise ConfigError(f"unknown key {section}.{name}")
            out.sections[section][name] = v
        return out

    # -- typed views ---------------------------------------------------------

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(**self.sections["policy"])

    def env_config(self) -> EnvConfig:
        return EnvConfig(**self.sections["env"])

    def vae_config(self) -> VaeConfig:
        known = {f.name for f in dataclasses.fields(VaeConfig)}
        return VaeConfig(**{k: v for k, v in self.sections["vae"].items() if k in known})

    def train_settings(self, seed: int | None = None, cell: str = "coreward-coac") -> TrainSettings:
        run = self.sections["run"]
        return TrainSettings(total_steps=run["total_steps"], n_envs=run["n_envs"],
                             eval_every=run["eval_every"], eval_episodes=run["eval_episodes"],
                             seed=run["seed"] if seed is None else seed, workers=run["workers"], cell=cell)

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in vals.items()}
                for s, vals in self.sections.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for section, values in d.items():
            for name, value in values.items():
                if name not in SCHEMA.get(section, {}):
                    raise ConfigError(f"unknown key {section}.{name}")
                cfg.sections[section][name] = tuple(value) if isinstance(value, list) else value
        return cfg


def _assign(cfg: ExperimentConfig, section: str, name: str, text: str, line, source) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]", line, source)
    key = SCHEMA[section].get(name)
    if key is None:
        raise ConfigError(f"unknown key {name!r} in [{section}]", line, source)
    try:
        cfg.sections[section][name] = key.read(text)
    except ValueError as exc:
        raise ConfigError(f"{section}.{name}: {exc}", line, source) from None


def _validate(cfg: ExperimentConfig, lines: dict[str, int], source: str) -> None:
    """Cross-field checks that the dataclasses enforce themselves."""
    for section, build in (("policy", cfg.policy_config), ("env", cfg.env_config), ("vae", cfg.vae_config)):
        try:
            build()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}", lines.get(section), source) from None


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    section: str | None = None
    first_line: dict[str, int] = {}
    seen: set[tuple[str, str]] = set()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", n, source)
            first_line.setdefault(section, n)
            continue
        name, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", n, source)
        if section is None:
            raise ConfigError("key outside of any [section]", n, source)
        name = name.strip()
        if (section, name) in seen:
            raise ConfigError(f"duplicate key {name!r} in [{section}]", n, source)
        seen.add((section, name))
        _assign(cfg, section, name, value, n, source)
    _validate(cfg, first_line, source)
    return cfg


def dumps(cfg: ExperimentConfig) -> str:
    out: list[str] = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for name, key in keys.items():
            out.append(f"{name} = {key.fmt(cfg.sections[section][name])}")
        out.append("")
    return "\n".join(out)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text(), source=str(path))


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
