"""Run configuration: sectioned key/value files, environment and flag overrides.

File grammar (one statement per line)::

    # comment (whole lines only)
    [section]
    key = value
    section.key = value

A value is parsed as a JSON literal (``3``, ``0.8``, ``true``, ``"text"``,
``[4, 10]``) and otherwise kept as a bare string. Unknown sections and keys
are rejected.

Precedence, lowest first: built-in defaults, the config file (``--config``
or else the file named by ``DIALOGRAPH_CONFIG``), environment variables
``DIALOGRAPH__SECTION__KEY``, command-line flags.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from pathlib import Path

from .corpus import SynthSpec
from .graph import GraphConfig
from .model import ModelConfig
from .ssl import SslConfig
from .trainer import TrainConfig

ENV_FILE = "DIALOGRAPH_CONFIG"
ENV_PREFIX = "DIALOGRAPH__"


class ConfigError(ValueError):
    pass


def _fields(cls, skip=()):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip and f.name[0] != "_"}


def _defaults() -> dict[str, dict]:
    model = _fields(ModelConfig, skip=("d_h", "num_classes"))
    synth = _fields(SynthSpec, skip=("seed",))
    synth["utterance_count_range"] = list(synth["utterance_count_range"])
    synth["unlabeled_fraction"] = 0.5
    synth["noise_std"] = 2.0
    synth["kind"] = "gaussian"
    return {
        "run": {"seed": 0, "threads": 1, "out": "runs/default"},
        "corpus": {"train_path": "", "eval_path": "", "sidecar_path": "", "labeled_fraction": 1.0},
        "synth": synth,
        "model": model,
        "graph": _fields(GraphConfig),
        "train": _fields(TrainConfig, skip=("seed",)),
        "ssl": _fields(SslConfig),
        "backbone": {
            "oracle": "mrdan",
            "endpoint": "",
            "timeout_ms": 10000,
            "token": "",
            "max_in_flight": 4,
            "template": "Classify the caller's purchase intent. Graph: <graph> Audio: <audio>",
        },
    }


DEFAULTS = _defaults()


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        if not isinstance(value, bool):
            raise ConfigError(f"{where} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, list):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    return value


class RunConfig:
    """Nested ``section -> key -> value`` settings with validation."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, entries in (values or {}).items():
            for key, value in entries.items():
                self.set(section, key, value)

    def set(self, section: str, key: str, value) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, value, DEFAULTS[section][key])

    def set_dotted(self, dotted: str, value) -> None:
        if "." not in dotted:
            raise ConfigError(f"expected section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        self.set(section, key, value)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def model_config(self, d_h: int, num_classes: int) -> ModelConfig:
        return ModelConfig(d_h=d_h, num_classes=num_classes, **self.values["model"])

    def graph_config(self) -> GraphConfig:
        return GraphConfig(**self.values["graph"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.values["train"])

    def ssl_config(self) -> SslConfig:
        return SslConfig(**self.values["ssl"])

    def synth_spec(self) -> SynthSpec:
        s = {k: v for k, v in self.values["synth"].items() if k != "kind"}
        s["utterance_count_range"] = tuple(s["utterance_count_range"])
        if isinstance(s["dialogues_per_class"], list):
            s["dialogues_per_class"] = tuple(s["dialogues_per_class"])
        return SynthSpec(seed=self.seed, **s)

    def validate(self) -> None:
        """Construct every section's dataclass so its invariants are checked."""
        try:
            self.graph_config()
            self.train_config()
            self.ssl_config()
            self.synth_spec().validate()
            ModelConfig(d_h=1, num_classes=2, **self.values["model"])
        except (ValueError, TypeError, RuntimeError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> dict:
        return copy.deepcopy(self.values)

    def dumps(self) -> str:
        lines = []
        for section, entries in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {json.dumps(v)}" for k, v in entries.items())
            lines.append("")
        return "\n".join(lines)


def parse_config_text(text: str, cfg: RunConfig, source: str = "<config>") -> RunConfig:
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in cfg.values:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            if "." in key:
                cfg.set_dotted(key, parse_value(value))
            elif section is None:
                raise ConfigError(f"key {key!r} outside any [section]")
            else:
                cfg.set(section, key, parse_value(value))
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    return cfg


def load_config(path: str | Path | None = None, env: dict | None = None, overrides: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    cfg = RunConfig()
    path = path or env.get(ENV_FILE) or None
    if path:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from exc
        parse_config_text(text, cfg, str(p))
    for name, value in sorted(env.items()):
        if name.startswith(ENV_PREFIX):
            parts = name[len(ENV_PREFIX):].lower().split("__")
            if len(parts) != 2:
                raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}SECTION__KEY")
            cfg.set(parts[0], parts[1], parse_value(value))
    for dotted, value in (overrides or {}).items():
        cfg.set_dotted(dotted, value)
    cfg.validate()
    return cfg
