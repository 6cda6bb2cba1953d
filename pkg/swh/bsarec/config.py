# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

"""Run configurations: flat ``key = value`` files.

The accepted keys are the fields of :class:`ModelConfig` (except
``num_items``, which comes from the dataset), the fields of
:class:`TrainConfig` and a few run-level keys. Lines starting with ``#`` are
comments.

>>> config = RunConfig.from_mapping({"alpha": "0.9", "cutoff": "3"})
>>> config.model_config(num_items=10).alpha
0.9
"""

import os
from typing import Any, Dict, List, Optional, Tuple

import attr

from swh.bsarec.error import ConfigError, InvalidArgument
from swh.bsarec.evaluation import Protocol
from swh.bsarec.model import ModelConfig
from swh.bsarec.trainer import TrainConfig

OUTPUT_ROOT_ENVVAR = "SWH_BSAREC_OUTPUT_ROOT"
PRESETS_DIR = os.path.join(os.path.dirname(__file__), "presets")

RUN_FIELDS: Dict[str, Tuple[type, Any]] = {
    "data_path": (str, None),
    "output_dir": (str, "bsarec-run"),
    "protocol": (str, Protocol.FULL.value),
    "mask_history": (bool, True),
    "eval_seed": (int, 0),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def schema() -> Dict[str, Tuple[type, Any]]:
    """Every accepted key with its type and default value, in file order"""
    fields: Dict[str, Tuple[type, Any]] = {}
    for cls in (ModelConfig, TrainConfig):
        for field in attr.fields(cls):
            if field.name != "num_items":
                fields[field.name] = (field.type, field.default)
    fields.update(RUN_FIELDS)
    return fields


def coerce(key: str, kind: type, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    value = raw.strip()
    if kind is bool:
        if value.lower() in _TRUE:
            return True
        if value.lower() in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(value)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(value)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return value or None


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    """Raw ``key -> value`` strings of a config file; all malformed lines are
    reported at once"""
    raw: Dict[str, str] = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            problems.append(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        elif key in raw:
            problems.append(f"{origin}:{lineno}: duplicate key {key!r}")
        else:
            raw[key] = value.strip()
    if problems:
        raise ConfigError(problems)
    return raw


def read_config(path: str) -> Dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), origin=path)


def preset_path(name: str) -> str:
    return os.path.join(PRESETS_DIR, f"{name}.cfg")


def list_presets() -> List[str]:
    return sorted(
        name[: -len(".cfg")]
        for name in os.listdir(PRESETS_DIR)
        if name.endswith(".cfg")
    )


@attr.s(frozen=True, slots=True)
class RunConfig:
    """Validated values of every schema key, defaults resolved"""

    values = attr.ib(type=Dict[str, Any])

    @classmethod
    def from_mapping(
        cls, raw: Dict[str, Any], base: Optional["RunConfig"] = None
    ) -> "RunConfig":
        fields = schema()
        values = (
            dict(base.values)
            if base is not None
            else {key: default for key, (_, default) in fields.items()}
        )
        problems = []
        for key, value in raw.items():
            if key not in fields:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                values[key] = coerce(key, fields[key][0], value)
            except ValueError as e:
                problems.append(str(e))
        # keys that failed to parse keep their previous value
        config = cls(values=values)
        problems.extend(config.problems())
        if problems:
            raise ConfigError(problems)
        return config

    @classmethod
    def load(cls, path: str, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        raw = read_config(path)
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    def problems(self) -> List[str]:
        problems = []
        for build in (lambda: self.model_config(num_items=1), self.train_config):
            try:
                build()
            except InvalidArgument as e:
                problems.extend(str(e).split("; "))
        if self.values["protocol"] not in {p.value for p in Protocol}:
            problems.append(
                f"protocol must be full or sampled-99, got {self.values['protocol']!r}"
            )
        return problems

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def evolve(self, **overrides: Any) -> "RunConfig":
        return RunConfig.from_mapping(overrides, base=self)

    def model_config(self, num_items: int) -> ModelConfig:
        names = [f.name for f in attr.fields(ModelConfig) if f.name != "num_items"]
        return ModelConfig(num_items=num_items, **{n: self.values[n] for n in names})

    def train_config(self) -> TrainConfig:
        names = [f.name for f in attr.fields(TrainConfig)]
        return TrainConfig(**{n: self.values[n] for n in names})

    def output_dir(self) -> str:
        path = self.values["output_dir"]
        root = os.environ.get(OUTPUT_ROOT_ENVVAR)
        if root and not os.path.isabs(path):
            return os.path.join(root, path)
        return path

    def dumps(self) -> str:
        return "".join(
            f"{key} = {format_value(self.values[key])}\n" for key in schema()
        )
