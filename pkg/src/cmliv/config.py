"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored; list values are
comma-separated. Every error carries the offending line number.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

from cmliv.dgp import DgpConfig, preset
from cmliv.errors import ConfigParseError, InvalidConfigurationError
from cmliv.estimators import VarianceOptions
from cmliv.harness import ExperimentConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str, path: Optional[str] = None) -> dict[str, tuple[str, int]]:
    """Map each key to ``(raw value, line number)``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected key = value, got {line!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigParseError("empty key", lineno, path)
        if key in out:
            raise ConfigParseError(f"duplicate key {key!r} (first on line {out[key][1]})",
                                   lineno, path)
        out[key] = (value, lineno)
    return out


def read_kv(path: str) -> dict[str, tuple[str, int]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigParseError(f"cannot read config: {err.strerror}", None, path) from None
    return parse_kv(text, path)


def _list(v: str) -> list[str]:
    return [s.strip() for s in v.split(",") if s.strip()]


def _bool(v: str) -> bool:
    s = v.lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _convert(kv, key, conv, path):
    value, line = kv[key]
    try:
        return conv(value)
    except (ValueError, InvalidConfigurationError) as err:
        raise ConfigParseError(f"bad value for {key!r}: {err}", line, path) from None


_EXPERIMENT_KEYS = {
    "dgps": _list,
    "sample_sizes": lambda v: [int(s) for s in _list(v)],
    "reps": int,
    "folds": int,
    "learners": _list,
    "estimators": _list,
    "master_seed": int,
    "targets": _list,
    "trim": _bool,
    "estimand_source": str,
    "workers": int,
    "variance": str,
}
_ALIASES = {"dgp": "dgps", "n": "sample_sizes", "seed": "master_seed", "learner": "learners",
            "L": "folds"}


def experiment_from_kv(kv: dict, path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig`; ``overrides`` (non-None) win over the file."""
    fields = {}
    for key in kv:
        canon = _ALIASES.get(key, key)
        if canon not in _EXPERIMENT_KEYS:
            raise ConfigParseError(f"unknown key {key!r}", kv[key][1], path)
        fields[canon] = _convert(kv, key, _EXPERIMENT_KEYS[canon], path)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if "variance" in fields:
        fields["variance"] = VarianceOptions(mode=fields["variance"])
    return ExperimentConfig(**fields)


_DGP_FIELDS = {f.name: f.type for f in dataclasses.fields(DgpConfig)}


def dgp_from_kv(kv: dict, path: Optional[str] = None) -> DgpConfig:
    """A DGP from an optional ``preset`` base plus field overrides."""
    base = preset(kv["preset"][0]) if "preset" in kv else DgpConfig()
    changes = {}
    for key in kv:
        if key == "preset":
            continue
        if key not in _DGP_FIELDS:
            raise ConfigParseError(f"unknown DGP parameter {key!r}", kv[key][1], path)
        conv = str if key in ("x1_mode", "name") else float
        changes[key] = _convert(kv, key, conv, path)
    if changes and "name" not in changes:
        changes["name"] = "custom"
    try:
        return dataclasses.replace(base, **changes)
    except InvalidConfigurationError as err:
        raise ConfigParseError(str(err), None, path) from None
