"""Experiment configuration: declarative TOML files, validated up front.

One file per experiment.  Top-level keys give the experiment tag and the
explicit seed list (there are no wall-clock defaults anywhere); nested
sections describe the landscape, the metric, one or more optimizer variants,
horizons, and sweep grids.  Every referenced kind must resolve against the
registries below, and violations raise :class:`ConfigError` before any
computation starts.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..optimizers import RULES

EXPERIMENT_TAGS = (
    "escape-toy",
    "noise-toy",
    "envelope-sweep",
    "amplification-sweep",
    "whitening-check",
    "damping-check",
    "selection-sweep",
    "llqr-mlp-check",
    "transfer-diagnostic",
)

LANDSCAPE_KINDS = ("sharp_well", "two_scale_diagonal", "two_scale_rotated",
                   "two_wells", "none")
METRIC_KINDS = ("identity", "scaled_identity", "diagonal", "from_average",
                "none")


class ConfigError(Exception):
    """A configuration file failed validation."""


def _frozen_mapping(d: Mapping[str, Any]) -> Mapping[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = _frozen_mapping(v)
        elif isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return MappingProxyType(out)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: tag, seeds, specs, horizons, grids, output directory."""

    tag: str
    seeds: tuple[int, ...]
    out_dir: str
    landscape: Mapping[str, Any] = field(default_factory=dict)
    metric: Mapping[str, Any] = field(default_factory=dict)
    variants: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    horizons: Mapping[str, int] = field(default_factory=dict)
    grids: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in EXPERIMENT_TAGS:
            raise ConfigError(
                f"unknown experiment tag {self.tag!r}; "
                f"expected one of {', '.join(EXPERIMENT_TAGS)}"
            )
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list of integers")
        for s in self.seeds:
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                raise ConfigError(f"seeds must be nonnegative integers, got {s!r}")
        if not self.out_dir:
            raise ConfigError("out_dir must be a non-empty path")
        if not self.variants:
            raise ConfigError("at least one optimizer variant is required")
        for name, spec in self.variants.items():
            if "rule" not in spec:
                raise ConfigError(f"variant {name!r} is missing its step rule")
            if spec["rule"] not in RULES:
                raise ConfigError(
                    f"variant {name!r} references unknown rule "
                    f"{spec['rule']!r}; expected one of {', '.join(RULES)}"
                )
        kind = self.landscape.get("kind", "none")
        if kind not in LANDSCAPE_KINDS:
            raise ConfigError(
                f"unknown landscape kind {kind!r}; "
                f"expected one of {', '.join(LANDSCAPE_KINDS)}"
            )
        mkind = self.metric.get("kind", "none")
        if mkind not in METRIC_KINDS:
            raise ConfigError(
                f"unknown metric kind {mkind!r}; "
                f"expected one of {', '.join(METRIC_KINDS)}"
            )
        for key, value in self.horizons.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(
                    f"horizon {key!r} must be a positive integer, got {value!r}"
                )
        object.__setattr__(self, "landscape", _frozen_mapping(self.landscape))
        object.__setattr__(self, "metric", _frozen_mapping(self.metric))
        object.__setattr__(
            self, "variants",
            MappingProxyType({k: _frozen_mapping(v)
                              for k, v in self.variants.items()}))
        object.__setattr__(self, "horizons", _frozen_mapping(self.horizons))
        object.__setattr__(self, "grids", _frozen_mapping(self.grids))

    def with_overrides(self, out_dir: str | None = None,
                       seed: int | None = None) -> "ExperimentConfig":
        """CLI overrides: output directory and a single replacement seed."""
        return ExperimentConfig(
            tag=self.tag,
            seeds=(seed,) if seed is not None else self.seeds,
            out_dir=out_dir if out_dir is not None else self.out_dir,
            landscape=dict(self.landscape),
            metric=dict(self.metric),
            variants={k: dict(v) for k, v in self.variants.items()},
            horizons=dict(self.horizons),
            grids=dict(self.grids),
        )


def config_from_mapping(raw: Mapping[str, Any],
                        default_out: str = "") -> ExperimentConfig:
    """Build and validate a config from a parsed mapping."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a table of keys")
    known = {"tag", "seeds", "out_dir", "landscape", "metric", "variants",
             "horizons", "grids"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "tag" not in raw:
        raise ConfigError("config is missing the experiment tag")
    if "seeds" not in raw:
        raise ConfigError("config is missing the explicit seed list")
    seeds = raw["seeds"]
    if not isinstance(seeds, (list, tuple)):
        raise ConfigError("seeds must be a list of integers")
    return ExperimentConfig(
        tag=raw["tag"],
        seeds=tuple(seeds),
        out_dir=raw.get("out_dir", default_out or f"runs/{raw['tag']}"),
        landscape=dict(raw.get("landscape", {})),
        metric=dict(raw.get("metric", {})),
        variants={k: dict(v) for k, v in raw.get("variants", {}).items()},
        horizons=dict(raw.get("horizons", {})),
        grids=dict(raw.get("grids", {})),
    )


def load_config(path: str | Path) -> tuple[ExperimentConfig, bytes]:
    """Parse one TOML file; returns the config and the raw bytes (hashed
    into the run manifest)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = path.read_bytes()
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    cfg = config_from_mapping(raw)
    return cfg, data
