"""Experiment configuration: an INI file with flat sections and strict keys."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .priors import EpsilonSequence, PriorError

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENTS",
    "load_config",
    "parse_config",
    "dump_config",
    "with_overrides",
]

EXPERIMENTS = ("SUPPORT", "LEMMA1", "PROP1", "LEMMA2", "PROP2", "PROP3", "UNION", "MARTINGALE", "IDENTITIES")
TRUTH_PRESETS = ("uniform", "ramp", "odd")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.upper() for t in text.replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return ""
    return str(value)


# (section, key) -> (field name, parser); order here is the dump order
_SCHEMA = {
    ("grid", "lo"): ("lo", float),
    ("grid", "hi"): ("hi", float),
    ("grid", "bins"): ("bins", int),
    ("truth", "mass"): ("truth_mass", _floats),
    ("truth", "preset"): ("truth_preset", str),
    ("prior", "levels"): ("levels", _ints),
    ("prior", "level_decay"): ("level_decay", float),
    ("prior", "max_candidates_per_level"): ("max_candidates_per_level", int),
    ("prior", "file"): ("prior_file", str),
    ("epsilon", "amp"): ("eps_amp", float),
    ("epsilon", "gamma"): ("eps_gamma", float),
    ("epsilon", "logpow"): ("eps_logpow", float),
    ("constants", "C"): ("C", float),
    ("constants", "D"): ("D", float),
    ("constants", "beta"): ("beta", float),
    ("constants", "M"): ("M", float),
    ("constants", "kappas"): ("kappas", _floats),
    ("constants", "lemma2_offset"): ("lemma2_offset", float),
    ("masks", "far_candidate"): ("far_candidate", int),
    ("masks", "martingale_h_min"): ("martingale_h_min", float),
    ("masks", "union_count"): ("union_count", int),
    ("masks", "union_radius"): ("union_radius", float),
    ("masks", "union_center_h"): ("union_center_h", float),
    ("run", "n_grid"): ("n_grid", _ints),
    ("run", "replications"): ("replications", int),
    ("run", "master_seed"): ("master_seed", int),
    ("run", "experiments"): ("experiments", _names),
    ("run", "trace_full_predictives"): ("trace_full_predictives", _bool),
    ("run", "slack"): ("slack", float),
    ("run", "martingale_n"): ("martingale_n", int),
    ("run", "identity_replications"): ("identity_replications", int),
    ("run", "identity_n"): ("identity_n", int),
    ("run", "enumeration_n"): ("enumeration_n", int),
    ("run", "eb_configurations"): ("eb_configurations", int),
}
_REQUIRED = {("grid", "lo"), ("grid", "hi"), ("grid", "bins"), ("run", "n_grid")}


@dataclass(frozen=True)
class ExperimentConfig:
    lo: float
    hi: float
    bins: int
    n_grid: tuple[int, ...]
    truth_mass: tuple[float, ...] | None = None
    truth_preset: str | None = None
    levels: tuple[int, ...] | None = None
    level_decay: float = 0.5
    max_candidates_per_level: int = 5000
    prior_file: str | None = None
    eps_amp: float = 1.0
    eps_gamma: float = 0.5
    eps_logpow: float = 1.0
    C: float = 1.0
    D: float = 1.5
    beta: float = 0.4
    M: float | None = None
    kappas: tuple[float, ...] = (0.25, 0.5, 0.75)
    lemma2_offset: float = 0.5
    far_candidate: int | None = None
    martingale_h_min: float = 0.05
    union_count: int = 3
    union_radius: float = 0.3
    union_center_h: float = 0.1
    replications: int = 500
    master_seed: int = 20240917
    experiments: tuple[str, ...] = EXPERIMENTS
    trace_full_predictives: bool = True
    slack: float = 0.05
    martingale_n: int | None = None
    identity_replications: int = 100
    identity_n: int = 500
    enumeration_n: int = 6
    eb_configurations: int = 100
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        try:
            self.validate()
        except (PriorError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def eps_seq(self) -> EpsilonSequence:
        return EpsilonSequence(self.eps_amp, self.eps_gamma, self.eps_logpow)

    @property
    def prop3_M(self) -> float:
        """``M`` for the pseudo-posterior sets; defaults to ``M^2 = (C + 1)/2 + 1``."""
        return self.M if self.M is not None else math.sqrt((self.C + 1) / 2 + 1)

    @property
    def mc_kappas(self) -> tuple[float, ...]:
        """Fractional powers to run; 1/2 is always included for the denominator bound."""
        return tuple(sorted(set(self.kappas) | {0.5}))

    @property
    def n_max(self) -> int:
        return self.n_grid[-1]

    @property
    def mart_n(self) -> int:
        return min(self.martingale_n or 200, self.n_max)

    def validate(self):
        if not self.lo < self.hi:
            raise ConfigError("grid.lo must be < grid.hi")
        if self.bins < 1:
            raise ConfigError("grid.bins must be >= 1")
        if self.truth_mass is None and self.truth_preset is None:
            raise ConfigError("truth needs either 'mass' or 'preset'")
        if self.truth_mass is not None and self.truth_preset is not None:
            raise ConfigError("truth takes 'mass' or 'preset', not both")
        if self.truth_preset is not None and self.truth_preset not in TRUTH_PRESETS:
            raise ConfigError(f"truth.preset must be one of {TRUTH_PRESETS}")
        if self.truth_mass is not None and len(self.truth_mass) != self.bins:
            raise ConfigError(f"truth.mass needs {self.bins} entries")
        if self.levels is None and self.prior_file is None:
            raise ConfigError("prior needs 'levels' or 'file'")
        if not self.n_grid or any(n < 1 for n in self.n_grid):
            raise ConfigError("run.n_grid must list positive integers")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("run.n_grid must be strictly increasing")
        if self.replications < 1:
            raise ConfigError("run.replications must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("run.master_seed must be a 64-bit unsigned integer")
        bad = [e for e in self.experiments if e not in EXPERIMENTS]
        if bad:
            raise ConfigError(f"unknown experiments {bad}; choose from {EXPERIMENTS}")
        if not all(0 < k <= 1 for k in self.kappas):
            raise ConfigError("constants.kappas must lie in (0, 1]")
        if self.C <= 0:
            raise ConfigError("constants.C must be positive")
        if not 0 < self.beta < 0.5:
            raise ConfigError("constants.beta must lie in (0, 1/2)")
        if not 0 < self.slack < 1:
            raise ConfigError("run.slack must lie in (0, 1)")
        if self.M is not None and not self.M * self.M > (self.C + 1) / 2:
            raise ConfigError("constants.M must satisfy M^2 > (C + 1)/2")
        if not self.D > 0:
            raise ConfigError("constants.D must be positive")
        if self.union_count < 2:
            raise ConfigError("masks.union_count must be >= 2")
        # raises with the n * eps_n^2 -> infinity message
        self.eps_seq


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    known = {s for s, _ in _SCHEMA}
    values = {}
    seen = set()
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            spec = _SCHEMA.get((section, key))
            if spec is None:
                raise ConfigError(f"unknown key {section}.{key}")
            seen.add((section, key))
            name, conv = spec
            if raw.strip() == "":
                # an empty experiment list is meaningful; other blanks mean "default"
                if name == "experiments":
                    values[name] = ()
                continue
            try:
                values[name] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    missing = sorted(f"{s}.{k}" for s, k in _REQUIRED - seen)
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    try:
        return ExperimentConfig(**values, source=source)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text, source=str(path))
    if cfg.prior_file is not None and not Path(cfg.prior_file).is_absolute():
        cfg = replace(cfg, prior_file=str((path.parent / cfg.prior_file).resolve()))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config as INI text; ``parse_config(dump_config(c)) == c``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for (section, key), (name, _) in _SCHEMA.items():
        value = getattr(cfg, name)
        if value is None:
            continue
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, _fmt(value))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    try:
        return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
    except (PriorError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
