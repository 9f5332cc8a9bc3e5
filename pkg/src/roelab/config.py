"""Run configuration: one YAML or JSON file with typed keys.

Example::

    family: sl2
    moduli: [3, 5, 7, 11]
    measure: {laziness: 0.5}
    p_values: [2, 3]
    n_range: [1, 24]
    R_list: [0, 1, 2]
    ball_radius: 26
    cheeger_tau: 0.1
    seed: 0
    out: runs/sl2
    lift:
      covers: [[15, 5], [21, 7]]
      trials: 100

Environment variables ROELAB_OUT and ROELAB_THREADS override the output
directory and the thread count; nothing else is read from the environment.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ValidationError
from .expander import ProbabilityMeasure
from .groups import GroupFamily, QuotientChain, get_family


@dataclass(frozen=True)
class MeasureSpec:
    laziness: float = 0.5
    weights: tuple[float, ...] | None = None  # aligned with the family generators

    def build(self, family: GroupFamily) -> ProbabilityMeasure:
        if self.weights is None:
            return ProbabilityMeasure.lazy(family.generators, self.laziness)
        return ProbabilityMeasure(family.generators, tuple(self.weights), self.laziness)


@dataclass(frozen=True)
class LiftSpec:
    covers: tuple[tuple[int, int], ...] | None = None  # (source modulus, target modulus)
    S: int | None = None  # default: largest S the cover radius allows
    trials: int = 100
    block_dim: int = 1


@dataclass(frozen=True)
class ObstructionSpec:
    n: int | None = None  # default: the top of n_range
    p: float | None = None  # default: the first of p_values
    internal_rank: int = 1
    c: float = 0.5
    decay_target: float = 0.5


@dataclass(frozen=True)
class Tolerances:
    algebra: float = 1e-12
    intertwining: float = 1e-10


@dataclass(frozen=True)
class RunConfig:
    family: str
    moduli: tuple[int, ...]
    cyclic_steps: tuple[int, ...] = (1,)
    measure: MeasureSpec = field(default_factory=MeasureSpec)
    p_values: tuple[float, ...] = (2.0,)
    n_range: tuple[int, int] = (1, 24)
    R_list: tuple[float, ...] = (0, 1, 2)
    ball_radius: int = 26
    cheeger_tau: float = 0.1
    tolerances: Tolerances = field(default_factory=Tolerances)
    seed: int = 0
    out: str = "roelab-out"
    lift: LiftSpec = field(default_factory=LiftSpec)
    obstruction: ObstructionSpec = field(default_factory=ObstructionSpec)

    # -- derived objects ------------------------------------------------
    def group_family(self) -> GroupFamily:
        if self.family == "cyclic":
            return get_family("cyclic", steps=self.cyclic_steps)
        return get_family(self.family)

    def chain(self) -> QuotientChain:
        return QuotientChain(self.group_family(), self.moduli)

    def mu(self) -> ProbabilityMeasure:
        return self.measure.build(self.group_family())

    @property
    def n_values(self) -> list[int]:
        return list(range(self.n_range[0], self.n_range[1] + 1))

    def cover_pairs(self) -> list[tuple[int, int]]:
        if self.lift.covers is not None:
            return [tuple(c) for c in self.lift.covers]
        if not self.chain().is_divisibility_chain:
            raise ValidationError(
                f"moduli {list(self.moduli)} do not form a divisibility chain; "
                "give lift.covers explicitly"
            )
        return [(b, a) for a, b in zip(self.moduli, self.moduli[1:])]


_SECTIONS = {"measure": MeasureSpec, "lift": LiftSpec, "obstruction": ObstructionSpec, "tolerances": Tolerances}


def _known_keys(cls) -> set[str]:
    return set(cls.__dataclass_fields__)


def _check_keys(raw: dict, cls, where: str) -> None:
    unknown = set(raw) - _known_keys(cls)
    if unknown:
        raise ValidationError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def _int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValidationError(f"{name} must be an integer, got {v!r}")
    return v


def _num(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{name} must be a number, got {v!r}")
    return float(v)


def config_from_dict(raw: Any) -> RunConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping")
    _check_keys(raw, RunConfig, "config")
    for key in ("family", "moduli"):
        if key not in raw:
            raise ValidationError(f"config is missing required key {key!r}")
    kw: dict[str, Any] = {}
    kw["family"] = str(raw["family"])
    if not isinstance(raw["moduli"], list) or not raw["moduli"]:
        raise ValidationError("moduli must be a non-empty list")
    kw["moduli"] = tuple(_int(m, "modulus") for m in raw["moduli"])
    if "cyclic_steps" in raw:
        kw["cyclic_steps"] = tuple(_int(s, "cyclic step") for s in raw["cyclic_steps"])
    if "p_values" in raw:
        kw["p_values"] = tuple(_num(p, "p") for p in raw["p_values"])
    if "n_range" in raw:
        nr = raw["n_range"]
        if not isinstance(nr, list) or len(nr) != 2:
            raise ValidationError("n_range must be [first, last]")
        kw["n_range"] = (_int(nr[0], "n_range"), _int(nr[1], "n_range"))
    if "R_list" in raw:
        kw["R_list"] = tuple(_num(r, "R") for r in raw["R_list"])
    for key in ("ball_radius", "seed"):
        if key in raw:
            kw[key] = _int(raw[key], key)
    if "cheeger_tau" in raw:
        kw["cheeger_tau"] = _num(raw["cheeger_tau"], "cheeger_tau")
    if "out" in raw:
        kw["out"] = str(raw["out"])
    for key, cls in _SECTIONS.items():
        if key in raw:
            sec = raw[key] or {}
            if not isinstance(sec, dict):
                raise ValidationError(f"{key} must be a mapping")
            _check_keys(sec, cls, key)
            sec = dict(sec)
            if key == "measure" and sec.get("weights") is not None:
                sec["weights"] = tuple(_num(w, "measure weight") for w in sec["weights"])
            if key == "lift" and sec.get("covers") is not None:
                sec["covers"] = tuple((_int(a, "cover modulus"), _int(b, "cover modulus")) for a, b in sec["covers"])
            kw[key] = cls(**sec)
    cfg = RunConfig(**kw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    cfg.chain()  # family name and every modulus
    if any(not (1 < p < math.inf) for p in cfg.p_values):
        raise ValidationError(f"p values must lie in (1, inf), got {list(cfg.p_values)}")
    if not cfg.p_values:
        raise ValidationError("p_values must not be empty")
    lo, hi = cfg.n_range
    if not 1 <= lo <= hi:
        raise ValidationError(f"n_range must satisfy 1 <= first <= last, got {[lo, hi]}")
    if any(r < 0 for r in cfg.R_list):
        raise ValidationError("R_list entries must be non-negative")
    if cfg.ball_radius < 1:
        raise ValidationError("ball_radius must be >= 1")
    cfg.mu()
    for src, tgt in cfg.lift.covers or ():
        if src % tgt:
            raise ValidationError(f"cover {src} -> {tgt}: levels not nested ({tgt} does not divide {src})")
    if cfg.lift.trials < 1 or cfg.lift.block_dim < 1:
        raise ValidationError("lift.trials and lift.block_dim must be >= 1")
    ob = cfg.obstruction
    if ob.p is not None and not 1 < ob.p < math.inf:
        raise ValidationError("obstruction.p must lie in (1, inf)")
    if not 0 < ob.c < 1:
        raise ValidationError("obstruction.c must lie in (0, 1)")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from None
    return config_from_dict(raw)


def resolve_out(cfg: RunConfig, cli_out: str | None) -> Path:
    """--out beats ROELAB_OUT beats the config value."""
    return Path(cli_out or os.environ.get("ROELAB_OUT") or cfg.out)


def resolve_threads(cli_threads: int | None) -> int | None:
    if cli_threads is not None:
        return cli_threads
    env = os.environ.get("ROELAB_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"ROELAB_THREADS must be an integer, got {env!r}") from None
