"""Scenario configuration: JSON files, defaults, environment overrides, validation.

Schema (every key optional; defaults shown)::

    {
      "model": "dp-monitoring",        # dp-monitoring | dp-full | csl-monitoring
      "m": 1.0, "a": 1.0, "d": 3.0,    # mass, in-particle site spacing, centre distance
      "sigma": 10.0,                   # smearing length (Gaussian standard deviation)
      "kappa": 2.0,                    # DP strength; must be null for csl-monitoring
      "gamma": null,                   # CSL rate; required for csl-monitoring
      "constants": "natural",          # "natural", "si" or {"G": ..., "hbar": ...}
      "time": {"t_max": null, "n_points": 51},        # t_max null -> 5 / Gamma_max
      "trajectories": {"n_traj": 10000, "dt": null,   # dt null -> 1e-3 / Gamma_max
                       "master_seed": 0, "checkpoints": 10,
                       "with_backaction": false, "t_max": null},  # t_max null -> 2 / Gamma_max
      "sweep": {"param": "sigma", "values": null,
                "start": 1.0, "stop": 100.0, "num": 10, "spacing": "log", "dt": 1e-3},
      "bipartition": [0],
      "threads": 1                     # worker threads; never changes results
    }

Environment variables ``CMSIM_<KEY>`` override top-level keys and
``CMSIM_<SECTION>__<KEY>`` nested ones; values are parsed as JSON when
possible and kept as strings otherwise.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .generators import GeneratorTables, build_tables
from .model import CSL, DP, PhysicalConstants, ValidationError, bmv_scenario
from .trajectories import Scenario

ENV_PREFIX = "CMSIM_"
MODELS = ("dp-monitoring", "dp-full", "csl-monitoring")
SWEEP_PARAMS = ("a", "d", "sigma", "m")

DEFAULTS: dict[str, Any] = {
    "model": "dp-monitoring",
    "m": 1.0,
    "a": 1.0,
    "d": 3.0,
    "sigma": 10.0,
    "kappa": 2.0,
    "gamma": None,
    "constants": "natural",
    "time": {"t_max": None, "n_points": 51},
    "trajectories": {"n_traj": 10000, "dt": None, "master_seed": 0, "checkpoints": 10,
                     "with_backaction": False, "t_max": None},
    "sweep": {"param": "sigma", "values": None, "start": 1.0, "stop": 100.0, "num": 10,
              "spacing": "log", "dt": 1e-3},
    "bipartition": [0],
    "threads": 1,
}


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ValidationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ValidationError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_env_value(environ[name])
    return out


def load_config(path: str | os.PathLike | None = None, environ: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> "ScenarioConfig":
    """Defaults, then the file, then environment, then explicit overrides."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config root must be an object")
        raw = _merge(raw, data)
    raw = _merge(raw, env_overrides(environ))
    if overrides:
        raw = _merge(raw, overrides)
    return ScenarioConfig.from_dict(raw)


def _positive(name: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def _optional_positive(name: str, value):
    return None if value is None else _positive(name, value)


def _count(name: str, value, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    raw: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = _merge(DEFAULTS, raw)
        model = raw["model"]
        if model not in MODELS:
            raise ValidationError(f"model must be one of {MODELS}, got {model!r}")
        for key in ("m", "a", "d", "sigma"):
            raw[key] = _positive(key, raw[key])
        if model == "csl-monitoring":
            if raw["kappa"] is not None:
                raise ValidationError("csl-monitoring does not take kappa; set it to null")
            raw["gamma"] = _positive("gamma", raw["gamma"])
        else:
            if raw["gamma"] is not None:
                raise ValidationError(f"{model} does not take gamma")
            raw["kappa"] = _positive("kappa", raw["kappa"])
        c = raw["constants"]
        if isinstance(c, str):
            PhysicalConstants.profile(c)
        elif isinstance(c, Mapping) and set(c) <= {"G", "hbar"}:
            PhysicalConstants(_positive("G", c.get("G", 1.0)), _positive("hbar", c.get("hbar", 1.0)))
        else:
            raise ValidationError("constants must be a profile name or {\"G\": .., \"hbar\": ..}")
        t = raw["time"]
        t["t_max"] = _optional_positive("time.t_max", t["t_max"])
        _count("time.n_points", t["n_points"], 2)
        tr = raw["trajectories"]
        _count("trajectories.n_traj", tr["n_traj"], 2)
        tr["dt"] = _optional_positive("trajectories.dt", tr["dt"])
        tr["t_max"] = _optional_positive("trajectories.t_max", tr["t_max"])
        _count("trajectories.checkpoints", tr["checkpoints"], 1)
        seed = tr["master_seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ValidationError(f"trajectories.master_seed must be an unsigned 64-bit integer, got {seed!r}")
        if not isinstance(tr["with_backaction"], bool):
            raise ValidationError("trajectories.with_backaction must be true or false")
        sw = raw["sweep"]
        if sw["param"] not in SWEEP_PARAMS:
            raise ValidationError(f"sweep.param must be one of {SWEEP_PARAMS}")
        sw["dt"] = _positive("sweep.dt", sw["dt"])
        if sw["values"] is None:
            _positive("sweep.start", sw["start"])
            _positive("sweep.stop", sw["stop"])
            _count("sweep.num", sw["num"], 1)
            if sw["spacing"] not in ("log", "linear"):
                raise ValidationError("sweep.spacing must be 'log' or 'linear'")
        else:
            if not isinstance(sw["values"], list) or not sw["values"]:
                raise ValidationError("sweep.values must be a non-empty list")
            sw["values"] = [_positive("sweep.values[]", v) for v in sw["values"]]
        bp = raw["bipartition"]
        if not isinstance(bp, list) or not bp or any(i not in (0, 1) for i in bp) or len(set(bp)) != len(bp) or len(bp) > 1:
            raise ValidationError("bipartition must list one particle index of the two-mass system, e.g. [0]")
        _count("threads", raw["threads"], 1)
        return cls(raw)

    # convenient views --------------------------------------------------

    def __getitem__(self, key):
        return self.raw[key]

    def with_overrides(self, **updates) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(_merge(self.raw, updates))

    @property
    def model(self) -> str:
        return self.raw["model"]

    @property
    def constants(self) -> PhysicalConstants:
        c = self.raw["constants"]
        if isinstance(c, str):
            return PhysicalConstants.profile(c)
        return PhysicalConstants(float(c.get("G", 1.0)), float(c.get("hbar", 1.0)))

    @property
    def kernel(self):
        if self.model == "csl-monitoring":
            return CSL(self.raw["gamma"])
        return DP(self.raw["kappa"])

    def scenario(self) -> Scenario:
        r = self.raw
        system, rho0 = bmv_scenario(r["m"], r["a"], r["d"], r["sigma"])
        return Scenario(system, rho0, self.kernel, self.constants)

    def tables(self) -> GeneratorTables:
        sc = self.scenario()
        return build_tables(sc.system, sc.kernel, sc.constants, self.model)

    def sweep_values(self) -> np.ndarray:
        sw = self.raw["sweep"]
        if sw["values"] is not None:
            return np.asarray(sw["values"], float)
        if sw["spacing"] == "log":
            return np.geomspace(sw["start"], sw["stop"], sw["num"])
        return np.linspace(sw["start"], sw["stop"], sw["num"])

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True)
