"""Experiment configuration: JSON schema, defaults, validation, manifests.

Every run is driven by one config file; all randomness flows from the seed
recorded there (or overridden on the command line), and each command writes
a manifest with the config hash so results can be reproduced exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .models import LinearStateConstraints, make_model, registered_models


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


_PROBLEM_DEFAULTS = {
    "T": 10.0,
    "N": 40,
    "constraints": [],
    "D": None,  # identity by default
    "x_ref": None,  # origin by default
    "rho_u": 0.0,
    "x0": None,
    "terminal": None,
}

_SOLVER_DEFAULTS = {
    "seed": None,  # must be present explicitly
    "tol_feas": 5e-7,
    "max_outer": 14,
    "inner_maxiter": 80,
    "warmup_maxiter": 25,
    "rho0": 10.0,
    "rho_growth": 8.0,
    "fd_step": 1e-6,
    "n_sub": 4,
    "n_sub_final": 8,
    "conv_tol": 2e-6,
    "first_interval_no_shaping": True,
    "verbose": False,
}

_SIM_DEFAULTS = {
    "n_scenarios": 20,
    "sampling_period": 0.25,
    "disturbance_mode": "uniform-ball",
    "n_sub": 8,
    "duration": None,  # defaults to the horizon
}

_PROPAGATE_DEFAULTS = {
    "mode": "openloop",
    "u": None,  # defaults to the control-ellipsoid center
    "lambda": 1.0,
    "kappa": 1.0,
    "Q0": None,  # defaults to the zero matrix
    "params_file": None,  # CSV with per-interval policy rows
}

_BOUNDER_DEFAULTS = {"grid_density": 50, "cache": True}


def _merge(defaults, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    unknown = set(data) - set(defaults)
    if unknown:
        raise ConfigError(path, f"unknown keys {sorted(unknown)}")
    out = dict(defaults)
    out.update(data)
    return out


@dataclass
class ExperimentConfig:
    """Validated, normalized experiment description."""

    model_name: str
    model_overrides: dict
    problem: dict
    solver: dict
    simulation: dict
    propagate: dict
    bounders: dict
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_dict(cls, data, source="<config>"):
        if not isinstance(data, dict):
            raise ConfigError(source, "top level must be an object")
        unknown = set(data) - {
            "model", "problem", "solver", "simulation", "propagate",
            "bounders", "output_dir",
        }
        if unknown:
            raise ConfigError(source, f"unknown sections {sorted(unknown)}")
        model_block = data.get("model")
        if not isinstance(model_block, dict) or "name" not in model_block:
            raise ConfigError(source + ":model", "need a model name")
        name = model_block["name"]
        if name not in registered_models():
            raise ConfigError(
                source + ":model", f"unknown model {name!r}; "
                f"registered: {registered_models()}"
            )
        overrides = model_block.get("overrides", {})
        problem = _merge(_PROBLEM_DEFAULTS, data.get("problem", {}),
                         source + ":problem")
        solver = _merge(_SOLVER_DEFAULTS, data.get("solver", {}),
                        source + ":solver")
        if solver["seed"] is None:
            raise ConfigError(source + ":solver", "seed must be set explicitly")
        simulation = _merge(_SIM_DEFAULTS, data.get("simulation", {}),
                            source + ":simulation")
        if simulation["disturbance_mode"] not in ("uniform-ball", "boundary"):
            raise ConfigError(source + ":simulation",
                              "disturbance_mode must be uniform-ball or boundary")
        propagate = _merge(_PROPAGATE_DEFAULTS, data.get("propagate", {}),
                           source + ":propagate")
        bounders = _merge(_BOUNDER_DEFAULTS, data.get("bounders", {}),
                          source + ":bounders")
        if problem["T"] <= 0 or problem["N"] < 1:
            raise ConfigError(source + ":problem", "need T > 0 and N >= 1")
        if simulation["sampling_period"] <= 0:
            raise ConfigError(source + ":simulation", "sampling_period must be > 0")
        for row in problem["constraints"]:
            if not isinstance(row, dict) or "h" not in row or "eta" not in row:
                raise ConfigError(source + ":problem:constraints",
                                  "each row needs 'h' and 'eta'")
        return cls(
            model_name=name,
            model_overrides=overrides,
            problem=problem,
            solver=solver,
            simulation=simulation,
            propagate=propagate,
            bounders=bounders,
            output_dir=data.get("output_dir", "results"),
            raw=data,
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(path, "file not found")
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}:{err.lineno}", f"invalid JSON: {err.msg}")
        return cls.from_dict(data, source=path)

    def to_dict(self):
        return {
            "model": {"name": self.model_name, "overrides": self.model_overrides},
            "problem": self.problem,
            "solver": self.solver,
            "simulation": self.simulation,
            "propagate": self.propagate,
            "bounders": self.bounders,
            "output_dir": self.output_dir,
        }

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def build_model(self):
        overrides = {
            k: (np.asarray(v, dtype=float) if isinstance(v, list) else v)
            for k, v in self.model_overrides.items()
        }
        return make_model(self.model_name, **overrides)

    def build_constraints(self):
        rows = self.problem["constraints"]
        if not rows:
            return None
        return LinearStateConstraints(
            h=np.asarray([r["h"] for r in rows], dtype=float),
            eta=np.asarray([r["eta"] for r in rows], dtype=float),
        )

    def write_manifest(self, out_dir, extra=None):
        from importlib.metadata import PackageNotFoundError, version

        try:
            ver = version("tubempc")
        except PackageNotFoundError:
            ver = "0.1.0+local"
        manifest = {
            "config_hash": self.config_hash(),
            "version": ver,
            "seed": self.solver["seed"],
        }
        if extra:
            manifest.update(extra)
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(self.canonical_json())
        return manifest
