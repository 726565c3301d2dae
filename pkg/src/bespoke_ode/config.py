"""TOML run configuration: strict schema, defaults, and testbed builders.

Unknown sections or keys are rejected outright so a typo cannot silently
fall back to a default.  Every command reads only the sections it needs;
all sections are optional unless a command states otherwise.
"""

from __future__ import annotations

import os
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError

__all__ = [
    "load_config",
    "validate_config",
    "build_scheduler",
    "build_mixture",
    "build_field",
    "train_config_from",
]

_SCHEDULERS = ("ot", "cosine", "vp")
_LAYOUTS = ("circle", "random", "explicit")

# section -> key -> (type or tuple of types, default)
_SCHEMA = {
    "testbed": {
        "field": (str, "gmm"),
        "scheduler": (str, "ot"),
        "vp_beta_max": ((int, float), 20.0),
        "vp_beta_min": ((int, float), 0.1),
        "dim": (int, 2),
        "layout": (str, "circle"),
        "components": (int, 5),
        "radius": ((int, float), 3.0),
        "variance": ((int, float), 0.09),
        "seed": (int, 0),
        "means": (list, None),
        "weights": (list, None),
        "variances": (list, None),
    },
    "solver": {
        "base_kind": (str, "rk2"),
        "n": (int, 5),
    },
    "train": {
        "iterations": (int, 2000),
        "batch_size": (int, 64),
        "learning_rate": ((int, float), 2e-3),
        "l_tau": ((int, float), 1.0),
        "seed": (int, 0),
        "grad_engine": (str, "forward-sens"),
        "fd_epsilon": ((int, float), 1e-5),
        "fresh_batch_every": (int, 1),
        "validation_every": (int, 50),
        "validation_size": (int, 256),
        "gt_rtol": ((int, float), 1e-9),
        "gt_atol": ((int, float), 1e-9),
    },
    "eval": {
        "nfe_grid": (list, None),
        "batch": (int, 256),
        "seed": (int, 7),
        "solvers": (list, None),
        "bespoke_schemes": (list, None),
        "rtol": ((int, float), 1e-9),
        "atol": ((int, float), 1e-9),
    },
    "order": {
        "kinds": (list, None),
        "bespoke": (bool, True),
        "scheme_count": (int, 10),
        "trajectories": (int, 8),
        "seed": (int, 0),
        "rtol": ((int, float), 1e-10),
        "band_rk1": (list, None),
        "band_rk2": (list, None),
        "band_bespoke_rk1": (list, None),
        "band_bespoke_rk2": (list, None),
        "band_bespoke_global": (list, None),
    },
    "equiv": {
        "schedulers": (list, None),
        "pairs": (list, None),
        "batch": (int, 16),
        "r_lo": ((int, float), 0.02),
        "r_hi": ((int, float), 0.98),
        "r_points": (int, 97),
        "field_probes": (int, 200),
        "rtol": ((int, float), 1e-9),
        "seed": (int, 0),
        "max_path_residual": ((int, float), 1e-5),
        "max_field_rel_err": ((int, float), 1e-8),
    },
    "sample": {
        "count": (int, 256),
        "seed": (int, 0),
    },
    "io": {
        "out_dir": (str, "runs/out"),
        "cache_dir": (str, None),
    },
}


def validate_config(doc: dict, path: str = "<config>") -> dict:
    """Check a parsed config against the schema; fill defaults; return it."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table")
    out = {}
    for section, content in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(
                f"{path}: unknown section [{section}]; known: {sorted(_SCHEMA)}"
            )
        if not isinstance(content, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        schema = _SCHEMA[section]
        merged = {}
        for key, value in content.items():
            if key not in schema:
                raise ConfigError(
                    f"{path}: unknown key '{key}' in [{section}]; known: {sorted(schema)}"
                )
            expected, _ = schema[key]
            if isinstance(value, bool) and expected is int:
                raise ConfigError(f"{path}: [{section}].{key} must be an integer")
            if not isinstance(value, expected):
                raise ConfigError(
                    f"{path}: [{section}].{key} has type {type(value).__name__}"
                )
            merged[key] = value
        for key, (_, default) in schema.items():
            if key not in merged and default is not None:
                merged[key] = default
        out[section] = merged
    # sections absent from the file still get defaults
    for section, schema in _SCHEMA.items():
        if section not in out:
            out[section] = {
                key: default for key, (_, default) in schema.items() if default is not None
            }
    return out


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc
    return validate_config(doc, path=str(path))


def build_scheduler(testbed: dict):
    from . import schedulers

    name = testbed.get("scheduler", "ot")
    if name == "ot":
        return schedulers.make_ot_scheduler()
    if name == "cosine":
        return schedulers.make_cosine_scheduler()
    if name == "vp":
        return schedulers.make_vp_scheduler(
            beta_max=float(testbed.get("vp_beta_max", 20.0)),
            beta_min=float(testbed.get("vp_beta_min", 0.1)),
        )
    raise ConfigError(f"unknown scheduler '{name}'; known: {_SCHEDULERS}")


def build_mixture(testbed: dict):
    import numpy as np

    from . import flow_fields

    layout = testbed.get("layout", "circle")
    if layout == "circle":
        return flow_fields.circle_mixture(
            components=int(testbed.get("components", 5)),
            radius=float(testbed.get("radius", 3.0)),
            variance=float(testbed.get("variance", 0.09)),
            dim=int(testbed.get("dim", 2)),
        )
    if layout == "random":
        rng = np.random.default_rng(int(testbed.get("seed", 0)))
        return flow_fields.random_mixture(
            rng, components=int(testbed.get("components", 5)), dim=int(testbed.get("dim", 2))
        )
    if layout == "explicit":
        for key in ("means", "weights", "variances"):
            if key not in testbed:
                raise ConfigError(f"explicit mixture layout requires [testbed].{key}")
        return flow_fields.GaussianMixture(
            weights=testbed["weights"], means=testbed["means"], variances=testbed["variances"]
        )
    raise ConfigError(f"unknown mixture layout '{layout}'; known: {_LAYOUTS}")


def build_field(testbed: dict):
    """Velocity field named by [testbed]: the GMM marginal or the affine oracle."""
    from . import flow_fields

    kind = testbed.get("field", "gmm")
    if kind == "affine":
        return flow_fields.affine_standard_field()
    if kind == "gmm":
        return flow_fields.gmm_marginal_field(build_scheduler(testbed), build_mixture(testbed))
    raise ConfigError(f"unknown field '{kind}'; known: gmm, affine")


def train_config_from(cfg: dict, seed_override: Optional[int] = None):
    from .training import TrainConfig

    train = cfg.get("train", {})
    solver = cfg.get("solver", {})
    kwargs = dict(train)
    kwargs["n"] = int(solver.get("n", 5))
    kwargs["base_kind"] = solver.get("base_kind", "rk2")
    if seed_override is not None:
        kwargs["seed"] = int(seed_override)
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from exc
